"""Conditional-mean count models for weekly series.

The model family: counts are conditionally Poisson or negative binomial with
mean mu_t built from a recursive component nu_t (lagged observations and
lagged nu's), optional covariates entering inside (internal) or outside
(external) the recursion, a linear weekly trend, and pandemic-break
intervention terms (level shift, slope change) plus an optional holiday-week
effect. The link is either the identity or the logarithm: under the log link
nu_t feeds on log(Y+1) and mu_t = exp(linear predictor).

Negative-binomial variance is mu + sigma2 * mu^2; sigma2 = 0 recovers the
Poisson.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np
from scipy import signal, stats
from scipy.special import gammaln, xlogy

from .errors import (
    AlignmentError,
    ConstraintError,
    DataError,
    DomainError,
    NumericError,
    SpecError,
)
from .weeks import WeekIndex, WeeklySeries

DISTRIBUTIONS = ("poisson", "negbin")
LINKS = ("identity", "log")
EFFECTS = ("internal", "external")
TRANSFORMS = ("identity", "log1p")

# Margin keeping the dynamics strictly inside the stationarity boundary.
STATIONARITY_MARGIN = 1e-6
# Float slack when re-validating constraints produced by the optimizer.
_CONSTRAINT_SLACK = 1e-9
# sigma2 below this is treated as the exact Poisson limit.
_POISSON_LIMIT = 1e-12
MAX_LAG = 8


# ---------------------------------------------------------------------------
# specification types


@dataclass(frozen=True, eq=False)
class CovariateMatrix:
    """Named per-week covariate columns aligned to a weekly series.

    `lag` and `transform` describe how the columns are read by a model:
    column values enter at week t as transform(X[t - lag]).
    """

    names: tuple[str, ...]
    values: np.ndarray
    lag: int = 0
    transform: str = "identity"

    def __post_init__(self) -> None:
        names = tuple(self.names)
        if not names or len(set(names)) != len(names):
            raise SpecError(f"covariate names must be nonempty and unique: {names!r}")
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        if values.ndim != 2 or values.shape[1] != len(names):
            raise AlignmentError(
                f"covariate values must be (weeks x {len(names)}), got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise DataError("covariate values must be finite")
        _check_lag_transform(self.lag, self.transform)
        if self.transform == "log1p" and values.min(initial=0.0) < 0:
            raise DomainError("log1p transform requires non-negative covariate values")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", values)

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.names.index(name)
        except ValueError:
            raise AlignmentError(f"covariate {name!r} not present in {self.names}") from None
        return self.values[:, j]

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class CovariateSelection:
    """Which covariate columns a model uses, and how: lag in weeks, transform."""

    names: tuple[str, ...]
    lag: int = 0
    transform: str = "identity"

    def __post_init__(self) -> None:
        names = tuple(self.names)
        if not names or len(set(names)) != len(names):
            raise SpecError(f"covariate selection must name distinct columns: {names!r}")
        _check_lag_transform(self.lag, self.transform)
        object.__setattr__(self, "names", names)


def _check_lag_transform(lag: int, transform: str) -> None:
    if not isinstance(lag, int) or not 0 <= lag <= MAX_LAG:
        raise SpecError(f"covariate lag must be an integer in 0..{MAX_LAG}, got {lag!r}")
    if transform not in TRANSFORMS:
        raise SpecError(f"transform must be one of {TRANSFORMS}, got {transform!r}")


# Valid lag tuples are few (increasing subsets of 1..8); memoizing their
# validation keeps full-portfolio enumeration fast.
_VALID_LAG_TUPLES: dict[tuple, tuple[int, ...]] = {}


def _validated_lag_tuple(lags, label: str) -> tuple[int, ...]:
    t = tuple(lags)
    try:
        cached = _VALID_LAG_TUPLES.get(t)
    except TypeError:
        cached = None
    if cached is not None:
        return cached
    if any(int(k) != k for k in t):
        raise SpecError(f"{label} must contain integers, got {t}")
    norm = tuple(int(k) for k in t)
    if any(not 1 <= k <= MAX_LAG for k in norm):
        raise SpecError(f"{label} must lie in 1..{MAX_LAG}, got {norm}")
    if any(b <= a for a, b in zip(norm, norm[1:])):
        raise SpecError(f"{label} must be strictly increasing, got {norm}")
    _VALID_LAG_TUPLES[t] = norm
    return norm


@dataclass(frozen=True)
class InterventionConfig:
    """Pandemic-break and calendar intervention switches.

    The break dummy is 0 strictly before `break_week` and 1 from it onward.
    `holiday_indicator` may extend beyond the fitted series so the same
    config can serve forecasts; entries past the series length are ignored
    in-sample.
    """

    break_week: WeekIndex = WeekIndex(2020, 1)
    include_level_shift: bool = True
    include_slope_change: bool = False
    include_trend: bool = True
    holiday_indicator: Optional[tuple[int, ...]] = None

    def __post_init__(self) -> None:
        if self.include_slope_change and not self.include_trend:
            raise SpecError("slope change requires the trend term")
        if self.holiday_indicator is not None:
            hol = tuple(int(v) for v in self.holiday_indicator)
            if any(v not in (0, 1) for v in hol):
                raise SpecError("holiday indicator must contain only 0/1 values")
            object.__setattr__(self, "holiday_indicator", hol)


@dataclass(frozen=True)
class ModelSpec:
    """One point in the candidate portfolio."""

    distribution: str
    link: str
    obs_lags: tuple[int, ...] = ()
    mean_lags: tuple[int, ...] = ()
    covariates: Optional[CovariateSelection] = None
    covariate_effect: str = "external"
    intervention: InterventionConfig = field(default_factory=InterventionConfig)

    def __post_init__(self) -> None:
        if self.distribution not in DISTRIBUTIONS:
            raise SpecError(f"distribution must be one of {DISTRIBUTIONS}")
        if self.link not in LINKS:
            raise SpecError(f"link must be one of {LINKS}")
        if self.covariate_effect not in EFFECTS:
            raise SpecError(f"covariate effect must be one of {EFFECTS}")
        obs = _validated_lag_tuple(self.obs_lags, "obs_lags")
        mean = _validated_lag_tuple(self.mean_lags, "mean_lags")
        if mean and not obs:
            raise SpecError("mean-feedback lags require at least one observation lag")
        object.__setattr__(self, "obs_lags", obs)
        object.__setattr__(self, "mean_lags", mean)

    @property
    def max_lag(self) -> int:
        return max(self.obs_lags + self.mean_lags, default=0)

    @property
    def uses_holiday(self) -> bool:
        return self.intervention.holiday_indicator is not None


@dataclass(frozen=True)
class ParameterVector:
    """Parameter values for a ModelSpec.

    Terms the spec does not include are absent (None / empty mapping),
    never zero-valued placeholders. `beta` is keyed by observation lag,
    `alpha` by mean lag, `eta` by covariate name.
    """

    beta0: float
    beta: Mapping[int, float] = field(default_factory=dict)
    alpha: Mapping[int, float] = field(default_factory=dict)
    eta: Mapping[str, float] = field(default_factory=dict)
    eta_time: Optional[float] = None
    delta_eta_time: Optional[float] = None
    delta_beta0: Optional[float] = None
    gamma: Optional[float] = None
    sigma2: Optional[float] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta", dict(self.beta))
        object.__setattr__(self, "alpha", dict(self.alpha))
        object.__setattr__(self, "eta", dict(self.eta))


def validate_params(spec: ModelSpec, params: ParameterVector) -> None:
    """Check structural agreement with `spec` and admissibility constraints."""
    if set(params.beta) != set(spec.obs_lags):
        raise SpecError(
            f"beta keys {sorted(params.beta)} do not match obs_lags {list(spec.obs_lags)}"
        )
    if set(params.alpha) != set(spec.mean_lags):
        raise SpecError(
            f"alpha keys {sorted(params.alpha)} do not match mean_lags {list(spec.mean_lags)}"
        )
    want_eta = set(spec.covariates.names) if spec.covariates else set()
    if set(params.eta) != want_eta:
        raise SpecError(f"eta keys {sorted(params.eta)} do not match covariates {sorted(want_eta)}")
    iv = spec.intervention
    for attr, wanted, term in (
        ("eta_time", iv.include_trend, "trend"),
        ("delta_eta_time", iv.include_slope_change, "slope change"),
        ("delta_beta0", iv.include_level_shift, "level shift"),
        ("gamma", spec.uses_holiday, "holiday effect"),
        ("sigma2", spec.distribution == "negbin", "overdispersion"),
    ):
        value = getattr(params, attr)
        if wanted and value is None:
            raise SpecError(f"spec includes the {term} term but params.{attr} is absent")
        if not wanted and value is not None:
            raise SpecError(f"params.{attr} set but the spec has no {term} term")
    if params.sigma2 is not None and params.sigma2 < 0:
        raise ConstraintError(f"sigma2 must be >= 0, got {params.sigma2}")

    betas = np.array([params.beta[k] for k in spec.obs_lags], dtype=float)
    alphas = np.array([params.alpha[j] for j in spec.mean_lags], dtype=float)
    bound = 1.0 - STATIONARITY_MARGIN + _CONSTRAINT_SLACK
    if spec.link == "identity":
        if not params.beta0 > 0:
            raise ConstraintError(f"identity link requires beta0 > 0, got {params.beta0}")
        if (betas < 0).any() or (alphas < 0).any():
            raise ConstraintError("identity link requires non-negative beta and alpha")
        if betas.sum() + alphas.sum() > bound:
            raise ConstraintError(
                f"sum(beta) + sum(alpha) = {betas.sum() + alphas.sum():.8f} exceeds "
                f"{1.0 - STATIONARITY_MARGIN}"
            )
    else:
        total = np.abs(betas).sum() + np.abs(alphas).sum()
        if total > bound:
            raise ConstraintError(
                f"sum|beta| + sum|alpha| = {total:.8f} exceeds {1.0 - STATIONARITY_MARGIN}"
            )


# ---------------------------------------------------------------------------
# internal evaluation machinery


class Coefs(NamedTuple):
    """Dense coefficient view used by the numeric core (0.0 for absent terms)."""

    beta0: float
    beta: np.ndarray
    alpha: np.ndarray
    eta: np.ndarray
    eta_time: float
    delta_eta_time: float
    delta_beta0: float
    gamma: float
    sigma2: float


def coefs_from_params(spec: ModelSpec, params: ParameterVector) -> Coefs:
    names = spec.covariates.names if spec.covariates else ()
    return Coefs(
        beta0=float(params.beta0),
        beta=np.array([params.beta[k] for k in spec.obs_lags], dtype=float),
        alpha=np.array([params.alpha[j] for j in spec.mean_lags], dtype=float),
        eta=np.array([params.eta[n] for n in names], dtype=float),
        eta_time=float(params.eta_time or 0.0),
        delta_eta_time=float(params.delta_eta_time or 0.0),
        delta_beta0=float(params.delta_beta0 or 0.0),
        gamma=float(params.gamma or 0.0),
        sigma2=float(params.sigma2 or 0.0),
    )


def transform_obs(values: np.ndarray, link: str) -> np.ndarray:
    """Observation values as they feed the recursion: raw or log(y+1)."""
    return np.log1p(values) if link == "log" else values


def apply_transform(values: np.ndarray, transform: str) -> np.ndarray:
    return np.log1p(values) if transform == "log1p" else values


def break_dummy(start: WeekIndex, length: int, break_week: WeekIndex) -> np.ndarray:
    """0/1 break dummy over `length` weeks from `start`."""
    offset = break_week - start
    return (np.arange(length) >= offset).astype(float)


def select_covariate_block(
    spec: ModelSpec,
    covariates: Optional[CovariateMatrix],
    length: int,
    mean_window: Optional[int] = None,
) -> Optional[np.ndarray]:
    """Lagged, transformed covariate block (length x n) for the spec's selection.

    Rows before the first observation substitute the column's sample mean
    over `mean_window` aligned weeks (transform applied after averaging).
    When forecasting, `length` may exceed the fitted window while
    `mean_window` pins the substitution to the in-sample mean.
    """
    sel = spec.covariates
    if sel is None:
        return None
    if covariates is None:
        raise SpecError(f"spec requires covariates {sel.names} but none were supplied")
    mw = mean_window if mean_window is not None else length
    needed = max(mw, length - sel.lag)
    if len(covariates) < needed:
        raise AlignmentError(
            f"covariates cover {len(covariates)} weeks but {needed} are required"
        )
    cols = []
    for name in sel.names:
        raw = covariates.column(name)
        used = raw[: length - sel.lag]
        if sel.transform == "log1p" and (
            (len(used) and used.min() < 0) or raw[:mw].min() < 0
        ):
            raise DomainError(f"covariate {name!r} has negative values under log1p")
        body = apply_transform(used, sel.transform)
        pre = apply_transform(np.array([raw[:mw].mean()]), sel.transform)[0]
        cols.append(np.concatenate((np.full(sel.lag, pre), body)))
    return np.column_stack(cols)


@dataclass
class PathWorkspace:
    """Precomputed arrays for repeated mean-path / likelihood evaluation."""

    spec: ModelSpec
    T: int
    y: np.ndarray
    lgamma_y1: np.ndarray
    lag_block: Optional[np.ndarray]  # (T x p) transformed lagged observations
    cov_block: Optional[np.ndarray]  # (T x n) lagged transformed covariates
    dummy: np.ndarray  # break dummy
    tt: np.ndarray  # 1-based trend index
    holiday: Optional[np.ndarray]
    burnin: int
    f_pre: float  # pre-sample substitute for transformed observations
    ybar: float
    start: WeekIndex

    @property
    def n_effective(self) -> int:
        return self.T - self.burnin

    def path(self, c: Coefs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (nu, linear predictor, mu); no validity checks."""
        spec = self.spec
        rhs = np.full(self.T, c.beta0)
        if self.lag_block is not None:
            rhs += self.lag_block @ c.beta
        cov_term = None
        if self.cov_block is not None:
            cov_term = self.cov_block @ c.eta
            if spec.covariate_effect == "internal":
                rhs += cov_term
        nu = _alpha_recursion(rhs, spec.mean_lags, c.alpha, c.beta0)
        lin = nu
        iv = spec.intervention
        offset = None
        if iv.include_level_shift:
            offset = c.delta_beta0 * self.dummy
        if iv.include_trend:
            rate = c.eta_time + (c.delta_eta_time * self.dummy if iv.include_slope_change else 0.0)
            term = rate * self.tt
            offset = term if offset is None else offset + term
        if self.holiday is not None:
            term = c.gamma * self.holiday
            offset = term if offset is None else offset + term
        if cov_term is not None and spec.covariate_effect == "external":
            offset = cov_term if offset is None else offset + cov_term
        if offset is not None:
            lin = nu + offset
        if spec.link == "log":
            with np.errstate(over="ignore"):
                mu = np.exp(lin)
        else:
            mu = lin
        return nu, lin, mu

    def loglik(self, c: Coefs) -> float:
        """Log-likelihood over the post burn-in sample; raises on invalid paths."""
        _, _, mu = self.checked_path(c)
        return float(
            np.sum(
                logpmf(
                    self.y[self.burnin :],
                    mu[self.burnin :],
                    self.spec.distribution,
                    c.sigma2,
                    self.lgamma_y1[self.burnin :],
                )
            )
        )

    def checked_path(self, c: Coefs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        nu, lin, mu = self.path(c)
        bad = ~np.isfinite(mu)
        if bad.any():
            t = int(np.argmax(bad))
            raise NumericError(
                f"non-finite conditional mean at t={t + 1} (week {self.start + t})"
            )
        if self.spec.link == "identity" and (mu <= 0).any():
            t = int(np.argmax(mu <= 0))
            raise ConstraintError(
                f"conditional mean {mu[t]:.6g} <= 0 at t={t + 1} under the identity link"
            )
        return nu, lin, mu


def _alpha_recursion(
    rhs: np.ndarray, mean_lags: tuple[int, ...], alpha: np.ndarray, nu_init: float
) -> np.ndarray:
    """Solve nu_t = rhs_t + sum_l alpha_l nu_{t-j_l}, pre-sample nu = nu_init."""
    if not mean_lags:
        return rhs
    max_q = mean_lags[-1]
    a = np.zeros(max_q + 1)
    a[0] = 1.0
    for j, coef in zip(mean_lags, alpha):
        a[j] = -coef
    # initial filter state for constant past outputs nu_init: the direct-form
    # transposed state is nu_init times the reversed cumulative alpha sums
    dense_alpha = -a[1:]
    zi = nu_init * np.cumsum(dense_alpha[::-1])[::-1]
    nu, _ = signal.lfilter([1.0], a, rhs, zi=zi)
    return nu


def build_workspace(
    spec: ModelSpec,
    series: WeeklySeries,
    covariates: Optional[CovariateMatrix] = None,
    burnin: Optional[int] = None,
) -> PathWorkspace:
    """Precompute evaluation arrays; `burnin` may widen the excluded prefix
    beyond the spec's own maximum lag so that likelihoods from specs with
    different lag orders share one effective sample."""
    T = len(series)
    if T == 0:
        raise DataError("series is empty")
    if T <= spec.max_lag:
        raise DataError(
            f"series length {T} must exceed the maximum lag {spec.max_lag}"
        )
    effective_burnin = max(spec.max_lag, burnin or 0)
    if T <= effective_burnin:
        raise DataError(
            f"series length {T} must exceed the burn-in {effective_burnin}"
        )
    y = series.values()
    ybar = float(y.mean())
    f_pre = float(transform_obs(np.array([ybar]), spec.link)[0])
    f_y = transform_obs(y, spec.link)

    lag_block = None
    if spec.obs_lags:
        max_p = spec.obs_lags[-1]
        padded = np.concatenate((np.full(max_p, f_pre), f_y))
        lag_block = np.column_stack(
            [padded[max_p - k : max_p - k + T] for k in spec.obs_lags]
        )

    cov_block = select_covariate_block(spec, covariates, T)

    holiday = None
    if spec.uses_holiday:
        hol = spec.intervention.holiday_indicator
        if len(hol) < T:
            raise AlignmentError(
                f"holiday indicator covers {len(hol)} weeks but the series has {T}"
            )
        holiday = np.asarray(hol[:T], dtype=float)

    return PathWorkspace(
        spec=spec,
        T=T,
        y=y,
        lgamma_y1=gammaln(y + 1.0),
        lag_block=lag_block,
        cov_block=cov_block,
        dummy=break_dummy(series.start, T, spec.intervention.break_week),
        tt=np.arange(1, T + 1, dtype=float),
        holiday=holiday,
        burnin=effective_burnin,
        f_pre=f_pre,
        ybar=ybar,
        start=series.start,
    )


def logpmf(
    y: np.ndarray,
    mu: np.ndarray,
    distribution: str,
    sigma2: float,
    lgamma_y1: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Pointwise log pmf under Poisson(mu) or NegBin(mu, sigma2)."""
    if lgamma_y1 is None:
        lgamma_y1 = gammaln(np.asarray(y, dtype=float) + 1.0)
    if distribution == "poisson" or sigma2 <= _POISSON_LIMIT:
        return xlogy(y, mu) - mu - lgamma_y1
    r = 1.0 / sigma2
    return (
        gammaln(y + r)
        - gammaln(r)
        - lgamma_y1
        - r * np.log1p(mu / r)
        + xlogy(y, mu / (r + mu))
    )


# ---------------------------------------------------------------------------
# public operations


class MeanPath(NamedTuple):
    nu: np.ndarray
    mu: np.ndarray

    def __len__(self) -> int:
        return len(self.mu)

    def pairs(self) -> list[tuple[float, float]]:
        return list(zip(self.nu.tolist(), self.mu.tolist()))


def conditional_mean_path(
    spec: ModelSpec,
    params: ParameterVector,
    series: WeeklySeries,
    covariates: Optional[CovariateMatrix] = None,
) -> MeanPath:
    """Per-week (nu_t, mu_t) under `spec` / `params` along `series`."""
    validate_params(spec, params)
    ws = build_workspace(spec, series, covariates)
    nu, _, mu = ws.checked_path(coefs_from_params(spec, params))
    return MeanPath(nu=nu, mu=mu)


def log_likelihood(
    spec: ModelSpec,
    params: ParameterVector,
    series: WeeklySeries,
    covariates: Optional[CovariateMatrix] = None,
) -> float:
    """Sum of conditional log pmf values after the burn-in weeks."""
    validate_params(spec, params)
    ws = build_workspace(spec, series, covariates)
    if ws.n_effective <= 0:
        raise DataError(
            f"no effective observations: length {ws.T} minus burn-in {ws.burnin}"
        )
    value = ws.loglik(coefs_from_params(spec, params))
    if not math.isfinite(value):
        raise NumericError(f"log-likelihood is not finite: {value}")
    return value


class StepDistribution:
    """One-step conditional distribution handle: pmf, cdf, integer quantiles."""

    def __init__(self, mu: float, distribution: str, sigma2: float = 0.0):
        if not mu > 0:
            raise DomainError(f"conditional mean must be positive, got {mu}")
        if sigma2 < 0:
            raise DomainError(f"sigma2 must be >= 0, got {sigma2}")
        if distribution not in DISTRIBUTIONS:
            raise SpecError(f"distribution must be one of {DISTRIBUTIONS}")
        self.mu = float(mu)
        self.sigma2 = float(sigma2)
        self.distribution = distribution
        if distribution == "poisson" or sigma2 <= _POISSON_LIMIT:
            self._dist = stats.poisson(self.mu)
        else:
            r = 1.0 / self.sigma2
            self._dist = stats.nbinom(r, r / (r + self.mu))

    def pmf(self, k) -> np.ndarray | float:
        return self._dist.pmf(k)

    def cdf(self, k) -> np.ndarray | float:
        return self._dist.cdf(k)

    def quantile(self, u: float) -> int:
        """Smallest integer k with cdf(k) >= u."""
        if not 0.0 < u < 1.0:
            raise DomainError(f"quantile level must lie in (0, 1), got {u}")
        return int(self._dist.ppf(u))

    def mean(self) -> float:
        return self.mu

    def variance(self) -> float:
        return self.mu + self.sigma2 * self.mu**2

    def sample(self, rng: np.random.Generator, size=None):
        return sample_counts(rng, self.mu, self.distribution, self.sigma2, size)


def one_step_distribution(mu: float, distribution: str, sigma2: float = 0.0) -> StepDistribution:
    return StepDistribution(mu, distribution, sigma2)


def sample_counts(
    rng: np.random.Generator, mu, distribution: str, sigma2: float = 0.0, size=None
):
    """Draw counts with mean mu; NegBin realized as a gamma-Poisson mixture."""
    if distribution == "negbin" and sigma2 > _POISSON_LIMIT:
        r = 1.0 / sigma2
        lam = rng.gamma(shape=r, scale=np.asarray(mu, dtype=float) / r, size=size)
        return rng.poisson(lam)
    return rng.poisson(mu, size=size)


def annualized_trend(eta_time: float) -> float:
    """Multiplicative yearly growth implied by a weekly log-scale trend rate."""
    return math.exp(52.0 * eta_time)


# ---------------------------------------------------------------------------
# simulation


def _skeleton_init(
    spec: ModelSpec, c: Coefs, z_int_mean: float, z_ext_mean: float
) -> tuple[float, float]:
    """Deterministic stationary values (f_init, nu_init) ignoring trend/breaks."""
    sb = float(c.beta.sum())
    sa = float(c.alpha.sum())
    if spec.link == "identity":
        nu = (c.beta0 + z_int_mean + sb * z_ext_mean) / max(
            1.0 - sb - sa, STATIONARITY_MARGIN
        )
        mu = nu + z_ext_mean
        return max(mu, STATIONARITY_MARGIN), nu
    # log link: solve nu = beta0 + z_int + sb*log1p(exp(nu + z_ext)) + sa*nu
    nu = (c.beta0 + z_int_mean) / max(1.0 - sa - sb, 0.05)
    for _ in range(300):
        lin = min(nu + z_ext_mean, 50.0)
        g = math.log1p(math.exp(lin))
        nxt = (c.beta0 + z_int_mean + sb * g) / (1.0 - sa) if sa != 1.0 else nu
        new = 0.5 * nu + 0.5 * nxt
        if abs(new - nu) < 1e-12:
            nu = new
            break
        nu = new
    mu = math.exp(min(nu + z_ext_mean, 50.0))
    return math.log1p(mu), nu


def simulate(
    spec: ModelSpec,
    params: ParameterVector,
    length: int,
    covariates: Optional[CovariateMatrix] = None,
    seed: int | np.random.Generator | None = None,
    start: WeekIndex = WeekIndex(2014, 1),
) -> WeeklySeries:
    """Draw a synthetic series of `length` weeks from the model.

    Pre-sample values are pinned at the deterministic stationary skeleton of
    the recursion, so series without trend or break terms start in (approximate)
    steady state.
    """
    validate_params(spec, params)
    if length <= spec.max_lag:
        raise ConstraintError(
            f"simulation length {length} must exceed the maximum lag {spec.max_lag}"
        )
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    c = coefs_from_params(spec, params)
    T = int(length)

    cov_block = select_covariate_block(spec, covariates, T)
    z = cov_block @ c.eta if cov_block is not None else None
    z_int = z if (z is not None and spec.covariate_effect == "internal") else None

    # Exogenous part of the linear predictor (everything except nu).
    offset = np.zeros(T)
    iv = spec.intervention
    dummy = break_dummy(start, T, iv.break_week)
    if iv.include_level_shift:
        offset += c.delta_beta0 * dummy
    if iv.include_trend:
        rate = c.eta_time + (c.delta_eta_time * dummy if iv.include_slope_change else 0.0)
        offset += rate * np.arange(1, T + 1)
    if spec.uses_holiday:
        hol = iv.holiday_indicator
        if len(hol) < T:
            raise AlignmentError(
                f"holiday indicator covers {len(hol)} weeks but {T} are simulated"
            )
        offset += c.gamma * np.asarray(hol[:T], dtype=float)
    if z is not None and spec.covariate_effect == "external":
        offset += z

    zim = float(z_int.mean()) if z_int is not None else 0.0
    zem = float(z.mean()) if (z is not None and spec.covariate_effect == "external") else 0.0

    if not spec.obs_lags and not spec.mean_lags:
        lin = c.beta0 + offset + (z_int if z_int is not None else 0.0)
        mu = np.exp(lin) if spec.link == "log" else lin
        _check_sim_mu(mu)
        draws = sample_counts(rng, mu, spec.distribution, c.sigma2)
        return WeeklySeries(start, tuple(int(v) for v in np.atleast_1d(draws)))

    f_init, nu_init = _skeleton_init(spec, c, zim, zem)
    max_p = spec.obs_lags[-1] if spec.obs_lags else 0
    max_q = spec.mean_lags[-1] if spec.mean_lags else 0
    fbuf = np.full(max_p + T, f_init)
    nubuf = np.full(max_q + T, nu_init)
    counts = np.empty(T, dtype=np.int64)
    obs_lags = spec.obs_lags
    mean_lags = spec.mean_lags
    beta = c.beta
    alpha = c.alpha
    log_link = spec.link == "log"
    for t in range(T):
        rhs = c.beta0
        for i, k in enumerate(obs_lags):
            rhs += beta[i] * fbuf[max_p + t - k]
        for i, j in enumerate(mean_lags):
            rhs += alpha[i] * nubuf[max_q + t - j]
        if z_int is not None:
            rhs += z_int[t]
        lin = rhs + offset[t]
        mu = math.exp(lin) if log_link else lin
        if not math.isfinite(mu) or mu <= 0:
            raise NumericError(f"invalid conditional mean {mu} at simulated week t={t + 1}")
        yt = int(sample_counts(rng, mu, spec.distribution, c.sigma2))
        counts[t] = yt
        if max_p:
            fbuf[max_p + t] = math.log1p(yt) if log_link else float(yt)
        if max_q:
            nubuf[max_q + t] = rhs
    return WeeklySeries(start, tuple(int(v) for v in counts))


def _check_sim_mu(mu: np.ndarray) -> None:
    mu = np.atleast_1d(mu)
    if not np.all(np.isfinite(mu)):
        t = int(np.argmax(~np.isfinite(mu)))
        raise NumericError(f"non-finite conditional mean at simulated week t={t + 1}")
    if (mu <= 0).any():
        t = int(np.argmax(mu <= 0))
        raise ConstraintError(f"conditional mean {mu[t]:.6g} <= 0 at simulated week t={t + 1}")
