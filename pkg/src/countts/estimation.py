"""Constrained maximum-likelihood estimation, Wald pruning, and fit metrics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np
from scipy import optimize, stats
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammaln

from .errors import ConstraintError, DataError, DiagnosticError, NumericError
from .kernel import (
    STATIONARITY_MARGIN,
    Coefs,
    CovariateMatrix,
    CovariateSelection,
    ModelSpec,
    ParameterVector,
    PathWorkspace,
    build_workspace,
    coefs_from_params,
    validate_params,
)
from .weeks import WeeklySeries

# Parameters never dropped by pruning: intercept, intervention and calendar
# terms, overdispersion.
PROTECTED_LABELS = frozenset(
    {"beta0", "eta_time", "delta_eta_time", "delta_beta0", "gamma", "sigma2"}
)

_MIN_EFFECTIVE = 30
_PENALTY = 1e10
# Linear predictor cap under the log link; counts beyond exp(300) are absurd
# and exp would overflow shortly after.
_LINPRED_CAP = 300.0


@dataclass(frozen=True)
class FitOptions:
    """Optimizer settings; defaults match the estimation protocol."""

    max_iterations: int = 500
    gradient_tolerance: float = 1e-6
    significance_level: float = 0.05
    n_starts: int = 3

    def __post_init__(self) -> None:
        if not 0.0 < self.significance_level < 1.0:
            raise ConstraintError("significance_level must lie in (0, 1)")
        if self.max_iterations < 1 or self.n_starts < 1:
            raise ConstraintError("iteration and start counts must be positive")


@dataclass(frozen=True, eq=False)
class FittedModel:
    """A fitted spec: estimates, uncertainty, likelihood summaries, mean path.

    The fitted series and covariates are retained so that downstream steps
    (pruning, in-sample metrics) need no extra arguments.
    """

    spec: ModelSpec
    params: ParameterVector
    std_errors: Optional[dict[str, float]]
    loglik: float
    n_effective: int
    k_params: int
    bic: float
    fitted_means: np.ndarray
    converged: bool
    iterations: int
    series: WeeklySeries = field(repr=False)
    covariates: Optional[CovariateMatrix] = field(repr=False, default=None)
    message: str = ""

    @property
    def labels(self) -> tuple[str, ...]:
        return ParamLayout(self.spec).labels


class ParamLayout:
    """Canonical flat ordering of a spec's free parameters."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        labels: list[str] = ["beta0"]
        labels += [f"beta[{k}]" for k in spec.obs_lags]
        labels += [f"alpha[{j}]" for j in spec.mean_lags]
        self.cov_names = spec.covariates.names if spec.covariates else ()
        labels += [f"eta[{name}]" for name in self.cov_names]
        iv = spec.intervention
        if iv.include_trend:
            labels.append("eta_time")
        if iv.include_slope_change:
            labels.append("delta_eta_time")
        if iv.include_level_shift:
            labels.append("delta_beta0")
        if spec.uses_holiday:
            labels.append("gamma")
        if spec.distribution == "negbin":
            labels.append("sigma2")
        self.labels: tuple[str, ...] = tuple(labels)
        self.n = len(labels)
        p, q, m = len(spec.obs_lags), len(spec.mean_lags), len(self.cov_names)
        self._sl_beta = slice(1, 1 + p)
        self._sl_alpha = slice(1 + p, 1 + p + q)
        self._sl_eta = slice(1 + p + q, 1 + p + q + m)
        self._idx = {lab: i for i, lab in enumerate(labels)}

    @classmethod
    def for_spec(cls, spec: ModelSpec) -> "ParamLayout":
        return cls(spec)

    def index(self, label: str) -> Optional[int]:
        return self._idx.get(label)

    def pack(self, params: ParameterVector) -> np.ndarray:
        x = np.empty(self.n)
        x[0] = params.beta0
        x[self._sl_beta] = [params.beta[k] for k in self.spec.obs_lags]
        x[self._sl_alpha] = [params.alpha[j] for j in self.spec.mean_lags]
        x[self._sl_eta] = [params.eta[nm] for nm in self.cov_names]
        for lab in ("eta_time", "delta_eta_time", "delta_beta0", "gamma", "sigma2"):
            i = self._idx.get(lab)
            if i is not None:
                x[i] = getattr(params, lab)
        return x

    def unpack(self, x: np.ndarray) -> Coefs:
        def scalar(lab: str) -> float:
            i = self._idx.get(lab)
            return float(x[i]) if i is not None else 0.0

        return Coefs(
            beta0=float(x[0]),
            beta=np.asarray(x[self._sl_beta], dtype=float),
            alpha=np.asarray(x[self._sl_alpha], dtype=float),
            eta=np.asarray(x[self._sl_eta], dtype=float),
            eta_time=scalar("eta_time"),
            delta_eta_time=scalar("delta_eta_time"),
            delta_beta0=scalar("delta_beta0"),
            gamma=scalar("gamma"),
            sigma2=scalar("sigma2"),
        )

    def to_params(self, x: np.ndarray) -> ParameterVector:
        def scalar(lab: str) -> Optional[float]:
            i = self._idx.get(lab)
            return float(x[i]) if i is not None else None

        return ParameterVector(
            beta0=float(x[0]),
            beta={k: float(v) for k, v in zip(self.spec.obs_lags, x[self._sl_beta])},
            alpha={j: float(v) for j, v in zip(self.spec.mean_lags, x[self._sl_alpha])},
            eta={nm: float(v) for nm, v in zip(self.cov_names, x[self._sl_eta])},
            eta_time=scalar("eta_time"),
            delta_eta_time=scalar("delta_eta_time"),
            delta_beta0=scalar("delta_beta0"),
            gamma=scalar("gamma"),
            sigma2=scalar("sigma2"),
        )

    def bounds(self) -> list[tuple[Optional[float], Optional[float]]]:
        lim = 1.0 - STATIONARITY_MARGIN
        out: list[tuple[Optional[float], Optional[float]]] = []
        for lab in self.labels:
            if lab == "beta0":
                out.append((1e-8, None) if self.spec.link == "identity" else (-30.0, 30.0))
            elif lab.startswith("beta[") or lab.startswith("alpha["):
                out.append((0.0, lim) if self.spec.link == "identity" else (-lim, lim))
            elif lab in ("eta_time", "delta_eta_time"):
                # Weekly trend rates; +-0.2/week on the log scale is already
                # a x30000 yearly swing. Identity link left wide.
                out.append((-0.2, 0.2) if self.spec.link == "log" else (None, None))
            elif lab == "sigma2":
                out.append((0.0, 1e4))
            else:
                out.append((None, None))
        return out

    def scales(self, ws: PathWorkspace) -> np.ndarray:
        """Per-coordinate magnitudes mapping optimizer space to true values.

        The trend coordinate multiplies a regressor of size T and covariate
        coordinates multiply columns of arbitrary magnitude; without scaling
        the likelihood is too ill-conditioned for quasi-Newton steps.
        """
        s = np.ones(self.n)
        count_scale = max(ws.ybar, 1.0)
        trend_scale = 1.0 / ws.T
        if self.spec.link == "identity":
            trend_scale *= count_scale
        for i, lab in enumerate(self.labels):
            if lab in ("eta_time", "delta_eta_time"):
                s[i] = trend_scale
            elif lab == "sigma2":
                s[i] = 0.1
            elif lab.startswith("eta[") and ws.cov_block is not None:
                j = list(self.cov_names).index(lab[4:-1])
                col_scale = float(np.std(ws.cov_block[:, j]))
                base = count_scale if self.spec.link == "identity" else 1.0
                s[i] = base / max(col_scale, 1e-6)
            elif self.spec.link == "identity" and lab in ("beta0", "delta_beta0", "gamma"):
                s[i] = count_scale
        return s

    def constraints(self) -> list[dict]:
        p = len(self.spec.obs_lags)
        q = len(self.spec.mean_lags)
        if p + q == 0:
            return []
        sl = slice(1, 1 + p + q)
        lim = 1.0 - STATIONARITY_MARGIN
        if self.spec.link == "identity":
            fun = lambda x: lim - np.sum(x[sl])
        else:
            # Smooth |.| so SLSQP sees usable constraint gradients near zero.
            fun = lambda x: lim - np.sum(np.sqrt(x[sl] ** 2 + 1e-18))
        return [{"type": "ineq", "fun": fun}]

    def project_feasible(self, x: np.ndarray) -> np.ndarray:
        """Clip into bounds and rescale dynamics onto the stationarity region."""
        x = np.array(x, dtype=float)
        for i, (lo, hi) in enumerate(self.bounds()):
            if lo is not None:
                x[i] = max(x[i], lo)
            if hi is not None:
                x[i] = min(x[i], hi)
        p = len(self.spec.obs_lags)
        q = len(self.spec.mean_lags)
        if p + q:
            sl = slice(1, 1 + p + q)
            total = np.abs(x[sl]).sum()
            lim = 1.0 - STATIONARITY_MARGIN - 1e-12
            if total > lim:
                x[sl] *= lim / total
        return x


def bic_value(loglik: float, k_params: int, n_effective: int) -> float:
    return -2.0 * loglik + k_params * math.log(n_effective)


def _sigma2_moment(y: np.ndarray) -> float:
    ybar = y.mean()
    if ybar <= 0:
        return 0.01
    s2 = y.var()
    return float(np.clip((s2 - ybar) / ybar**2, 1e-3, 5.0))


def _starting_points(
    layout: ParamLayout, ws: PathWorkspace, options: FitOptions
) -> list[np.ndarray]:
    spec = layout.spec
    p = len(spec.obs_lags)
    q = len(spec.mean_lags)
    center = ws.f_pre  # sample mean on the recursion scale
    sigma2_0 = _sigma2_moment(ws.y) if spec.distribution == "negbin" else None

    def base(dyn: float) -> np.ndarray:
        x = np.zeros(layout.n)
        total = dyn * (p + q)
        x[layout._sl_beta] = dyn
        x[layout._sl_alpha] = dyn
        x[0] = max(center * (1.0 - total), 0.05 if spec.link == "identity" else center - 2.0)
        if sigma2_0 is not None:
            x[layout._idx["sigma2"]] = sigma2_0
        return x

    dyn = min(0.05, 0.5 / (p + q)) if p + q else 0.0
    starts = [base(dyn)]
    if options.n_starts >= 2:
        starts.append(base(0.0))
    for i in range(max(0, options.n_starts - 2)):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(715517, i)))
        x = base(dyn)
        mix = rng.uniform(0.2, 1.5, size=p + q)
        x[1 : 1 + p + q] *= mix
        x[0] *= rng.uniform(0.7, 1.3)
        i_t = layout._idx.get("eta_time")
        if i_t is not None:
            x[i_t] = rng.normal(0.0, 1e-4)
        i_l = layout._idx.get("delta_beta0")
        if i_l is not None:
            x[i_l] = rng.normal(0.0, 0.05)
        if sigma2_0 is not None:
            x[layout._idx["sigma2"]] = sigma2_0 * rng.uniform(0.5, 2.0)
        starts.append(x)
    return [layout.project_feasible(x) for x in starts]


def _make_objective(layout: ParamLayout, ws: PathWorkspace):
    """Negative log-likelihood with shaped penalties for infeasible regions.

    The likelihood is inlined rather than delegated to kernel.logpmf: the
    optimizer evaluates it thousands of times per fit, so the constant
    lgamma(y+1) term is pre-summed and the gammaln(y+r) array is cached on
    the current overdispersion value (finite-difference loops perturb one
    coordinate at a time, so the cache hits on every non-sigma2 step).
    """
    spec = layout.spec
    y_eff = ws.y[ws.burnin :]
    n_eff = len(y_eff)
    lgam_const = float(np.sum(ws.lgamma_y1[ws.burnin :]))
    scale = max(ws.ybar, 1.0)
    identity = spec.link == "identity"
    negbin = spec.distribution == "negbin"
    i_sigma = layout.index("sigma2")
    cache = {"r": None, "sum_gl": 0.0}

    def nll(x: np.ndarray) -> float:
        c = layout.unpack(x)
        _, lin, mu = ws.path(c)
        if identity:
            mn = mu.min()
            if not math.isfinite(mn) or mn <= 0.0:
                return _PENALTY * (1.0 + max(0.0, -mn) / scale)
        else:
            mx = lin.max()
            if not math.isfinite(mx):
                return _PENALTY * 2.0
            if mx > _LINPRED_CAP:
                return _PENALTY * (1.0 + (mx - _LINPRED_CAP))
        mu_eff = mu[ws.burnin :]
        sigma2 = float(x[i_sigma]) if i_sigma is not None else 0.0
        if negbin and sigma2 > 1e-12:
            r = 1.0 / sigma2
            if cache["r"] != r:
                cache["r"] = r
                cache["sum_gl"] = float(
                    np.sum(gammaln(y_eff + r)) - n_eff * gammaln(r)
                )
            log_rmu = np.log(r + mu_eff)
            log_mu = np.log(mu_eff) if identity else lin[ws.burnin :]
            ll = (
                cache["sum_gl"]
                - lgam_const
                - r * (float(np.sum(log_rmu)) - n_eff * math.log(r))
                + float(y_eff @ (log_mu - log_rmu))
            )
        else:
            log_mu = np.log(mu_eff) if identity else lin[ws.burnin :]
            ll = float(y_eff @ log_mu) - float(np.sum(mu_eff)) - lgam_const
        if not math.isfinite(ll):
            return _PENALTY * 2.0
        return -ll

    return nll


def _central_gradient(fun, x: np.ndarray, bounds) -> np.ndarray:
    n = len(x)
    g = np.empty(n)
    for i in range(n):
        # absolute floor keeps roundoff noise eps*|f|/h well below the
        # stationarity tolerance even at zero-valued coordinates
        h = max(1e-6 * abs(x[i]), 1e-6)
        lo, hi = bounds[i]
        a, b = x[i] - h, x[i] + h
        if lo is not None and a < lo:
            a, b = x[i], x[i] + 2 * h
        if hi is not None and b > hi:
            a, b = x[i] - 2 * h, x[i]
        xa = x.copy()
        xa[i] = a
        xb = x.copy()
        xb[i] = b
        g[i] = (fun(xb) - fun(xa)) / (b - a)
    return g


def _projected_gradient_ok(
    fun, x: np.ndarray, f_at_x: float, bounds, layout: ParamLayout, tol: float
) -> bool:
    """Scaled projected-gradient stationarity check at non-boundary coordinates."""
    g = _central_gradient(fun, x, bounds)
    p = len(layout.spec.obs_lags)
    q = len(layout.spec.mean_lags)
    active_sum = False
    if p + q:
        # beta/alpha coordinates are never rescaled, so this slice is in
        # true units in both spaces.
        total = np.abs(x[1 : 1 + p + q]).sum()
        active_sum = total >= 1.0 - STATIONARITY_MARGIN - 1e-7
    worst = 0.0
    for i in range(len(x)):
        lo, hi = bounds[i]
        at_lo = lo is not None and x[i] - lo < 1e-9
        at_hi = hi is not None and hi - x[i] < 1e-9
        if (at_lo and g[i] > 0) or (at_hi and g[i] < 0):
            continue  # pushing into the bound: stationary
        if active_sum and 1 <= i < 1 + p + q:
            continue  # handled by the simplex constraint
        worst = max(worst, abs(g[i]) * max(abs(x[i]), 1e-2))
    return worst <= tol * max(1.0, abs(f_at_x))


def _fd_hessian(fun, x: np.ndarray, bounds, rel_step: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian; stencils are shifted inward at bounds."""
    n = len(x)
    h = rel_step * np.maximum(np.abs(x), 1e-2)
    offs = np.empty((n, 2))
    for i in range(n):
        lo, hi = bounds[i]
        a, b = -h[i], h[i]
        if lo is not None and x[i] + a < lo:
            a, b = 0.0, 2 * h[i]
        if hi is not None and x[i] + b > hi:
            a, b = -2 * h[i], 0.0
        offs[i] = (a, b)

    def at(shift: dict) -> float:
        xp = x.copy()
        for i, d in shift.items():
            xp[i] += d
        return fun(xp)

    H = np.empty((n, n))
    f0 = fun(x)
    for i in range(n):
        a, b = offs[i]
        mid = 0.5 * (a + b)
        f_mid = f0 if mid == 0.0 else at({i: mid})
        step = 0.5 * (b - a)
        H[i, i] = (at({i: b}) - 2 * f_mid + at({i: a})) / step**2
    for i in range(n):
        ai, bi = offs[i]
        for j in range(i + 1, n):
            aj, bj = offs[j]
            v = (
                at({i: bi, j: bj})
                - at({i: bi, j: aj})
                - at({i: ai, j: bj})
                + at({i: ai, j: aj})
            ) / ((bi - ai) * (bj - aj))
            H[i, j] = H[j, i] = v
    return H


def _observed_information(nll, x: np.ndarray, bounds) -> Optional[np.ndarray]:
    """FD Hessian of the negative log-likelihood, or None if unusable."""
    try:
        H = _fd_hessian(nll, x, bounds)
    except FloatingPointError:
        return None
    if not np.all(np.isfinite(H)):
        return None
    return H


def _se_from_information(H: np.ndarray) -> Optional[np.ndarray]:
    try:
        factor = cho_factor(H)
        cov = cho_solve(factor, np.eye(len(H)))
    except (np.linalg.LinAlgError, ValueError):
        return None
    diag = np.diag(cov)
    if np.any(~np.isfinite(diag)) or np.any(diag <= 0):
        return None
    return np.sqrt(diag)


def _free_coordinates(x: np.ndarray, g: np.ndarray, bounds) -> list[int]:
    """Coordinates not pinned by an active bound with inward gradient."""
    free = []
    for i, (lo, hi) in enumerate(bounds):
        at_lo = lo is not None and x[i] - lo < 1e-9
        at_hi = hi is not None and hi - x[i] < 1e-9
        if (at_lo and g[i] > 0) or (at_hi and g[i] < 0):
            continue
        free.append(i)
    return free


def fit(
    spec: ModelSpec,
    series: WeeklySeries,
    covariates: Optional[CovariateMatrix] = None,
    options: FitOptions = FitOptions(),
    warm_start: Optional[ParameterVector] = None,
    burnin: Optional[int] = None,
) -> FittedModel:
    """Constrained MLE of `spec` on `series` with deterministic multi-start.

    Non-convergence is reported through the `converged` flag, not an
    exception; only structurally unusable inputs raise. `burnin` widens the
    excluded prefix beyond the spec's maximum lag (portfolio search passes a
    common value so BICs share one effective sample).
    """
    ws = build_workspace(spec, series, covariates, burnin=burnin)
    if ws.n_effective < _MIN_EFFECTIVE:
        raise DataError(
            f"need at least {_MIN_EFFECTIVE} post burn-in observations, "
            f"got {ws.n_effective}"
        )
    layout = ParamLayout(spec)
    scale = layout.scales(ws)
    nll_true = _make_objective(layout, ws)

    def nll(xs: np.ndarray) -> float:
        return nll_true(xs * scale)

    bounds = [
        (
            lo / s if lo is not None else None,
            hi / s if hi is not None else None,
        )
        for (lo, hi), s in zip(layout.bounds(), scale)
    ]
    # beta/alpha coordinates keep unit scale, so the stationarity constraint
    # reads identically in optimizer space.
    constraints = layout.constraints()

    starts = _starting_points(layout, ws, options)
    if warm_start is not None:
        validate_params(spec, warm_start)
        starts.append(layout.project_feasible(layout.pack(warm_start)))
    starts = [x0 / scale for x0 in starts]

    def run_slsqp(xs0: np.ndarray, maxiter: int, ftol: float):
        f0 = nll(xs0)
        try:
            with warnings.catch_warnings():
                # SLSQP emits a RuntimeWarning when it clips a step to the
                # bounds; routine here, not actionable.
                warnings.simplefilter("ignore", RuntimeWarning)
                res = optimize.minimize(
                    nll,
                    xs0,
                    method="SLSQP",
                    bounds=bounds,
                    constraints=constraints,
                    options={"maxiter": maxiter, "ftol": ftol},
                )
            msg = str(res.message) if (res.message and not res.success) else ""
            if not math.isfinite(res.fun) or res.fun > f0:
                return xs0, f0, 0, msg  # never worsen a start
            return np.asarray(res.x, dtype=float), float(res.fun), int(res.nit), msg
        except (ValueError, FloatingPointError) as exc:  # optimizer blew up
            return xs0, f0, 0, str(exc)

    # Cheap screening pass over all starts, then a full-budget continuation
    # of the winning basin.
    screen_iter = min(80, options.max_iterations)
    screen_ftol = max(1e-4, options.gradient_tolerance)
    best_xs: Optional[np.ndarray] = None
    best_f = math.inf
    best_nit = 0
    message = ""
    for xs0 in starts:
        cand_x, cand_f, nit, msg = run_slsqp(xs0, screen_iter, screen_ftol)
        if msg:
            message = msg
        if cand_f < best_f:
            best_xs, best_f, best_nit = cand_x, cand_f, nit
    assert best_xs is not None
    cand_x, cand_f, nit, msg = run_slsqp(
        best_xs, options.max_iterations, options.gradient_tolerance
    )
    if msg:
        message = msg
    if cand_f < best_f:
        best_xs, best_f = cand_x, cand_f
        best_nit += nit

    def project(xs: np.ndarray) -> np.ndarray:
        return layout.project_feasible(xs * scale) / scale

    xs_hat = project(best_xs)
    f_hat = nll(xs_hat)
    if f_hat > best_f:  # projection should be a no-op; keep the better value
        xs_hat, f_hat = best_xs, best_f

    feasible = f_hat < _PENALTY
    H = _observed_information(nll, xs_hat, bounds) if feasible else None
    if H is not None:
        # Newton polish on the bound-free coordinates: SLSQP stops on
        # f-change, often leaving a visible gradient at interior coordinates.
        moved = 0.0
        for _ in range(4):
            g = _central_gradient(nll, xs_hat, bounds)
            free = _free_coordinates(xs_hat, g, bounds)
            if not free:
                break
            sub = np.ix_(free, free)
            try:
                step_free = cho_solve(cho_factor(H[sub]), g[free])
            except (np.linalg.LinAlgError, ValueError):
                break
            step = np.zeros(layout.n)
            step[free] = step_free
            accepted = False
            for damp in (1.0, 0.5, 0.25):
                trial = project(xs_hat - damp * step)
                f_trial = nll(trial)
                if math.isfinite(f_trial) and f_trial < f_hat - 1e-12:
                    moved = max(moved, float(np.max(np.abs(trial - xs_hat))))
                    xs_hat, f_hat = trial, f_trial
                    accepted = True
                    break
            if not accepted:
                break
        if moved > 1e-2:  # curvature information is stale after a large move
            H = _observed_information(nll, xs_hat, bounds) if feasible else None

    grad_ok = feasible and _projected_gradient_ok(
        nll, xs_hat, f_hat, bounds, layout, options.gradient_tolerance
    )
    std_errors = None
    if H is not None:
        se = _se_from_information(H)
        if se is not None:
            std_errors = {
                lab: float(v * s) for lab, v, s in zip(layout.labels, se, scale)
            }
    converged = bool(feasible and grad_ok and std_errors is not None)

    x_hat = xs_hat * scale
    params = layout.to_params(x_hat)
    if feasible:
        coefs = layout.unpack(x_hat)
        _, _, mu = ws.path(coefs)
        loglik = -f_hat
    else:
        mu = np.full(ws.T, np.nan)
        loglik = -math.inf
    return FittedModel(
        spec=spec,
        params=params,
        std_errors=std_errors,
        loglik=loglik,
        n_effective=ws.n_effective,
        k_params=layout.n,
        bic=bic_value(loglik, layout.n, ws.n_effective),
        fitted_means=mu,
        converged=converged,
        iterations=best_nit,
        series=series,
        covariates=covariates,
        message=message,
    )


class WaldFlag(NamedTuple):
    estimate: float
    std_error: float
    z: float
    significant: bool
    protected: bool


def wald_flags(model: FittedModel, level: float = 0.05) -> dict[str, WaldFlag]:
    """Two-sided Wald significance per parameter; intervention terms protected."""
    if model.std_errors is None:
        raise DiagnosticError("model has no standard errors; cannot run Wald tests")
    z_crit = stats.norm.ppf(1.0 - level / 2.0)
    layout = ParamLayout(model.spec)
    x = layout.pack(model.params)
    out: dict[str, WaldFlag] = {}
    for i, lab in enumerate(layout.labels):
        se = model.std_errors[lab]
        z = x[i] / se if se > 0 else 0.0
        out[lab] = WaldFlag(
            estimate=float(x[i]),
            std_error=float(se),
            z=float(z),
            significant=bool(abs(z) > z_crit),
            protected=lab in PROTECTED_LABELS,
        )
    return out


def prune_and_refit(model: FittedModel, options: FitOptions = FitOptions()) -> FittedModel:
    """Drop non-significant lag and covariate terms, then re-estimate once."""
    if not model.converged:
        raise DiagnosticError("refusing to prune a non-converged fit")
    flags = wald_flags(model, options.significance_level)
    spec = model.spec
    keep_obs = tuple(k for k in spec.obs_lags if flags[f"beta[{k}]"].significant)
    keep_mean = tuple(j for j in spec.mean_lags if flags[f"alpha[{j}]"].significant)
    if not keep_obs:
        keep_mean = ()  # mean feedback without observation feedback is degenerate
    keep_cov = tuple(
        nm
        for nm in (spec.covariates.names if spec.covariates else ())
        if flags[f"eta[{nm}]"].significant
    )
    if (
        keep_obs == spec.obs_lags
        and keep_mean == spec.mean_lags
        and keep_cov == (spec.covariates.names if spec.covariates else ())
    ):
        return model

    new_cov = None
    if keep_cov and spec.covariates is not None:
        new_cov = CovariateSelection(
            names=keep_cov, lag=spec.covariates.lag, transform=spec.covariates.transform
        )
    new_spec = replace(
        spec, obs_lags=keep_obs, mean_lags=keep_mean, covariates=new_cov
    )
    old = model.params
    warm = ParameterVector(
        beta0=old.beta0,
        beta={k: old.beta[k] for k in keep_obs},
        alpha={j: old.alpha[j] for j in keep_mean},
        eta={nm: old.eta[nm] for nm in keep_cov},
        eta_time=old.eta_time,
        delta_eta_time=old.delta_eta_time,
        delta_beta0=old.delta_beta0,
        gamma=old.gamma,
        sigma2=old.sigma2,
    )
    return fit(
        new_spec,
        model.series,
        model.covariates if new_spec.covariates is not None else model.covariates,
        options,
        warm_start=warm,
    )


class InSampleMetrics(NamedTuple):
    rmse: float
    coverage: float
    mean_count: float
    rmse_over_mean: float


def interval_bounds(
    mu: np.ndarray, distribution: str, sigma2: float, level: float = 0.95
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized equal-tail interval bounds of the one-step distribution."""
    a = (1.0 - level) / 2.0
    if distribution == "negbin" and sigma2 > 1e-12:
        r = 1.0 / sigma2
        p = r / (r + mu)
        return stats.nbinom.ppf(a, r, p), stats.nbinom.ppf(1.0 - a, r, p)
    return stats.poisson.ppf(a, mu), stats.poisson.ppf(1.0 - a, mu)


def in_sample_metrics(
    model: FittedModel, series: Optional[WeeklySeries] = None, level: float = 0.95
) -> InSampleMetrics:
    """RMSE and one-step interval coverage over the effective sample."""
    series = series if series is not None else model.series
    if len(series) != len(model.fitted_means):
        raise DataError(
            f"series length {len(series)} does not match the fitted path "
            f"{len(model.fitted_means)}"
        )
    burnin = len(series) - model.n_effective
    y = series.values()[burnin:]
    mu = model.fitted_means[burnin:]
    rmse = float(np.sqrt(np.mean((y - mu) ** 2)))
    sigma2 = model.params.sigma2 or 0.0
    lo, hi = interval_bounds(mu, model.spec.distribution, sigma2, level)
    coverage = float(np.mean((y >= lo) & (y <= hi)))
    mean_count = float(y.mean())
    return InSampleMetrics(
        rmse=rmse,
        coverage=coverage,
        mean_count=mean_count,
        rmse_over_mean=rmse / mean_count if mean_count > 0 else math.inf,
    )
