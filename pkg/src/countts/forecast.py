"""h-step predictive distributions and expanding-window forecast evaluation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConstraintError, CovariateHorizonError, DataError, NumericError, SpecError
from .estimation import FitOptions, FittedModel, fit
from .kernel import (
    CovariateMatrix,
    ModelSpec,
    ParameterVector,
    StepDistribution,
    break_dummy,
    build_workspace,
    coefs_from_params,
    sample_counts,
    select_covariate_block,
    transform_obs,
)
from .weeks import WeekIndex, WeeklySeries

log = logging.getLogger(__name__)

_MIN_PATHS_WITHOUT_WARNING = 1000


@dataclass(frozen=True)
class ForecastResult:
    """Point forecast and equal-tail predictive interval for one horizon."""

    horizon: int
    point: float
    interval: tuple[int, int]
    level: float = 0.95
    n_paths: int = 0  # 0 marks the analytic one-step case
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        lo, hi = self.interval
        if not (0 <= lo <= hi):
            raise ConstraintError(f"invalid interval {self.interval}")
        if not 0.0 < self.level < 1.0:
            raise ConstraintError(f"level must lie in (0, 1), got {self.level}")


def _future_offsets(
    spec: ModelSpec,
    params: ParameterVector,
    start: WeekIndex,
    T: int,
    h: int,
) -> np.ndarray:
    """Exogenous intervention/trend/holiday offsets for weeks T+1 .. T+h."""
    iv = spec.intervention
    total = T + h
    dummy = break_dummy(start, total, iv.break_week)[T:]
    offset = np.zeros(h)
    if iv.include_level_shift:
        offset += params.delta_beta0 * dummy
    if iv.include_trend:
        rate = params.eta_time + (
            params.delta_eta_time * dummy if iv.include_slope_change else 0.0
        )
        offset += rate * np.arange(T + 1, total + 1, dtype=float)
    if iv.holiday_indicator is not None:
        hol = iv.holiday_indicator
        if len(hol) < total:
            raise CovariateHorizonError(
                f"holiday indicator covers {len(hol)} weeks; forecasting week "
                f"{total} requires {total}"
            )
        offset += params.gamma * np.asarray(hol[T:total], dtype=float)
    return offset


def _future_covariate_terms(
    spec: ModelSpec,
    params: ParameterVector,
    covariates: Optional[CovariateMatrix],
    T: int,
    h: int,
) -> tuple[np.ndarray, np.ndarray]:
    """(internal, external) covariate contributions for weeks T+1 .. T+h."""
    zeros = np.zeros(h)
    if spec.covariates is None:
        return zeros, zeros
    sel = spec.covariates
    available = len(covariates) if covariates is not None else 0
    needed = T + h - sel.lag
    if covariates is None or available < max(T, needed):
        raise CovariateHorizonError(
            f"forecasting {h} weeks ahead with covariate lag {sel.lag} requires "
            f"{max(T, needed)} covariate rows, got {available}; future covariate "
            "values must be supplied, never extrapolated"
        )
    block = select_covariate_block(spec, covariates, T + h, mean_window=T)
    term = block[T:] @ np.array([params.eta[n] for n in sel.names])
    if spec.covariate_effect == "internal":
        return term, zeros
    return zeros, term


def forecast(
    model: FittedModel,
    history: Optional[WeeklySeries] = None,
    covariates: Optional[CovariateMatrix] = None,
    h: int = 1,
    n_paths: int = 10_000,
    seed: int | np.random.Generator | None = None,
    level: float = 0.95,
) -> ForecastResult:
    """Forecast `h` weeks past the end of `history`.

    h = 1 evaluates the exact conditional distribution. Longer horizons
    simulate `n_paths` trajectories, feeding sampled counts back into the
    recursion; the interval takes empirical a/(1-a) quantiles of the endpoint
    counts and the point forecast is the predictive mean.
    """
    if h < 1:
        raise SpecError(f"horizon must be >= 1, got {h}")
    history = history if history is not None else model.series
    covariates = covariates if covariates is not None else model.covariates
    spec = model.spec
    params = model.params
    c = coefs_from_params(spec, params)
    T = len(history)
    a = (1.0 - level) / 2.0

    ws = build_workspace(spec, history, covariates)
    nu_path, _, _ = ws.checked_path(c)
    offsets = _future_offsets(spec, params, history.start, T, h)
    z_int, z_ext = _future_covariate_terms(spec, params, covariates, T, h)

    max_p = spec.obs_lags[-1] if spec.obs_lags else 0
    max_q = spec.mean_lags[-1] if spec.mean_lags else 0
    f_y = transform_obs(history.values(), spec.link)
    log_link = spec.link == "log"
    sigma2 = params.sigma2 or 0.0

    def check_mu(mu, step):
        bad = ~np.isfinite(np.atleast_1d(mu))
        if bad.any():
            raise NumericError(f"non-finite forecast mean at step {step}")
        if np.any(np.atleast_1d(mu) <= 0):
            raise ConstraintError(f"non-positive forecast mean at step {step}")

    if h == 1:
        rhs = c.beta0 + z_int[0]
        for i, k in enumerate(spec.obs_lags):
            rhs += c.beta[i] * (f_y[T - k] if T - k >= 0 else ws.f_pre)
        for i, j in enumerate(spec.mean_lags):
            rhs += c.alpha[i] * (nu_path[T - j] if T - j >= 0 else c.beta0)
        lin = rhs + offsets[0] + z_ext[0]
        mu = math.exp(lin) if log_link else lin
        check_mu(mu, 1)
        dist = StepDistribution(mu, spec.distribution, sigma2)
        return ForecastResult(
            horizon=1,
            point=float(mu),
            interval=(dist.quantile(a), dist.quantile(1.0 - a)),
            level=level,
            n_paths=0,
        )

    warnings_out: tuple[str, ...] = ()
    if n_paths < _MIN_PATHS_WITHOUT_WARNING:
        warnings_out = (
            f"n_paths={n_paths} is below {_MIN_PATHS_WITHOUT_WARNING}; "
            "interval quantiles will be noisy",
        )
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    # per-path transformed-observation and nu buffers seeded from history
    f_buf = np.empty((n_paths, max_p + h)) if max_p else None
    if f_buf is not None:
        tail = np.concatenate((np.full(max(0, max_p - T), ws.f_pre), f_y[-max_p:]))
        f_buf[:, :max_p] = tail[-max_p:]
    nu_buf = np.empty((n_paths, max_q + h)) if max_q else None
    if nu_buf is not None:
        tail = np.concatenate((np.full(max(0, max_q - T), c.beta0), nu_path[-max_q:]))
        nu_buf[:, :max_q] = tail[-max_q:]

    mu_final = None
    endpoint = None
    for step in range(1, h + 1):
        rhs = np.full(n_paths, c.beta0 + z_int[step - 1])
        for i, k in enumerate(spec.obs_lags):
            rhs += c.beta[i] * f_buf[:, max_p + step - 1 - k]
        for i, j in enumerate(spec.mean_lags):
            rhs += c.alpha[i] * nu_buf[:, max_q + step - 1 - j]
        lin = rhs + (offsets[step - 1] + z_ext[step - 1])
        mu = np.exp(lin) if log_link else lin
        check_mu(mu, step)
        draws = sample_counts(rng, mu, spec.distribution, sigma2)
        if nu_buf is not None:
            nu_buf[:, max_q + step - 1] = rhs
        if f_buf is not None:
            f_buf[:, max_p + step - 1] = np.log1p(draws) if log_link else draws
        if step == h:
            mu_final = mu
            endpoint = draws
    lo = int(np.quantile(endpoint, a, method="inverted_cdf"))
    hi = int(np.quantile(endpoint, 1.0 - a, method="inverted_cdf"))
    return ForecastResult(
        horizon=h,
        point=float(np.mean(mu_final)),
        interval=(lo, hi),
        level=level,
        n_paths=n_paths,
        warnings=warnings_out,
    )


@dataclass(frozen=True)
class HorizonScore:
    horizon: int
    rmse: float
    coverage: float
    n_test_weeks: int
    n_missing: int


@dataclass(frozen=True)
class EvaluationReport:
    horizons: tuple[HorizonScore, ...]
    first_test_week: WeekIndex
    last_test_week: WeekIndex
    level: float
    n_paths: int


FitFn = Callable[..., FittedModel]
ForecastFn = Callable[..., ForecastResult]


def _slice_covariates(
    covariates: Optional[CovariateMatrix], rows: int
) -> Optional[CovariateMatrix]:
    if covariates is None or len(covariates) <= rows:
        return covariates
    return CovariateMatrix(
        names=covariates.names,
        values=covariates.values[:rows],
        lag=covariates.lag,
        transform=covariates.transform,
    )


def _evaluate_horizon(
    spec: ModelSpec,
    series: WeeklySeries,
    covariates: Optional[CovariateMatrix],
    h: int,
    test_weeks: Sequence[int],
    fit_options: FitOptions,
    n_paths: int,
    seed: int,
    level: float,
    fit_fn: Optional[FitFn],
    forecast_fn: Optional[ForecastFn],
) -> tuple[int, list[tuple[float, bool]], int]:
    """Score one horizon across all test weeks; returns (h, scores, n_missing)."""
    do_fit = fit_fn or fit
    do_forecast = forecast_fn or forecast
    y = series.values()
    scores: list[tuple[float, bool]] = []
    n_missing = 0
    warm: Optional[ParameterVector] = None
    for t in test_weeks:  # t is the 1-based index of the scored week
        window = series.head(t - h)
        cov_cell = _slice_covariates(covariates, t)
        cell_rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, t, h)))
        try:
            m = do_fit(spec, window, cov_cell, fit_options, warm_start=warm)
        except (DataError, ConstraintError, NumericError) as exc:
            log.debug("event=window_fit_failed t=%d h=%d error=%s", t, h, exc)
            n_missing += 1
            continue
        if not m.converged:
            n_missing += 1
            continue
        warm = m.params
        fc = do_forecast(m, window, cov_cell, h, n_paths, cell_rng, level)
        err = float(y[t - 1] - fc.point)
        inside = fc.interval[0] <= y[t - 1] <= fc.interval[1]
        scores.append((err, inside))
        log.debug(
            "event=window_scored t=%d h=%d point=%.3f lo=%d hi=%d y=%d",
            t,
            h,
            fc.point,
            fc.interval[0],
            fc.interval[1],
            int(y[t - 1]),
        )
    return h, scores, n_missing


def expanding_window_eval(
    spec: ModelSpec,
    series: WeeklySeries,
    covariates: Optional[CovariateMatrix] = None,
    horizons: Sequence[int] = (4, 8, 12),
    n_test_weeks: int = 12,
    fit_options: FitOptions = FitOptions(),
    n_paths: int = 10_000,
    seed: int = 0,
    level: float = 0.95,
    workers: int = 1,
    fit_fn: Optional[FitFn] = None,
    forecast_fn: Optional[ForecastFn] = None,
) -> EvaluationReport:
    """Expanding-window out-of-sample evaluation of a frozen spec.

    For each horizon h and each of the final `n_test_weeks` weeks t, the
    spec's parameters are re-estimated on weeks 1..t-h and the h-step
    forecast is scored against the held-out count. Every (t, h) cell draws
    from its own derived seed, so results do not depend on scheduling.
    `fit_fn` / `forecast_fn` are test seams replacing the real estimator and
    forecaster.
    """
    horizons = tuple(int(h) for h in horizons)
    if not horizons or any(h < 1 for h in horizons):
        raise SpecError(f"horizons must be positive, got {horizons}")
    if n_test_weeks < 1:
        raise SpecError("n_test_weeks must be positive")
    T = len(series)
    max_h = max(horizons)
    first_t = T - n_test_weeks + 1
    smallest_window = first_t - max_h
    if smallest_window < spec.max_lag + 30:
        raise DataError(
            f"series too short: smallest training window has {smallest_window} weeks, "
            f"need at least {spec.max_lag + 30}"
        )
    test_weeks = list(range(first_t, T + 1))

    args = [
        (
            spec,
            series,
            covariates,
            h,
            test_weeks,
            fit_options,
            n_paths,
            seed,
            level,
            fit_fn,
            forecast_fn,
        )
        for h in horizons
    ]
    use_pool = workers > 1 and len(horizons) > 1 and fit_fn is None and forecast_fn is None
    if use_pool:
        with ProcessPoolExecutor(max_workers=min(workers, len(horizons))) as pool:
            results = list(pool.map(_evaluate_horizon_star, args))
    else:
        results = [_evaluate_horizon(*a) for a in args]

    by_h = {h: (scores, miss) for h, scores, miss in results}
    rows = []
    for h in horizons:
        scores, miss = by_h[h]
        if scores:
            errs = np.array([s[0] for s in scores])
            rmse = float(np.sqrt(np.mean(errs**2)))
            coverage = float(np.mean([s[1] for s in scores]))
        else:
            rmse = math.nan
            coverage = math.nan
        rows.append(
            HorizonScore(
                horizon=h,
                rmse=rmse,
                coverage=coverage,
                n_test_weeks=len(scores),
                n_missing=miss,
            )
        )
    return EvaluationReport(
        horizons=tuple(rows),
        first_test_week=series.week_at(first_t - 1),
        last_test_week=series.week_at(T - 1),
        level=level,
        n_paths=n_paths,
    )


def _evaluate_horizon_star(args):
    return _evaluate_horizon(*args)
