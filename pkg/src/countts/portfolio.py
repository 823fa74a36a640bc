"""Candidate portfolio enumeration and BIC-ranked parallel model search."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import AlignmentError, CountTsError, SearchError, SpecError
from .estimation import FitOptions, FittedModel, fit, prune_and_refit
from .kernel import (
    DISTRIBUTIONS,
    EFFECTS,
    LINKS,
    MAX_LAG,
    TRANSFORMS,
    CovariateMatrix,
    CovariateSelection,
    InterventionConfig,
    ModelSpec,
)
from .weeks import WeekIndex, WeeklySeries

log = logging.getLogger(__name__)

# Candidate drivers of transplant activity used in the national analysis.
DEFAULT_COVARIATE_POOL = (
    "all_cause_deaths",
    "expected_all_cause_deaths",
    "covid_cases",
    "covid_deaths",
    "non_covid_deaths",
)


@dataclass(frozen=True)
class SearchConfig:
    """Portfolio definition: which model dimensions to cross."""

    distributions: tuple[str, ...] = DISTRIBUTIONS
    links: tuple[str, ...] = LINKS
    p_range: tuple[int, int] = (0, MAX_LAG)
    q_range: tuple[int, int] = (0, MAX_LAG)
    covariate_pool: tuple[str, ...] = DEFAULT_COVARIATE_POOL
    covariate_lags: tuple[int, int] = (0, MAX_LAG)
    covariate_effects: tuple[str, ...] = EFFECTS
    covariate_transforms: tuple[str, ...] = TRANSFORMS
    include_no_covariate_case: bool = True
    slope_change_options: tuple[bool, ...] = (False, True)
    break_week: WeekIndex = WeekIndex(2020, 1)
    fit_options: FitOptions = field(default_factory=FitOptions)

    def __post_init__(self) -> None:
        for sel, allowed, label in (
            (self.distributions, DISTRIBUTIONS, "distributions"),
            (self.links, LINKS, "links"),
            (self.covariate_effects, EFFECTS, "covariate_effects"),
            (self.covariate_transforms, TRANSFORMS, "covariate_transforms"),
        ):
            if not sel:
                raise SpecError(f"{label} must be a nonempty selection")
            if any(v not in allowed for v in sel) or len(set(sel)) != len(sel):
                raise SpecError(f"{label} must be distinct values from {allowed}, got {sel}")
        for rng, label in (
            (self.p_range, "p_range"),
            (self.q_range, "q_range"),
            (self.covariate_lags, "covariate_lags"),
        ):
            lo, hi = rng
            if not (0 <= lo <= hi <= MAX_LAG):
                raise SpecError(f"{label} must satisfy 0 <= lo <= hi <= {MAX_LAG}, got {rng}")
        if not self.slope_change_options or len(set(self.slope_change_options)) != len(
            self.slope_change_options
        ):
            raise SpecError("slope_change_options must be a nonempty distinct selection")
        if not self.covariate_pool and not self.include_no_covariate_case:
            raise SpecError("an empty covariate pool requires the no-covariate case")


def pq_pairs(p_range: tuple[int, int], q_range: tuple[int, int]) -> list[tuple[int, int]]:
    """All (p, q) lag-order pairs, excluding mean feedback without observation
    feedback (p = 0 with q >= 1); the default ranges yield 73 pairs."""
    return [
        (p, q)
        for p in range(p_range[0], p_range[1] + 1)
        for q in range(q_range[0], q_range[1] + 1)
        if not (p == 0 and q >= 1)
    ]


def _covariate_block(
    config: SearchConfig,
) -> list[tuple[Optional[CovariateSelection], Optional[str]]]:
    """(selection, covariate name) pairs in itemization order.

    Settings iterate lag, then effect, then transform, with the no-covariate
    setting last. The no-covariate setting is repeated once per pool entry,
    matching how the published portfolio count multiplies 37 settings by 5
    covariate choices.
    """
    if not config.covariate_pool:
        return [(None, None)]
    block: list[tuple[Optional[CovariateSelection], Optional[str]]] = []
    settings: list[Optional[tuple[int, str, str]]] = [
        (s, eff, tr)
        for s in range(config.covariate_lags[0], config.covariate_lags[1] + 1)
        for eff in config.covariate_effects
        for tr in config.covariate_transforms
    ]
    if config.include_no_covariate_case:
        settings.append(None)
    for setting in settings:
        for name in config.covariate_pool:
            if setting is None:
                block.append((None, None))
            else:
                s, eff, tr = setting
                block.append(
                    (CovariateSelection(names=(name,), lag=s, transform=tr), eff)
                )
    return block


def enumerate_candidates(config: SearchConfig) -> list[ModelSpec]:
    """The full candidate list in deterministic itemization order:
    distribution, (p, q), link, covariate setting, slope-change option."""
    interventions = {
        slope: InterventionConfig(
            break_week=config.break_week,
            include_level_shift=True,
            include_trend=True,
            include_slope_change=slope,
        )
        for slope in config.slope_change_options
    }
    pairs = pq_pairs(config.p_range, config.q_range)
    lag_tuples = {n: tuple(range(1, n + 1)) for n in range(MAX_LAG + 1)}
    cov_block = _covariate_block(config)
    out: list[ModelSpec] = []
    for dist in config.distributions:
        for p, q in pairs:
            for link in config.links:
                for selection, effect in cov_block:
                    for slope in config.slope_change_options:
                        out.append(
                            ModelSpec(
                                distribution=dist,
                                link=link,
                                obs_lags=lag_tuples[p],
                                mean_lags=lag_tuples[q],
                                covariates=selection,
                                covariate_effect=effect or "external",
                                intervention=interventions[slope],
                            )
                        )
    return out


class RankEntry(NamedTuple):
    index: int  # position in the enumeration
    spec: ModelSpec
    bic: float
    converged: bool
    k_params: int
    error: Optional[str]


@dataclass(frozen=True, eq=False)
class SearchResult:
    ranked: tuple[RankEntry, ...]
    best_pruned: FittedModel
    best_index: int
    n_candidates: int
    n_failed: int


class _FitSummary(NamedTuple):
    index: int
    bic: float
    converged: bool
    loglik: float
    k_params: int
    error: Optional[str]


_WORKER_DATA: dict = {}


def _init_worker(series, covariates, fit_options, burnin) -> None:
    _WORKER_DATA["series"] = series
    _WORKER_DATA["covariates"] = covariates
    _WORKER_DATA["fit_options"] = fit_options
    _WORKER_DATA["burnin"] = burnin


def _fit_candidate(task: tuple[int, ModelSpec]) -> _FitSummary:
    index, spec = task
    try:
        m = fit(
            spec,
            _WORKER_DATA["series"],
            _WORKER_DATA["covariates"],
            _WORKER_DATA["fit_options"],
            burnin=_WORKER_DATA["burnin"],
        )
        return _FitSummary(
            index=index,
            bic=m.bic,
            converged=m.converged,
            loglik=m.loglik,
            k_params=m.k_params,
            error=None,
        )
    except CountTsError as exc:
        return _FitSummary(
            index=index,
            bic=math.nan,
            converged=False,
            loglik=math.nan,
            k_params=0,
            error=f"{type(exc).__name__}: {exc}",
        )


def _validate_search_inputs(
    series: WeeklySeries,
    covariates: Optional[CovariateMatrix],
    config: SearchConfig,
    holiday: Optional[Sequence[int]],
) -> None:
    if config.covariate_pool:
        if covariates is None:
            raise AlignmentError(
                f"portfolio uses covariates {config.covariate_pool} but none were supplied"
            )
        missing = [n for n in config.covariate_pool if n not in covariates.names]
        if missing:
            raise AlignmentError(f"covariate columns missing from data: {missing}")
        if len(covariates) < len(series):
            raise AlignmentError(
                f"covariates cover {len(covariates)} weeks, series has {len(series)}"
            )
    if holiday is not None and len(holiday) < len(series):
        raise AlignmentError(
            f"holiday indicator covers {len(holiday)} weeks, series has {len(series)}"
        )


def search(
    series: WeeklySeries,
    covariates: Optional[CovariateMatrix],
    config: SearchConfig,
    holiday: Optional[Sequence[int]] = None,
    workers: int = 1,
) -> SearchResult:
    """Fit the whole portfolio, rank by BIC, and prune the winner.

    The ranked list is a pure function of (data, config); worker count only
    affects wall time. Ties break toward fewer parameters, then enumeration
    order.
    """
    _validate_search_inputs(series, covariates, config, holiday)
    specs = enumerate_candidates(config)
    if holiday is not None:
        hol = tuple(int(v) for v in holiday)
        specs = [
            replace(s, intervention=replace(s.intervention, holiday_indicator=hol))
            for s in specs
        ]
    tasks = list(enumerate(specs))
    # BIC comparisons must share one effective sample, so every candidate is
    # fitted with the portfolio-wide maximum lag as burn-in.
    common_burnin = max(config.p_range[1], config.q_range[1])
    log.info(
        "event=search_start candidates=%d workers=%d burnin=%d",
        len(specs),
        workers,
        common_burnin,
    )

    if workers <= 1:
        _init_worker(series, covariates, config.fit_options, common_burnin)
        summaries = [_fit_candidate(t) for t in tasks]
    else:
        chunk = max(1, len(tasks) // (workers * 8))
        with ProcessPoolExecutor(
            max_workers=workers,
            initializer=_init_worker,
            initargs=(series, covariates, config.fit_options, common_burnin),
        ) as pool:
            summaries = list(pool.map(_fit_candidate, tasks, chunksize=chunk))
    summaries.sort(key=lambda s: s.index)
    for s in summaries:
        log.debug(
            "event=candidate_fit index=%d bic=%s converged=%s error=%s",
            s.index,
            f"{s.bic:.4f}" if math.isfinite(s.bic) else "nan",
            s.converged,
            s.error,
        )

    def rank_key(s: _FitSummary):
        usable = math.isfinite(s.bic)
        return (not usable, s.bic if usable else 0.0, s.k_params, s.index)

    ordered = sorted(summaries, key=rank_key)
    ranked = tuple(
        RankEntry(
            index=s.index,
            spec=specs[s.index],
            bic=s.bic,
            converged=s.converged,
            k_params=s.k_params,
            error=s.error,
        )
        for s in ordered
    )
    n_failed = sum(1 for s in summaries if not s.converged)

    winner = next((e for e in ranked if e.converged and math.isfinite(e.bic)), None)
    if winner is None:
        details = "; ".join(
            f"#{e.index} {e.error or 'did not converge'}" for e in ranked[:5]
        )
        raise SearchError(
            f"no candidate produced a usable fit ({len(specs)} tried): {details}"
        )
    log.info(
        "event=search_winner index=%d bic=%.4f n_failed=%d",
        winner.index,
        winner.bic,
        n_failed,
    )
    winner_fit = fit(
        winner.spec, series, covariates, config.fit_options, burnin=common_burnin
    )
    best_pruned = prune_and_refit(winner_fit, config.fit_options)
    log.info(
        "event=search_done pruned_obs_lags=%s pruned_mean_lags=%s bic=%.4f",
        best_pruned.spec.obs_lags,
        best_pruned.spec.mean_lags,
        best_pruned.bic,
    )
    return SearchResult(
        ranked=ranked,
        best_pruned=best_pruned,
        best_index=winner.index,
        n_candidates=len(specs),
        n_failed=n_failed,
    )
