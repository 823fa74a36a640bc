"""Shared helpers for building random model instances."""

import numpy as np
import pytest

from countts.kernel import (
    CovariateMatrix,
    CovariateSelection,
    InterventionConfig,
    ModelSpec,
    ParameterVector,
)
from countts.weeks import WeekIndex, WeeklySeries


def random_instance(rng, link, effect, distribution, T=None, with_covariates=None):
    """A random small (spec, params, series, covariates) tuple.

    Parameter draws respect the admissibility constraints of the link, and
    identity-link draws keep every term positive so the mean path stays valid.
    """
    T = int(T if T is not None else rng.integers(25, 51))
    start = WeekIndex(2019, 30)
    p = int(rng.integers(0, 3))
    q = int(rng.integers(0, 3)) if p else 0
    obs_lags = tuple(sorted(rng.choice(np.arange(1, 5), size=p, replace=False).tolist()))
    mean_lags = tuple(sorted(rng.choice(np.arange(1, 5), size=q, replace=False).tolist()))

    use_cov = bool(rng.integers(0, 2)) if with_covariates is None else with_covariates
    covariates = None
    selection = None
    if use_cov:
        values = rng.uniform(0.0, 5.0, size=(T, 1))
        covariates = CovariateMatrix(names=("load",), values=values)
        selection = CovariateSelection(
            names=("load",),
            lag=int(rng.integers(0, 4)),
            transform=str(rng.choice(["identity", "log1p"])),
        )

    include_trend = bool(rng.integers(0, 2))
    include_slope = include_trend and bool(rng.integers(0, 2))
    include_level = bool(rng.integers(0, 2))
    use_holiday = bool(rng.integers(0, 2))
    holiday = tuple(int(v) for v in rng.integers(0, 2, size=T)) if use_holiday else None
    intervention = InterventionConfig(
        break_week=start + T // 2,
        include_level_shift=include_level,
        include_slope_change=include_slope,
        include_trend=include_trend,
        holiday_indicator=holiday,
    )
    spec = ModelSpec(
        distribution=distribution,
        link=link,
        obs_lags=obs_lags,
        mean_lags=mean_lags,
        covariates=selection,
        covariate_effect=effect,
        intervention=intervention,
    )

    n_dyn = p + q
    if link == "identity":
        weights = rng.uniform(0.05, 1.0, size=n_dyn) if n_dyn else np.array([])
        if n_dyn:
            weights *= rng.uniform(0.3, 0.7) / weights.sum()
        beta0 = float(rng.uniform(3.0, 6.0))
        eta = {"load": float(rng.uniform(0.0, 0.3))} if use_cov else {}
        eta_time = float(rng.uniform(0.0, 0.02)) if include_trend else None
        delta_eta = float(rng.uniform(0.0, 0.01)) if include_slope else None
        delta_beta0 = float(rng.uniform(-0.5, 0.5)) if include_level else None
        gamma = float(rng.uniform(-0.3, 0.0)) if use_holiday else None
    else:
        weights = rng.uniform(-0.3, 0.3, size=n_dyn) if n_dyn else np.array([])
        total = np.abs(weights).sum()
        if total > 0.9:
            weights *= 0.9 / total
        beta0 = float(rng.uniform(0.5, 2.0))
        eta = {"load": float(rng.uniform(-0.1, 0.1))} if use_cov else {}
        eta_time = float(rng.uniform(-0.002, 0.002)) if include_trend else None
        delta_eta = float(rng.uniform(-0.001, 0.001)) if include_slope else None
        delta_beta0 = float(rng.uniform(-0.3, 0.3)) if include_level else None
        gamma = float(rng.uniform(-0.3, 0.3)) if use_holiday else None

    params = ParameterVector(
        beta0=beta0,
        beta={k: float(w) for k, w in zip(obs_lags, weights[:p])},
        alpha={j: float(w) for j, w in zip(mean_lags, weights[p:])},
        eta=eta,
        eta_time=eta_time,
        delta_eta_time=delta_eta,
        delta_beta0=delta_beta0,
        gamma=gamma,
        sigma2=float(rng.uniform(0.01, 0.3)) if distribution == "negbin" else None,
    )
    counts = tuple(int(v) for v in rng.poisson(rng.uniform(5.0, 40.0), size=T))
    series = WeeklySeries(start, counts)
    return spec, params, series, covariates


@pytest.fixture
def rng():
    return np.random.default_rng(20140106)
