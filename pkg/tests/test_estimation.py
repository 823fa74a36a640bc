import math

import numpy as np
import pytest

from countts.errors import DataError, DiagnosticError
from countts.estimation import (
    FitOptions,
    FittedModel,
    ParamLayout,
    bic_value,
    fit,
    in_sample_metrics,
    prune_and_refit,
    wald_flags,
)
from countts.kernel import (
    InterventionConfig,
    ModelSpec,
    ParameterVector,
    simulate,
)
from countts.weeks import WeekIndex, WeeklySeries

START = WeekIndex(2014, 1)
NO_BREAKS = InterventionConfig(include_level_shift=False, include_trend=False)


def make_fitted(spec, params, std_errors, series):
    """Hand-assembled FittedModel for exercising Wald/pruning logic."""
    return FittedModel(
        spec=spec,
        params=params,
        std_errors=std_errors,
        loglik=-100.0,
        n_effective=len(series) - spec.max_lag,
        k_params=len(ParamLayout(spec).labels),
        bic=0.0,
        fitted_means=series.values().copy(),
        converged=True,
        iterations=10,
        series=series,
    )


class TestFit:
    def test_constant_series_closed_form(self):
        spec = ModelSpec("poisson", "identity", intervention=NO_BREAKS)
        series = WeeklySeries(START, tuple([7] * 60))
        m = fit(spec, series)
        assert m.converged
        assert m.params.beta0 == pytest.approx(7.0, abs=1e-6)

    def test_poisson_identity_recovery(self):
        spec = ModelSpec("poisson", "identity", obs_lags=(1,), intervention=NO_BREAKS)
        truth = ParameterVector(beta0=2.0, beta={1: 0.5})
        series = simulate(spec, truth, 2000, seed=13)
        m = fit(spec, series)
        assert m.converged
        assert abs(m.params.beta0 - 2.0) <= 3.0 * m.std_errors["beta0"]
        assert abs(m.params.beta[1] - 0.5) <= 3.0 * m.std_errors["beta[1]"]

    def test_negbin_on_equidispersed_data_hits_boundary(self):
        pois = ModelSpec("poisson", "identity", obs_lags=(1,), intervention=NO_BREAKS)
        series = simulate(pois, ParameterVector(beta0=2.0, beta={1: 0.5}), 2000, seed=5)
        nb = ModelSpec("negbin", "identity", obs_lags=(1,), intervention=NO_BREAKS)
        m = fit(nb, series)
        assert m.params.sigma2 <= 0.01

    def test_too_short_series_refused(self):
        spec = ModelSpec("poisson", "identity", obs_lags=(1,), intervention=NO_BREAKS)
        series = WeeklySeries(START, tuple([5] * 20))
        with pytest.raises(DataError):
            fit(spec, series)

    def test_bic_identity(self):
        spec = ModelSpec("negbin", "log", obs_lags=(1,), intervention=NO_BREAKS)
        series = simulate(
            spec, ParameterVector(beta0=1.8, beta={1: 0.3}, sigma2=0.05), 400, seed=2
        )
        m = fit(spec, series)
        assert m.bic == pytest.approx(
            -2.0 * m.loglik + m.k_params * math.log(m.n_effective), abs=1e-12
        )
        assert m.bic == bic_value(m.loglik, m.k_params, m.n_effective)
        assert m.k_params == 3  # beta0, beta[1], sigma2

    def test_warm_start_determinism(self):
        spec = ModelSpec("negbin", "log", obs_lags=(1, 2), intervention=NO_BREAKS)
        truth = ParameterVector(beta0=1.5, beta={1: 0.3, 2: 0.15}, sigma2=0.03)
        series = simulate(spec, truth, 800, seed=21)
        a = fit(spec, series)
        b = fit(spec, series)
        xa = ParamLayout(spec).pack(a.params)
        xb = ParamLayout(spec).pack(b.params)
        np.testing.assert_allclose(xa, xb, rtol=0, atol=1e-10)

    def test_monotone_nesting_with_warm_start(self):
        small = ModelSpec("poisson", "identity", obs_lags=(1,), intervention=NO_BREAKS)
        big = ModelSpec("poisson", "identity", obs_lags=(1, 2), intervention=NO_BREAKS)
        series = simulate(
            small, ParameterVector(beta0=2.0, beta={1: 0.5}), 600, seed=31
        )
        m_small = fit(small, series)
        warm = ParameterVector(
            beta0=m_small.params.beta0, beta={1: m_small.params.beta[1], 2: 0.0}
        )
        m_big = fit(big, series, warm_start=warm)
        assert m_big.loglik >= m_small.loglik - 1e-6

    def test_std_error_sanity_against_monte_carlo(self):
        # empirical sd of the estimates should match the mean reported SE
        spec = ModelSpec("poisson", "identity", obs_lags=(1,), intervention=NO_BREAKS)
        truth = ParameterVector(beta0=2.0, beta={1: 0.5})
        layout = ParamLayout(spec)
        estimates, ses = [], []
        for rep in range(200):
            series = simulate(spec, truth, 300, seed=5000 + rep)
            m = fit(spec, series)
            if not m.converged:
                continue
            estimates.append(layout.pack(m.params))
            ses.append([m.std_errors[lab] for lab in layout.labels])
        estimates = np.array(estimates)
        ses = np.array(ses)
        assert len(estimates) >= 190
        for i in range(estimates.shape[1]):
            sd = estimates[:, i].std()
            mean_se = ses[:, i].mean()
            assert abs(sd - mean_se) <= 0.3 * mean_se


class TestWaldFlags:
    def test_significant_coefficient_from_reported_scale(self):
        spec = ModelSpec("poisson", "identity", obs_lags=(1,), intervention=NO_BREAKS)
        series = WeeklySeries(START, tuple([5] * 40))
        model = make_fitted(
            spec,
            ParameterVector(beta0=3.7112, beta={1: 0.2624}),
            {"beta0": 0.3010, "beta[1]": 0.0420},
            series,
        )
        flags = wald_flags(model, 0.05)
        assert flags["beta[1]"].significant  # |z| ~ 6.25
        assert flags["beta[1]"].z == pytest.approx(6.2476, abs=1e-3)
        assert not flags["beta[1]"].protected

    def test_zero_estimate_never_significant(self):
        spec = ModelSpec("poisson", "identity", obs_lags=(1,), intervention=NO_BREAKS)
        series = WeeklySeries(START, tuple([5] * 40))
        model = make_fitted(
            spec,
            ParameterVector(beta0=1.0, beta={1: 0.0}),
            {"beta0": 0.5, "beta[1]": 0.123},
            series,
        )
        assert not wald_flags(model, 0.05)["beta[1]"].significant

    def test_level_shift_not_significant_but_protected(self):
        spec = ModelSpec(
            "poisson",
            "identity",
            obs_lags=(1,),
            intervention=InterventionConfig(include_level_shift=True, include_trend=False),
        )
        series = WeeklySeries(WeekIndex(2019, 40), tuple([5] * 40))
        model = make_fitted(
            spec,
            ParameterVector(beta0=3.0, beta={1: 0.2}, delta_beta0=-0.0211),
            {"beta0": 0.3, "beta[1]": 0.01, "delta_beta0": 0.0138},
            series,
        )
        flags = wald_flags(model, 0.05)
        assert not flags["delta_beta0"].significant  # |z| ~ 1.53 < 1.96
        assert flags["delta_beta0"].protected

    def test_missing_std_errors_is_diagnostic_error(self):
        spec = ModelSpec("poisson", "identity", intervention=NO_BREAKS)
        series = WeeklySeries(START, tuple([5] * 40))
        model = make_fitted(spec, ParameterVector(beta0=5.0), None, series)
        with pytest.raises(DiagnosticError):
            wald_flags(model, 0.05)


class TestPruneAndRefit:
    def _pruning_input(self):
        spec = ModelSpec(
            "poisson",
            "identity",
            obs_lags=(1, 2),
            mean_lags=(1, 2, 3),
            intervention=NO_BREAKS,
        )
        params = ParameterVector(
            beta0=2.0,
            beta={1: 0.02, 2: 0.30},
            alpha={1: 0.01, 2: 0.02, 3: 0.30},
        )
        # simulate a series rich enough for the refit
        series = simulate(spec, params, 500, seed=77)
        ses = {
            "beta0": 0.2,
            "beta[1]": 0.20,  # z = 0.1, dropped
            "beta[2]": 0.02,  # z = 15, kept
            "alpha[1]": 0.30,  # dropped
            "alpha[2]": 0.40,  # dropped
            "alpha[3]": 0.02,  # kept
        }
        return make_fitted(spec, params, ses, series)

    def test_worked_example_structure(self):
        pruned = prune_and_refit(self._pruning_input())
        assert pruned.spec.obs_lags == (2,)
        assert pruned.spec.mean_lags == (3,)
        assert pruned.converged

    def test_noop_pruning_returns_same_model(self):
        spec = ModelSpec("poisson", "identity", obs_lags=(1,), intervention=NO_BREAKS)
        series = simulate(spec, ParameterVector(beta0=2.0, beta={1: 0.5}), 400, seed=3)
        model = make_fitted(
            spec,
            ParameterVector(beta0=2.0, beta={1: 0.5}),
            {"beta0": 0.1, "beta[1]": 0.02},
            series,
        )
        assert prune_and_refit(model) is model

    def test_all_dynamics_dropped_gives_intercept_fit(self):
        spec = ModelSpec("poisson", "identity", obs_lags=(1,), mean_lags=(1,), intervention=NO_BREAKS)
        params = ParameterVector(beta0=5.0, beta={1: 0.01}, alpha={1: 0.01})
        series = simulate(spec, params, 300, seed=9)
        model = make_fitted(
            spec, params, {"beta0": 0.5, "beta[1]": 1.0, "alpha[1]": 1.0}, series
        )
        pruned = prune_and_refit(model)
        assert pruned.spec.obs_lags == ()
        assert pruned.spec.mean_lags == ()
        assert pruned.converged

    def test_alpha_dropped_when_obs_lags_empty(self):
        # keeping mean feedback without observation feedback would be degenerate
        spec = ModelSpec("poisson", "identity", obs_lags=(1,), mean_lags=(1,), intervention=NO_BREAKS)
        params = ParameterVector(beta0=2.0, beta={1: 0.01}, alpha={1: 0.40})
        series = simulate(spec, params, 300, seed=10)
        model = make_fitted(
            spec, params, {"beta0": 0.5, "beta[1]": 1.0, "alpha[1]": 0.01}, series
        )
        pruned = prune_and_refit(model)
        assert pruned.spec.obs_lags == ()
        assert pruned.spec.mean_lags == ()

    def test_protected_terms_survive_regardless_of_z(self):
        spec = ModelSpec(
            "negbin",
            "log",
            obs_lags=(1,),
            intervention=InterventionConfig(include_level_shift=True, include_trend=True),
        )
        params = ParameterVector(
            beta0=3.0,
            beta={1: 0.01},
            eta_time=1e-6,
            delta_beta0=1e-6,
            sigma2=0.02,
        )
        series = simulate(spec, params, 500, seed=55, start=WeekIndex(2018, 1))
        ses = {
            "beta0": 0.3,
            "beta[1]": 5.0,
            "eta_time": 1.0,
            "delta_beta0": 1.0,
            "sigma2": 1.0,
        }
        model = make_fitted(spec, params, ses, series)
        pruned = prune_and_refit(model)
        iv = pruned.spec.intervention
        assert iv.include_level_shift and iv.include_trend
        assert pruned.params.eta_time is not None
        assert pruned.params.delta_beta0 is not None
        assert pruned.params.sigma2 is not None

    def test_non_converged_input_rejected(self):
        spec = ModelSpec("poisson", "identity", intervention=NO_BREAKS)
        series = WeeklySeries(START, tuple([5] * 40))
        model = FittedModel(
            spec=spec,
            params=ParameterVector(beta0=5.0),
            std_errors=None,
            loglik=-math.inf,
            n_effective=40,
            k_params=1,
            bic=math.inf,
            fitted_means=series.values().copy(),
            converged=False,
            iterations=0,
            series=series,
        )
        with pytest.raises(DiagnosticError):
            prune_and_refit(model)

    def test_true_zero_lag_removed_in_simulation_study(self):
        # beta3 = 0 in truth; pruning should remove it in >= 90% of replicates
        truth_spec = ModelSpec("poisson", "identity", obs_lags=(1,), intervention=NO_BREAKS)
        truth = ParameterVector(beta0=3.0, beta={1: 0.4})
        wide = ModelSpec(
            "poisson", "identity", obs_lags=(1, 3), intervention=NO_BREAKS
        )
        removed = 0
        reps = 50
        for rep in range(reps):
            series = simulate(truth_spec, truth, 2000, seed=9000 + rep)
            m = fit(wide, series)
            if not m.converged:
                continue
            pruned = prune_and_refit(m)
            removed += int(3 not in pruned.spec.obs_lags)
        assert removed >= int(0.9 * reps)


class TestInSampleMetrics:
    def test_perfect_fit_has_zero_rmse(self):
        spec = ModelSpec("poisson", "identity", intervention=NO_BREAKS)
        series = WeeklySeries(START, tuple([5] * 50))
        model = make_fitted(spec, ParameterVector(beta0=5.0), {"beta0": 0.1}, series)
        # fitted_means copied from the observed series in make_fitted
        metrics = in_sample_metrics(model)
        assert metrics.rmse == 0.0
        assert metrics.mean_count == 5.0
        assert metrics.rmse_over_mean == 0.0

    def test_calibrated_coverage_on_own_simulation(self):
        spec = ModelSpec("negbin", "log", obs_lags=(1,), intervention=NO_BREAKS)
        truth = ParameterVector(beta0=1.8, beta={1: 0.4}, sigma2=0.02)
        series = simulate(spec, truth, 10_000, seed=123)
        m = fit(spec, series)
        assert m.converged
        metrics = in_sample_metrics(m)
        assert 0.93 <= metrics.coverage <= 0.97

    def test_paper_scale_sanity(self):
        # magnitudes comparable to the weekly national series: counts ~600,
        # mild overdispersion; coverage near 0.94 and rmse/mean under 0.12
        spec = ModelSpec(
            "negbin",
            "log",
            obs_lags=(1, 2),
            intervention=InterventionConfig(include_level_shift=True, include_trend=True),
        )
        truth = ParameterVector(
            beta0=3.7,
            beta={1: 0.26, 2: 0.13},
            eta_time=0.0007,
            delta_beta0=-0.02,
            sigma2=0.005,
        )
        series = simulate(spec, truth, 560, seed=42, start=WeekIndex(2014, 1))
        m = fit(spec, series)
        assert m.converged
        metrics = in_sample_metrics(m)
        assert 0.90 <= metrics.coverage <= 0.98
        assert metrics.rmse_over_mean < 0.15
