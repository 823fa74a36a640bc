"""Deliberately naive reference implementations used as test oracles.

Everything here is written with plain Python loops and math-module
primitives, independent of the package's vectorized code paths.
"""

import math


def naive_mean_path(spec, params, series, covariates=None):
    """Per-week (nu_t, mu_t) by direct translation of the model equations."""
    y = list(series.counts)
    T = len(y)
    log_link = spec.link == "log"

    def f(v):
        return math.log(v + 1.0) if log_link else float(v)

    ybar = sum(y) / T
    f_pre = f(ybar)

    sel = spec.covariates
    cov_cols = {}
    cov_pre = {}
    if sel is not None:
        for name in sel.names:
            col = [float(v) for v in covariates.column(name)[:T]]
            if sel.transform == "log1p":
                cov_cols[name] = [math.log1p(v) for v in col]
                cov_pre[name] = math.log1p(sum(col) / T)
            else:
                cov_cols[name] = col
                cov_pre[name] = sum(col) / T

    iv = spec.intervention
    break_offset = iv.break_week - series.start

    nu = {}
    out = []
    for t in range(1, T + 1):
        acc = params.beta0
        for k in spec.obs_lags:
            acc += params.beta[k] * (f(y[t - k - 1]) if t - k >= 1 else f_pre)
        for j in spec.mean_lags:
            acc += params.alpha[j] * (nu[t - j] if t - j >= 1 else params.beta0)
        cov_term = 0.0
        if sel is not None:
            for name in sel.names:
                idx = t - sel.lag
                x_val = cov_cols[name][idx - 1] if idx >= 1 else cov_pre[name]
                cov_term += params.eta[name] * x_val
        if spec.covariate_effect == "internal":
            acc += cov_term
        nu[t] = acc

        lin = acc
        c_t = 1.0 if (t - 1) >= break_offset else 0.0
        if iv.include_level_shift:
            lin += params.delta_beta0 * c_t
        if iv.include_trend:
            rate = params.eta_time
            if iv.include_slope_change:
                rate += params.delta_eta_time * c_t
            lin += rate * t
        if iv.holiday_indicator is not None:
            lin += params.gamma * iv.holiday_indicator[t - 1]
        if spec.covariate_effect == "external" and sel is not None:
            lin += cov_term
        mu = math.exp(lin) if log_link else lin
        out.append((acc, mu))
    return out


def naive_log_pmf(y, mu, distribution, sigma2):
    if distribution == "poisson" or sigma2 <= 1e-12:
        return y * math.log(mu) - mu - math.lgamma(y + 1) if y > 0 else -mu
    r = 1.0 / sigma2
    return (
        math.lgamma(y + r)
        - math.lgamma(r)
        - math.lgamma(y + 1)
        + r * math.log(r / (r + mu))
        + y * math.log(mu / (r + mu))
    )


def naive_log_likelihood(spec, params, series, covariates=None):
    """Burn-in-aware likelihood by direct pmf summation."""
    path = naive_mean_path(spec, params, series, covariates)
    burnin = max(spec.obs_lags + spec.mean_lags, default=0)
    sigma2 = params.sigma2 if params.sigma2 is not None else 0.0
    total = 0.0
    for t in range(burnin, len(series.counts)):
        _, mu = path[t]
        total += naive_log_pmf(series.counts[t], mu, spec.distribution, sigma2)
    return total


def naive_poisson_quantile(mu, u):
    """Smallest k with CDF(k) >= u by direct pmf accumulation."""
    acc = 0.0
    k = 0
    pmf = math.exp(-mu)
    while True:
        acc += pmf
        if acc >= u:
            return k
        k += 1
        pmf *= mu / k
        if k > 100000:
            raise RuntimeError("quantile accumulation ran away")


def naive_negbin_quantile(mu, sigma2, u):
    r = 1.0 / sigma2
    p = r / (r + mu)
    acc = 0.0
    k = 0
    # pmf(0) = p^r
    log_pmf = r * math.log(p)
    while True:
        acc += math.exp(log_pmf)
        if acc >= u:
            return k
        # pmf(k+1)/pmf(k) = (k + r)/(k + 1) * (1 - p)
        log_pmf += math.log((k + r) / (k + 1.0) * (1.0 - p))
        k += 1
        if k > 1000000:
            raise RuntimeError("quantile accumulation ran away")
