"""Building the uncertainty set from data: realized-variance construction,
quasi-likelihoods for the square-root variance process, numerical maximum
likelihood with observed-information covariance, confidence ellipses, and
the realized-correlation estimate.

Estimation is parametrised by (kappa, theta, sigma); the covariance is
reported in (kappa, beta, sigma) coordinates with beta = kappa * theta,
matching the layout the pricing ellipse consumes.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaincinv

from .errors import InputError, NumericalError
from .model import ControlVector, UncertaintyEllipse


@dataclass(frozen=True)
class VarianceSeries:
    """Annualized variance observations on an increasing time grid (years)."""

    times: np.ndarray
    values: np.ndarray
    provenance: str = "daily"

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape:
            raise InputError("times and values must be 1-d arrays of equal length")
        if t.size >= 2 and not np.all(np.diff(t) > 0):
            raise InputError("times must be strictly increasing")
        if np.any(v < 0):
            raise InputError("variances must be nonnegative")
        t.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.times.size


@dataclass(frozen=True)
class EstimationResult:
    kappa: float
    theta: float
    sigma: float
    covariance: np.ndarray  # over (kappa, beta, sigma)
    loglik: float
    n_obs: int
    likelihood: str
    n_iter: int = 0

    def __post_init__(self):
        if not (self.kappa > 0 and self.theta > 0 and self.sigma > 0):
            raise InputError("estimates must be positive")
        cov = np.asarray(self.covariance, dtype=float)
        cov = 0.5 * (cov + cov.T)
        cov.flags.writeable = False
        object.__setattr__(self, "covariance", cov)

    @property
    def beta(self) -> float:
        return self.kappa * self.theta

    @property
    def std_errors(self):
        """(kappa, beta, sigma) standard errors."""
        return tuple(math.sqrt(max(v, 0.0)) for v in np.diag(self.covariance))


def realized_variance(log_prices, times, day_boundaries) -> VarianceSeries:
    """Sum of squared intraday log-returns per interval, annualized by the
    interval length. The last observation at or before the interval start is
    the base of its first return; intervals without at least one return are
    skipped with a warning."""
    log_prices = np.asarray(log_prices, dtype=float)
    times = np.asarray(times, dtype=float)
    bounds = np.asarray(day_boundaries, dtype=float)
    if bounds.size < 2:
        raise InputError("need at least two day boundaries")
    out_t, out_v = [], []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        inside = np.flatnonzero((times > lo) & (times <= hi))
        base = np.flatnonzero(times <= lo)
        idx = np.concatenate((base[-1:], inside))
        if idx.size < 2:
            warnings.warn(f"interval ({lo}, {hi}] has {idx.size} points; skipped")
            continue
        rv = float(np.sum(np.diff(log_prices[idx]) ** 2))
        out_t.append(hi)
        out_v.append(rv / (hi - lo))
    return VarianceSeries(np.array(out_t), np.array(out_v), provenance="daily")


def decimate(series: VarianceSeries, period: int) -> VarianceSeries:
    """Aggregate each run of `period` consecutive observations into one,
    duration-weighting the annualized values (equivalent to summing the
    underlying squared returns over the longer interval)."""
    if period < 1:
        raise InputError("period must be a positive observation count")
    if period == 1:
        return series
    t, v = series.times, series.values
    start = t[0] - (t[1] - t[0]) if t.size > 1 else t[0] - 1.0
    prev = np.concatenate(([start], t[:-1]))
    durations = t - prev
    out_t, out_v = [], []
    for i in range(0, t.size, period):
        chunk = slice(i, min(i + period, t.size))
        d = durations[chunk]
        out_t.append(t[chunk][-1])
        out_v.append(float(np.sum(v[chunk] * d) / np.sum(d)))
    return VarianceSeries(np.array(out_t), np.array(out_v), provenance=f"decimated({period})")


def _transitions(series: VarianceSeries):
    v = series.values
    dt = np.diff(series.times)
    if np.any(v[:-1] <= 0):
        raise InputError("likelihood needs strictly positive variance observations")
    return v[:-1], v[1:], dt


def euler_loglik(theta, series: VarianceSeries) -> float:
    """Gaussian quasi-likelihood with one-step Euler moments."""
    kappa, level, sigma = theta
    if sigma <= 0:
        raise InputError(f"sigma must be positive, got {sigma}")
    v0, v1, dt = _transitions(series)
    mean = v0 + kappa * (level - v0) * dt
    var = sigma**2 * v0 * dt
    return float(-0.5 * np.sum((v1 - mean) ** 2 / var + np.log(2.0 * math.pi * var)))


def exact_moments(theta, v, delta):
    """Conditional mean and variance of the square-root process."""
    kappa, level, sigma = theta
    if kappa <= 0:
        raise InputError(f"kappa must be positive, got {kappa}")
    e = np.exp(-kappa * np.asarray(delta, dtype=float))
    mean = level + (np.asarray(v, dtype=float) - level) * e
    var = (
        np.asarray(v, dtype=float) * (sigma**2 / kappa) * (e - e * e)
        + level * (sigma**2 / (2.0 * kappa)) * (1.0 - e) ** 2
    )
    return mean, var


VAR_FLOOR = 1e-30


def exact_loglik(theta, series: VarianceSeries) -> float:
    """Gaussian quasi-likelihood with the exact conditional moments."""
    v0, v1, dt = _transitions(series)
    mean, var = exact_moments(theta, v0, dt)
    if np.any(var < VAR_FLOOR):
        warnings.warn("conditional variance underflow; flooring")
        var = np.maximum(var, VAR_FLOOR)
    return float(-0.5 * np.sum((v1 - mean) ** 2 / var + np.log(2.0 * math.pi * var)))


_LIKELIHOODS = {"euler": euler_loglik, "exact": exact_loglik}


def _default_init(series: VarianceSeries):
    v = series.values
    dt = float(np.mean(np.diff(series.times)))
    level = float(np.mean(v))
    # lag-1 autocorrelation gives the reversion speed scale
    vc = v - level
    denom = float(vc @ vc)
    ac = float(vc[:-1] @ vc[1:]) / denom if denom > 0 else 0.5
    ac = min(max(ac, 0.01), 0.99)
    kappa = -math.log(ac) / dt
    resid_var = float(np.var(np.diff(v)))
    sigma = math.sqrt(max(resid_var / (max(level, 1e-12) * dt), 1e-8))
    return np.array([max(kappa, 0.05), max(level, 1e-8), sigma])


def _hessian_kbs(fun, point, rel_step=1e-4):
    """Central-difference Hessian with one Richardson refinement."""

    def hess_at(h_scale):
        h = np.maximum(np.abs(point), 1e-8) * h_scale
        hess = np.empty((3, 3))
        for i in range(3):
            for j in range(i, 3):
                ei = np.zeros(3)
                ej = np.zeros(3)
                ei[i] = h[i]
                ej[j] = h[j]
                fpp = fun(point + ei + ej)
                fpm = fun(point + ei - ej)
                fmp = fun(point - ei + ej)
                fmm = fun(point - ei - ej)
                hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])
        return hess

    coarse = hess_at(2.0 * rel_step)
    fine = hess_at(rel_step)
    return (4.0 * fine - coarse) / 3.0


def _per_transition_loglik(likelihood, kbs, v0, v1, dt):
    k, b, s = kbs
    if likelihood == "exact":
        mean, var = exact_moments((k, b / k, s), v0, dt)
        var = np.maximum(var, VAR_FLOOR)
    else:
        mean = v0 + k * (b / k - v0) * dt
        var = s**2 * v0 * dt
    return -0.5 * ((v1 - mean) ** 2 / var + np.log(2.0 * math.pi * var))


def _sandwich_covariance(likelihood, kbs, series, info_inv):
    """Quasi-MLE covariance I^-1 J I^-1 with J from per-transition scores."""
    v0, v1, dt = _transitions(series)
    h = np.maximum(np.abs(kbs), 1e-8) * 1e-5
    scores = np.empty((v0.size, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h[j]
        up = _per_transition_loglik(likelihood, kbs + e, v0, v1, dt)
        dn = _per_transition_loglik(likelihood, kbs - e, v0, v1, dt)
        scores[:, j] = (up - dn) / (2.0 * h[j])
    j_mat = scores.T @ scores
    return info_inv @ j_mat @ info_inv


def fit_mle(
    series: VarianceSeries,
    likelihood: str = "euler",
    init=None,
    covariance: str = "hessian",
) -> EstimationResult:
    """Maximize the chosen quasi-likelihood over (kappa, theta, sigma).

    Positivity is enforced by optimizing the log-parameters with a simplex
    search restarted from five deterministic perturbations, then a
    quasi-Newton polish. The default covariance is the inverse observed
    information in (kappa, beta, sigma) coordinates (central differences
    with Richardson refinement; non-PSD projected with a warning);
    covariance="sandwich" applies the quasi-MLE correction I^-1 J I^-1,
    which is better calibrated when the Gaussian transition approximation
    is far from the true one.
    """
    if covariance not in ("hessian", "sandwich"):
        raise InputError(f"covariance must be 'hessian' or 'sandwich', got {covariance}")
    if len(series) < 10:
        raise InputError(f"need at least 10 observations, got {len(series)}")
    if likelihood not in _LIKELIHOODS:
        raise InputError(f"likelihood must be one of {sorted(_LIKELIHOODS)}")
    loglik = _LIKELIHOODS[likelihood]

    x0 = np.asarray(init, dtype=float) if init is not None else _default_init(series)
    if np.any(x0 <= 0):
        raise InputError(f"init must be positive, got {x0}")

    def neg_log(params_log):
        try:
            return -loglik(np.exp(params_log), series)
        except (FloatingPointError, OverflowError):
            return 1e30

    with np.errstate(over="ignore", invalid="ignore"):
        best = None
        n_iter = 0
        perturbations = [
            np.zeros(3),
            np.array([0.5, 0.0, 0.0]),
            np.array([-0.5, 0.0, 0.0]),
            np.array([0.0, 0.3, -0.3]),
            np.array([-0.3, -0.3, 0.3]),
        ]
        for shift in perturbations:
            res = minimize(neg_log, np.log(x0) + shift, method="Nelder-Mead",
                           options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 4000})
            n_iter += res.nit
            if best is None or res.fun < best.fun:
                best = res
        polish = minimize(neg_log, best.x, method="BFGS", options={"gtol": 1e-10})
        n_iter += polish.nit
        if polish.fun <= best.fun and np.all(np.isfinite(polish.x)):
            best = polish
    if best is None or not np.isfinite(best.fun):
        raise NumericalError("likelihood optimization failed")

    kappa, level, sigma = np.exp(best.x)

    def neg_log_kbs(kbs):
        k, b, s = kbs
        if k <= 0 or b <= 0 or s <= 0:
            return 1e30
        return -loglik((k, b / k, s), series)

    point = np.array([kappa, kappa * level, sigma])
    hess = _hessian_kbs(neg_log_kbs, point)
    eigvals, eigvecs = np.linalg.eigh(0.5 * (hess + hess.T))
    if np.any(eigvals <= 0):
        warnings.warn(f"observed information not positive definite (eig {eigvals}); projecting")
        eigvals = np.maximum(eigvals, 1e-12 * max(eigvals.max(), 1.0))
    cov = eigvecs @ np.diag(1.0 / eigvals) @ eigvecs.T
    if covariance == "sandwich":
        cov = _sandwich_covariance(likelihood, point, series, cov)

    return EstimationResult(
        kappa=float(kappa),
        theta=float(level),
        sigma=float(sigma),
        covariance=cov,
        loglik=float(-best.fun),
        n_obs=len(series),
        likelihood=likelihood,
        n_iter=n_iter,
    )


def chi2_quantile_3(prob: float) -> float:
    """Inverse CDF of the chi-square distribution with three degrees of
    freedom (regularized lower incomplete gamma inverse)."""
    if not 0.0 <= prob < 1.0:
        raise InputError(f"probability must be in [0, 1), got {prob}")
    return float(2.0 * gammaincinv(1.5, prob))


def confidence_ellipse(
    result: EstimationResult,
    rate_sd: float,
    alpha: float,
    rate: float = 0.0,
) -> UncertaintyEllipse:
    """1-alpha ellipse over (r, kappa, beta): the rate block is independent
    with the given standard deviation, the (kappa, beta) block comes from the
    estimation covariance, and the radius is the chi-square(3) quantile."""
    if rate_sd < 0:
        raise InputError("rate_sd must be nonnegative")
    cov = np.zeros((3, 3))
    cov[0, 0] = rate_sd**2
    kb = result.covariance[:2, :2]
    cov[1:, 1:] = kb
    chi = chi2_quantile_3(1.0 - alpha)
    center = ControlVector(rate, result.kappa, result.theta)
    return UncertaintyEllipse(center=center, covariance=cov, chi=chi)


def realized_correlation(price_series, variance_series) -> float:
    """Realized correlation of the Brownian shocks driving price and
    variance, from aligned evenly sampled series.

    Log increments are standardized by the local variance level before
    normalizing (log-price shocks scale with sqrt(V), log-variance shocks
    with 1/sqrt(V)); without the weights the plain log-covariation ratio is
    damped by T / sqrt(int V * int 1/V) < 1 and never recovers the
    instantaneous correlation. The vol-of-vol scale cancels, so it need not
    be known."""
    s = np.asarray(price_series, dtype=float)
    v = np.asarray(variance_series, dtype=float)
    if s.shape != v.shape or s.ndim != 1 or s.size < 3:
        raise InputError("need aligned 1-d series with at least 3 points")
    if np.any(s <= 0) or np.any(v <= 0):
        raise InputError("series must be strictly positive for log increments")
    w = v[:-1]
    a = np.diff(np.log(s)) / np.sqrt(w)
    b = np.diff(np.log(v)) * np.sqrt(w)
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom == 0.0:
        raise NumericalError("degenerate series: zero quadratic variation")
    return float(a @ b / denom)
