"""Deterministic pricing: semi-closed Heston call prices by Fourier
inversion, Black-Scholes price / implied volatility, dividend conversion of
quotes, and min/max of the pricing formula over the uncertainty ellipse.

The characteristic function uses the branch-cut-safe formulation (the
"(b - d)" branch with d taken in the right half plane), so the complex log
never winds even at decade-long maturities. b - d is evaluated as
-sigma^2 (iu + u^2) / (b + d) to stay accurate as sigma -> 0.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import ndtr

from .errors import InputError, OptimizerError, OutOfBandError, QuadratureError
from .model import (
    ControlVector,
    HestonParams,
    ParamMapMode,
    UncertaintyEllipse,
    controlled_drift,
)

U_MAX = 200.0
_PANELS = (0.0, 1.0, 5.0, 25.0, 100.0, U_MAX, 2.0 * U_MAX)
PRICE_TOL = 1e-6


@dataclass(frozen=True)
class OptionSpec:
    """Contract terms. Only calls are priced; the flag is reserved."""

    strike: float
    maturity: float
    is_call: bool = True
    rate: float = 0.0
    dividend_yield: float = 0.0

    def __post_init__(self):
        if self.strike <= 0 or self.maturity <= 0:
            raise InputError(
                f"strike and maturity must be positive, got "
                f"({self.strike}, {self.maturity})"
            )
        if not self.is_call:
            raise InputError("only call options are supported")


@dataclass(frozen=True)
class PriceInterval:
    lower: float
    upper: float
    argmin: ControlVector | None = None
    argmax: ControlVector | None = None

    def __post_init__(self):
        if self.lower > self.upper + 1e-12:
            raise InputError(f"interval lower {self.lower} > upper {self.upper}")

    @property
    def width(self) -> float:
        return self.upper - self.lower


def _clog1p(z):
    """log(1 + z) for complex z, accurate for |z| << 1."""
    z = np.asarray(z, dtype=complex)
    out = np.log(1.0 + z)
    small = np.abs(z) < 1e-4
    if np.any(small):
        zs = z[small]
        out = np.array(out, dtype=complex)
        out[small] = zs * (1.0 - zs * (0.5 - zs / 3.0))
    return out


def _cf_terms(u, kappa_rn, theta_rn, sigma, rho, tau):
    """C(u), D(u) with log S_T characteristic function exp(iu*x0 + C + D*v0)."""
    u = np.asarray(u, dtype=complex)
    iu = 1j * u
    b = kappa_rn - rho * sigma * iu
    d = np.sqrt(b * b + sigma**2 * (iu + u * u))
    bpd = b + d
    # b - d without cancellation; (b-d)(b+d) = -sigma^2 (iu + u^2)
    bmd = -(sigma**2) * (iu + u * u) / bpd
    g = bmd / bpd
    e = np.exp(-d * tau)
    w = g * (1.0 - e) / (1.0 - g)
    log_term = _clog1p(w)
    c = (kappa_rn * theta_rn) * (bmd * tau - 2.0 * log_term) / sigma**2
    dd = (bmd / sigma**2) * (1.0 - e) / (1.0 - g * e)
    return c, dd


def _probability_integrands(u, x0, lnk, kappa_rn, theta_rn, sigma, rho, v0, tau):
    """Integrands of the two Gil-Pelaez tail probabilities at real u > 0."""
    c2, d2 = _cf_terms(u, kappa_rn, theta_rn, sigma, rho, tau)
    phi2 = np.exp(1j * u * x0 + c2 + d2 * v0)
    um = u - 1j
    c1, d1 = _cf_terms(um, kappa_rn, theta_rn, sigma, rho, tau)
    # phi(-i) = exp(x0): dividing through shifts the exponent by -x0.
    phi1 = np.exp(1j * um * x0 + c1 + d1 * v0 - x0)
    kernel = np.exp(-1j * u * lnk) / (1j * u)
    return (kernel * phi1).real, (kernel * phi2).real


@functools.lru_cache(maxsize=32)
def _gl_nodes(n_per_panel, panels):
    xs, ws = np.polynomial.legendre.leggauss(n_per_panel)
    nodes, weights = [], []
    for lo, hi in zip(panels[:-1], panels[1:]):
        mid, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
        nodes.append(mid + half * xs)
        weights.append(half * ws)
    return np.concatenate(nodes), np.concatenate(weights)


def _heston_call(spot, v0, strike, tau, rate, div_yield, kappa_rn, theta_rn, sigma, rho, n_nodes):
    x0 = math.log(spot) + (rate - div_yield) * tau
    lnk = math.log(strike)
    u, w = _gl_nodes(n_nodes, _PANELS)
    f1, f2 = _probability_integrands(u, x0, lnk, kappa_rn, theta_rn, sigma, rho, v0, tau)
    p1 = 0.5 + (f1 @ w) / math.pi
    p2 = 0.5 + (f2 @ w) / math.pi
    disc = math.exp(-rate * tau)
    fwd = math.exp(x0)
    return float(disc * (fwd * p1 - strike * p2))


def _panels_to(u_max):
    return tuple(p for p in _PANELS if p < u_max) + (u_max,)


def _heston_call_batch(spot, v0, strike, tau, rates, kappas_rn, thetas_rn, sigma, rho, n_nodes):
    """Prices at many (rate, reversion, level) points in one vectorized pass;
    used by the ellipse grid certification. The transform decays fast in u at
    long maturities, so the truncation point shrinks with tau."""
    rates = np.asarray(rates, dtype=float)[:, None]
    kap = np.asarray(kappas_rn, dtype=float)[:, None]
    lev = np.asarray(thetas_rn, dtype=float)[:, None]
    u_max = U_MAX if tau < 2.0 else 80.0
    u, w = _gl_nodes(n_nodes, _panels_to(u_max))
    x0 = math.log(spot) + rates * tau
    lnk = math.log(strike)
    c2, d2 = _cf_terms(u[None, :], kap, lev, sigma, rho, tau)
    phi2 = np.exp(1j * u[None, :] * x0 + c2 + d2 * v0)
    um = (u - 1j)[None, :]
    c1, d1 = _cf_terms(um, kap, lev, sigma, rho, tau)
    phi1 = np.exp(1j * um * x0 + c1 + d1 * v0 - x0)
    kernel = np.exp(-1j * u * lnk) / (1j * u)
    p1 = 0.5 + ((kernel * phi1).real @ w) / math.pi
    p2 = 0.5 + ((kernel * phi2).real @ w) / math.pi
    disc = np.exp(-rates[:, 0] * tau)
    fwd = np.exp(x0[:, 0])
    return disc * (fwd * p1 - strike * p2)


def heston_price(
    params: HestonParams,
    spot: float,
    v0: float,
    opt: OptionSpec,
    tol: float = PRICE_TOL,
) -> float:
    """European call under the risk-neutral dynamics, by Fourier inversion.

    Discounting and drift use params.r; opt supplies strike, maturity and an
    optional continuous dividend yield. Accuracy is verified by doubling the
    quadrature nodes (the node set already spans twice the nominal truncation
    point, which covers the tail error as well).
    """
    if spot <= 0:
        raise InputError(f"spot must be positive, got {spot}")
    if v0 < 0:
        raise InputError(f"v0 must be nonnegative, got {v0}")
    args = (
        spot,
        v0,
        opt.strike,
        opt.maturity,
        params.r,
        opt.dividend_yield,
        params.kappa_rn,
        params.theta_rn,
        params.sigma,
        params.rho,
    )
    coarse = _heston_call(*args, n_nodes=64)
    fine = _heston_call(*args, n_nodes=96)
    if abs(fine - coarse) > tol:
        finest = _heston_call(*args, n_nodes=192)
        if abs(finest - fine) > tol:
            raise QuadratureError(
                f"quadrature did not settle: 64/96/192-node values "
                f"{coarse:.10f}/{fine:.10f}/{finest:.10f}",
                estimate=finest,
                error=abs(finest - fine),
            )
        return finest
    return fine


def bs_price(spot: float, vol: float, opt: OptionSpec) -> float:
    """Black-Scholes call with continuous dividend yield."""
    if vol < 0:
        raise InputError(f"vol must be nonnegative, got {vol}")
    tau, k = opt.maturity, opt.strike
    fwd_leg = spot * math.exp(-opt.dividend_yield * tau)
    strike_leg = k * math.exp(-opt.rate * tau)
    if vol == 0.0:
        return max(fwd_leg - strike_leg, 0.0)
    sd = vol * math.sqrt(tau)
    d1 = (math.log(spot / k) + (opt.rate - opt.dividend_yield + 0.5 * vol**2) * tau) / sd
    d2 = d1 - sd
    return float(fwd_leg * ndtr(d1) - strike_leg * ndtr(d2))


def bs_vega(spot: float, vol: float, opt: OptionSpec) -> float:
    tau = opt.maturity
    sd = vol * math.sqrt(tau)
    d1 = (math.log(spot / opt.strike) + (opt.rate - opt.dividend_yield + 0.5 * vol**2) * tau) / sd
    return spot * math.exp(-opt.dividend_yield * tau) * math.sqrt(tau) * math.exp(-0.5 * d1**2) / math.sqrt(2 * math.pi)


VOL_LO = 1e-6
VOL_HI = 5.0


def implied_vol(price: float, spot: float, opt: OptionSpec, tol: float = 1e-8) -> float:
    """Invert Black-Scholes in vol by Newton safeguarded with bisection.

    The admissible price band is (discounted intrinsic, discounted spot);
    violations raise OutOfBandError naming the violated side.
    """
    lo_price = max(spot * math.exp(-opt.dividend_yield * opt.maturity)
                   - opt.strike * math.exp(-opt.rate * opt.maturity), 0.0)
    hi_price = spot * math.exp(-opt.dividend_yield * opt.maturity)
    if price < lo_price - 1e-12:
        raise OutOfBandError(
            f"price {price} below intrinsic bound {lo_price}", side="lower"
        )
    if price > hi_price + 1e-12:
        raise OutOfBandError(
            f"price {price} above forward bound {hi_price}", side="upper"
        )

    lo, hi = VOL_LO, VOL_HI
    f_lo = bs_price(spot, lo, opt) - price
    if f_lo > 0:
        return lo  # at or below the vol floor
    f_hi = bs_price(spot, hi, opt) - price
    if f_hi < 0:
        return hi
    vol = 0.5 * (lo + hi)
    for _ in range(100):
        f = bs_price(spot, vol, opt) - price
        if abs(f) <= tol:
            return vol
        if f > 0:
            hi = vol
        else:
            lo = vol
        vega = bs_vega(spot, vol, opt)
        step_ok = vega > 1e-14
        if step_ok:
            cand = vol - f / vega
            step_ok = lo < cand < hi
        vol = cand if step_ok else 0.5 * (lo + hi)
    f = bs_price(spot, vol, opt) - price
    if abs(f) <= 10 * tol:
        return vol
    raise QuadratureError(f"implied vol iteration stalled at {vol} (resid {f})", estimate=vol)


def to_zero_dividend_price(quote_price: float, spot: float, opt: OptionSpec) -> float:
    """Re-express a quote as a zero-dividend price at the same implied vol."""
    vol = implied_vol(quote_price, spot, opt)
    zero_div = OptionSpec(
        strike=opt.strike, maturity=opt.maturity, rate=opt.rate, dividend_yield=0.0
    )
    return bs_price(spot, vol, zero_div)


def _control_price(
    rkb: np.ndarray,
    params: HestonParams,
    spot: float,
    v0: float,
    opt: OptionSpec,
    mode: ParamMapMode,
    fast: bool = False,
) -> float:
    r_t, kappa_t, beta_t = rkb
    theta_t = beta_t / kappa_t
    u = ControlVector(r_t, kappa_t, theta_t)
    r_u, kappa_u, theta_u = controlled_drift(u, params, mode)
    if fast:
        # single-pass quadrature for optimizer iterations; final endpoints
        # are re-priced with the accuracy-checked evaluator
        return _heston_call(
            spot, v0, opt.strike, opt.maturity, r_u, opt.dividend_yield,
            kappa_u, theta_u, params.sigma, params.rho, n_nodes=96,
        )
    # kappa_u, theta_u already are the risk-neutral reversion parameters of
    # the controlled dynamics, so price with lam = 0.
    ctrl_params = HestonParams(
        r=r_u, kappa=kappa_u, theta=theta_u, sigma=params.sigma, rho=params.rho, lam=0.0
    )
    return heston_price(ctrl_params, spot, v0, opt)


_RESTARTS = np.array(
    [
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
        [0.577350269, 0.577350269, 0.577350269],
    ]
)


def _sphere_grid(n_polar: int, n_azimuth: int) -> np.ndarray:
    thetas = np.linspace(0.0, math.pi, n_polar)
    phis = np.linspace(0.0, 2.0 * math.pi, n_azimuth, endpoint=False)
    tt, pp = np.meshgrid(thetas, phis, indexing="ij")
    return np.column_stack(
        [
            (np.sin(tt) * np.cos(pp)).ravel(),
            (np.sin(tt) * np.sin(pp)).ravel(),
            np.cos(tt).ravel(),
        ]
    )


def formula_optimal_bounds(
    params: HestonParams,
    ell: UncertaintyEllipse,
    spot: float,
    v0: float,
    opt: OptionSpec,
    mode: ParamMapMode = ParamMapMode.STATISTICAL,
    certify: bool = False,
    grid_resolution: int = 64,
    certify_tol: float = 1e-3,
) -> PriceInterval:
    """Min/max of the pricing formula over constant controls in the ellipse.

    The ellipse maps to the unit ball, which is searched with SLSQP from
    eight deterministic restart points (interior optima are admissible).
    With certify=True the endpoints are checked against an angular grid on
    the ellipse boundary.
    """
    center_rkb = ell.center.to_rkb()
    if ell.chi == 0.0:
        price = _control_price(center_rkb, params, spot, v0, opt, mode)
        return PriceInterval(price, price, ell.center, ell.center)

    transform = ell.ball_transform()

    beta_reach = ell.chi * float(transform[2] @ transform[2])
    if center_rkb[2] - math.sqrt(max(beta_reach, 0.0)) <= 0:
        warnings.warn("uncertainty set reaches kappa*theta <= 0; prices there may be unstable")

    def to_control(w):
        return center_rkb + transform @ w

    def objective(w, sign, fast=True):
        rkb = to_control(w)
        if rkb[1] <= 0 or rkb[2] <= 0:
            return 1e12  # reject controls outside the admissible orthant
        return sign * _control_price(rkb, params, spot, v0, opt, mode, fast=fast)

    constraint = {"type": "ineq", "fun": lambda w: 1.0 - w @ w}
    results = {}
    for sign, label in ((1.0, "min"), (-1.0, "max")):
        best_val, best_w = math.inf, None
        for w0 in _RESTARTS:
            res = minimize(
                objective,
                0.999 * w0,
                args=(sign,),
                method="SLSQP",
                constraints=[constraint],
                bounds=[(-1.0, 1.0)] * 3,
                options={"maxiter": 200, "ftol": 1e-10},
            )
            if res.fun < best_val:
                best_val, best_w = float(res.fun), res.x
        if best_w is None or not math.isfinite(best_val):
            raise OptimizerError(f"{label} search failed", best=best_w)
        norm = math.sqrt(float(best_w @ best_w))
        if norm > 1.0:
            best_w = best_w / norm
        best_val = objective(best_w, sign, fast=False)  # accuracy-checked re-price
        results[label] = (sign * best_val, ControlVector.from_rkb(to_control(best_w)))

    lower, argmin = results["min"]
    upper, argmax = results["max"]

    if certify:
        grid = _sphere_grid(grid_resolution, grid_resolution)
        rkb = center_rkb[None, :] + grid @ transform.T
        valid = (rkb[:, 1] > 0) & (rkb[:, 2] > 0)
        rkb = rkb[valid]
        if mode is ParamMapMode.STATISTICAL:
            shift = params.sigma * params.lam
            kap_u = rkb[:, 1] + shift
            lev_u = rkb[:, 2] / kap_u
        else:
            kap_u = rkb[:, 1]
            lev_u = rkb[:, 2] / rkb[:, 1]
        vals = _heston_call_batch(spot, v0, opt.strike, opt.maturity, rkb[:, 0], kap_u, lev_u,
                                  params.sigma, params.rho, n_nodes=48)
        # spot-check the batch quadrature against the accuracy-checked pricer
        probe = np.linspace(0, vals.size - 1, 16).astype(int)
        worst = max(
            abs(vals[i] - _control_price(rkb[i], params, spot, v0, opt, mode)) for i in probe
        )
        if worst > 10 * PRICE_TOL:
            raise QuadratureError("certification grid quadrature did not settle", error=worst)
        if vals.size and (vals.min() < lower - certify_tol or vals.max() > upper + certify_tol):
            raise OptimizerError(
                f"grid search beat optimizer: grid [{vals.min():.6f}, {vals.max():.6f}] "
                f"vs optimizer [{lower:.6f}, {upper:.6f}]",
                best=(lower, upper),
            )
    return PriceInterval(lower, upper, argmin, argmax)
