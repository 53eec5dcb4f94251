"""Backward value process for the controlled dynamics: the measure-change
effect, the linear driver and its closed-form optimum over the uncertainty
ellipse, and the regression Monte Carlo schemes that solve the backward
equation on simulated forward paths.

Driver coordinates: the driver is linear in the control deviation
(r_t - r, kappa_t - kappa, beta_t - beta), so the pointwise optimum over the
ellipse is sqrt(chi * n' Sigma n) with the coefficient vector n below; the
optimizing control sits on the ellipse boundary along Sigma n.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .analytic import OptionSpec, PriceInterval, heston_price
from .errors import InputError, NumericalError
from .model import (
    ControlVector,
    HestonParams,
    ParamMapMode,
    UncertaintyEllipse,
    controlled_drift,
)
from .regression import MarsFit, mars_fit
from .simulate import PathBundle, TimeGrid, downsample, simulate_heston

# Variance floor below which the control is cancelled (driver = -r y);
# the value is the minimum of the realized-variance series the reference
# empirical design was run on.
EPSILON_V_DEFAULT = 0.00041


class Direction(enum.Enum):
    LOWER = -1
    UPPER = 1


class SchemeBase(enum.Enum):
    IMPLICIT_BT = "implicit-bt"
    EXPLICIT = "explicit"
    RECURSIVE = "recursive"


class ZSource(enum.Enum):
    REGRESSION = "regression"
    MARS_DERIVATIVE = "mars-derivative"


class ExtraPredictor(enum.Enum):
    NONE = "none"
    HESTON_PRICE = "heston-price"


@dataclass(frozen=True)
class KnnSpec:
    k: int = 5

    def __post_init__(self):
        if self.k < 1:
            raise InputError(f"k must be positive, got {self.k}")


@dataclass(frozen=True)
class MarsSpec:
    degree: int = 2
    max_terms: int = 21
    knots: int | str = "all"
    fit_subsample: int | None = 25_000
    min_rsq_gain: float = 0.0


@dataclass(frozen=True)
class BsdeScheme:
    base: SchemeBase = SchemeBase.RECURSIVE
    regressor: KnnSpec | MarsSpec = field(default_factory=MarsSpec)
    fixed_point_iters: int = 0
    variance_reduction: bool = False
    z_source: ZSource = ZSource.REGRESSION
    extra_predictors: ExtraPredictor = ExtraPredictor.NONE

    def __post_init__(self):
        if self.fixed_point_iters < 0:
            raise InputError("fixed_point_iters must be nonnegative")
        if self.z_source is ZSource.MARS_DERIVATIVE and not isinstance(self.regressor, MarsSpec):
            raise InputError("derivative-based Z requires the hinge regressor")
        if self.base is SchemeBase.IMPLICIT_BT and self.fixed_point_iters < 1:
            raise InputError("the implicit scheme needs fixed_point_iters >= 1")


@dataclass(frozen=True)
class DriverContext:
    params: HestonParams
    ellipse: UncertaintyEllipse | None
    mode: ParamMapMode = ParamMapMode.STATISTICAL
    epsilon_v: float = EPSILON_V_DEFAULT
    direction: Direction = Direction.UPPER
    fixed_control: ControlVector | None = None

    def __post_init__(self):
        if self.epsilon_v < 0:
            raise InputError("epsilon_v must be nonnegative")


@dataclass(frozen=True)
class BsdeSolution:
    y0_mean: float
    y0_se: float
    y0_paths: np.ndarray
    y0_sample: np.ndarray
    y_paths: np.ndarray | None
    z1_paths: np.ndarray | None
    z2_paths: np.ndarray | None
    control_paths: np.ndarray | None
    step_rss: tuple
    cancel_counts: tuple

    @property
    def total_cancelled(self) -> int:
        return int(sum(self.cancel_counts))


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


def _check_positive_v(v):
    v = np.asarray(v, dtype=float)
    if np.any(v <= 0):
        raise InputError("variance must be positive here; apply the cancellation rule first")
    return v


def alpha_effect(s, v, u: ControlVector, ctx: DriverContext):
    """Girsanov kernel tying the controlled dynamics to the reference ones."""
    v = _check_positive_v(v)
    p = ctx.params
    _, kappa_u, theta_u = controlled_drift(u, p, ctx.mode)
    num = kappa_u * theta_u - p.kappa_rn * p.theta_rn - (kappa_u - p.kappa_rn) * v
    root_v = np.sqrt(v)
    a1 = num / (p.sigma * root_v)
    a2 = (-p.rho * num + p.sigma * (u.r - p.r)) / (p.sigma * root_v * np.sqrt(1.0 - p.rho**2))
    return a1, a2


def driver_f(s, v, y, z1, z2, u: ControlVector, ctx: DriverContext):
    """Linear driver -r_t y + z . alpha for a given control."""
    a1, a2 = alpha_effect(s, v, u, ctx)
    return -u.r * np.asarray(y, dtype=float) + np.asarray(z1) * a1 + np.asarray(z2) * a2


def n_vector(s, v, y, z1, z2, ctx: DriverContext):
    """Coefficients of the driver on the control deviations (dr, dkappa, dbeta)."""
    v = _check_positive_v(v)
    p = ctx.params
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    y = np.asarray(y, dtype=float)
    root_v = np.sqrt(v)
    rho_c = np.sqrt(1.0 - p.rho**2)
    n1 = z2 / (rho_c * root_v) - y
    n2 = -z1 * root_v / p.sigma + p.rho * z2 * root_v / (p.sigma * rho_c)
    n3 = z1 / (p.sigma * root_v) - p.rho * z2 / (p.sigma * rho_c * root_v)
    return n1, n2, n3


def optimal_driver(s, v, y, z1, z2, ctx: DriverContext):
    """Pointwise optimised driver and its control.

    Returns (h, u_rkb) where u_rkb has shape (..., 3) in (r, kappa, beta)
    coordinates. Wherever v <= epsilon_v the control is cancelled: the
    driver is -r y at the center control.
    """
    if ctx.ellipse is None:
        raise InputError("optimal_driver needs an uncertainty ellipse")
    v = np.asarray(v, dtype=float)
    y = np.asarray(y, dtype=float)
    scalar = v.ndim == 0
    v, y = np.atleast_1d(v), np.atleast_1d(y)
    z1 = np.broadcast_to(np.asarray(z1, dtype=float), v.shape)
    z2 = np.broadcast_to(np.asarray(z2, dtype=float), v.shape)
    s = np.broadcast_to(np.asarray(s, dtype=float), v.shape)

    ell = ctx.ellipse
    sign = float(ctx.direction.value)
    r_c = ell.center.r
    center = ell.center.to_rkb()

    h = -r_c * y
    dev = np.zeros(v.shape + (3,))
    live = v > ctx.epsilon_v
    if np.any(live):
        n1, n2, n3 = n_vector(s[live], v[live], y[live], z1[live], z2[live], ctx)
        n = np.stack([n1, n2, n3])
        sn = ell.covariance @ n
        quad = np.einsum("ij,ij->j", n, sn)
        quad = np.maximum(quad, 0.0)
        root = np.sqrt(ell.chi * quad)
        h_live = sign * root - r_c * y[live]
        scale = np.zeros_like(quad)
        pos = quad > 0
        scale[pos] = sign * np.sqrt(ell.chi / quad[pos])
        dev_live = (scale * sn).T
        h[live] = h_live
        dev[live] = dev_live
    u_rkb = center + dev
    if scalar:
        return float(h[0]), u_rkb[0]
    return h, u_rkb


# ---------------------------------------------------------------------------
# payoffs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CallPayoff:
    strike: float

    def __call__(self, s):
        return np.maximum(np.asarray(s, dtype=float) - self.strike, 0.0)

    def delta(self, s):
        return np.where(np.asarray(s, dtype=float) >= self.strike, 1.0, 0.0)


@dataclass(frozen=True)
class IdentityPayoff:
    def __call__(self, s):
        return np.asarray(s, dtype=float).copy()

    def delta(self, s):
        return np.ones_like(np.asarray(s, dtype=float))


# ---------------------------------------------------------------------------
# per-step regression wrapper
# ---------------------------------------------------------------------------


class _KnnNeighbourhoods:
    """Neighbour structure of one predictor set, reusable across targets.
    Matches knn_fit_predict: self in the average, ball widened on ties."""

    def __init__(self, x, k):
        from scipy.spatial import cKDTree

        self.k = k
        n = x.shape[0]
        self.degenerate = bool(np.all(x == x[0]))
        if self.degenerate:
            return
        tree = cKDTree(x)
        m = min(k + 2, n)
        dist, ind = tree.query(x, k=m, workers=-1)
        self.ind = ind[:, : k + 1]
        tie_tol = 1.0 + 1e-12
        d_k = dist[:, k]
        tied = dist[:, k + 1] <= d_k * tie_tol if m > k + 1 else np.zeros(n, dtype=bool)
        self.balls = {
            int(i): tree.query_ball_point(x[i], r=d_k[i] * tie_tol) for i in np.flatnonzero(tied)
        }

    def predict(self, y):
        if self.degenerate:
            return np.full(y.shape[0], y.mean())
        out = y[self.ind].sum(axis=1) / (self.k + 1)
        for i, ball in self.balls.items():
            out[i] = y[ball].sum() / len(ball)
        return out


class _StepRegressor:
    """One backward step's conditional-expectation estimator; kNN reuses the
    neighbourhood structure across the step's several targets."""

    def __init__(self, spec, x):
        self.spec = spec
        self.x = x
        self.last_fit: MarsFit | None = None
        self.last_rss = float("nan")
        self._hoods = None

    def predict(self, y):
        if isinstance(self.spec, KnnSpec):
            if self._hoods is None:
                self._hoods = _KnnNeighbourhoods(self.x, self.spec.k)
            return self._hoods.predict(np.asarray(y, dtype=float))
        fit = mars_fit(
            self.x,
            y,
            max_terms=self.spec.max_terms,
            degree=self.spec.degree,
            knots=self.spec.knots,
            fit_subsample=self.spec.fit_subsample,
            min_rsq_gain=self.spec.min_rsq_gain,
        )
        self.last_fit = fit
        self.last_rss = fit.rss
        return fit.predict(self.x)

    def predict_many(self, targets):
        return [self.predict(t) for t in targets]


def _z_from_gradient(fit: MarsFit, x, s, v, params: HestonParams):
    """Z = grad(yhat) . diffusion matrix of the forward dynamics."""
    g = fit.gradient(x)
    root_v = np.sqrt(np.maximum(v, 0.0))
    g_s, g_v = g[:, 0], g[:, 1]
    z1 = params.rho * s * root_v * g_s + params.sigma * root_v * g_v
    z2 = np.sqrt(1.0 - params.rho**2) * s * root_v * g_s
    return z1, z2


def _terminal_z(payoff, s, v, params: HestonParams):
    root_v = np.sqrt(np.maximum(v, 0.0))
    delta = payoff.delta(s)
    z1 = params.rho * s * root_v * delta
    z2 = np.sqrt(1.0 - params.rho**2) * s * root_v * delta
    return z1, z2


def _heston_predictor_column(params, s, v, tau, strike, n_exact=500):
    """Approximate pricing-formula column: exact on an evenly strided subset,
    extended everywhere by cubic polynomial regression in (s, v)."""
    n = s.shape[0]
    idx = np.linspace(0, n - 1, min(n_exact, n)).astype(int)
    opt = OptionSpec(strike=strike, maturity=tau, rate=params.r)
    exact = np.array([heston_price(params, si, max(vi, 0.0), opt) for si, vi in zip(s[idx], v[idx])])
    feats = _poly_features(s[idx], v[idx])
    coef, *_ = np.linalg.lstsq(feats, exact, rcond=None)
    col = _poly_features(s, v) @ coef
    col[idx] = exact
    return col


def _poly_features(s, v):
    return np.column_stack(
        [np.ones_like(s), s, v, s * s, s * v, v * v, s**3, s * s * v, s * v * v, v**3]
    )


# ---------------------------------------------------------------------------
# backward induction
# ---------------------------------------------------------------------------


def _context_needs_z(ctx: DriverContext) -> bool:
    """False when the driver cannot depend on Z: fixed control whose mapped
    drift equals the reference one (zero measure-change effect)."""
    if ctx.ellipse is not None:
        return True
    u = ctx.fixed_control or ctx.params.center_control()
    r_u, kappa_u, theta_u = controlled_drift(u, ctx.params, ctx.mode)
    p = ctx.params
    return not (
        r_u == p.r
        and abs(kappa_u - p.kappa_rn) < 1e-15 * max(1.0, p.kappa_rn)
        and abs(kappa_u * theta_u - p.kappa_rn * p.theta_rn) < 1e-15
    )


def _eval_driver(ctx: DriverContext, s, v, y, z1, z2, want_controls=False):
    """Driver values with the cancellation rule applied; returns
    (f, cancel_count, controls-or-None)."""
    live = v > ctx.epsilon_v
    cancelled = int(v.size - live.sum())
    if ctx.ellipse is not None:
        r_c = ctx.ellipse.center.r
    elif ctx.fixed_control is not None:
        r_c = ctx.params.r
    else:
        r_c = ctx.params.r
    f = -r_c * y
    controls = None
    if ctx.ellipse is not None:
        h, u_rkb = optimal_driver(s, v, y, z1, z2, ctx)
        f = h
        if want_controls:
            controls = u_rkb
    else:
        u = ctx.fixed_control or ctx.params.center_control()
        if np.any(live):
            f_live = driver_f(s[live], v[live], y[live], z1[live], z2[live], u, ctx)
            f = np.array(f, copy=True)
            f[live] = f_live
        if want_controls:
            controls = np.broadcast_to(u.to_rkb(), v.shape + (3,))
    return f, cancelled, controls


def solve_bsde(
    bundle: PathBundle,
    payoff,
    ctx: DriverContext,
    scheme: BsdeScheme,
    opt: OptionSpec | None = None,
    store_paths: bool = True,
    store_controls: bool = False,
) -> BsdeSolution:
    """Backward induction over the bundle per the configured scheme.

    The Z regressions target (value * dW / dt) against the time-t state,
    with dW the stored increments of the independent Brownian pair that
    generated the paths. The value in the Z and driver targets is the next
    regressed value (explicit) or the running terminal-plus-driver sum
    (recursive); the implicit variant runs fixed-point refinements of the
    time-t value inside the driver.
    """
    if scheme.extra_predictors is ExtraPredictor.HESTON_PRICE and opt is None:
        raise InputError("the pricing-formula predictor needs the option spec")
    grid = bundle.grid
    n, n_paths = grid.n_steps, bundle.n_paths
    deltas = grid.deltas
    s_all, v_all = bundle.s_paths, bundle.v_paths

    recursive = scheme.base is SchemeBase.RECURSIVE
    mars_deriv = scheme.z_source is ZSource.MARS_DERIVATIVE
    needs_z = _context_needs_z(ctx)

    y_next = np.asarray(payoff(s_all[:, n]), dtype=float)
    running = y_next.copy() if recursive else None
    z_right = _terminal_z(payoff, s_all[:, n], v_all[:, n], ctx.params) if mars_deriv else None

    y_paths = np.empty((n_paths, n + 1)) if store_paths else None
    z1_paths = np.empty((n_paths, n)) if store_paths else None
    z2_paths = np.empty((n_paths, n)) if store_paths else None
    control_paths = np.empty((n_paths, n, 3)) if store_controls else None
    if store_paths:
        y_paths[:, n] = y_next

    step_rss = [float("nan")] * n
    cancel_counts = [0] * n
    final_target = y_next

    for i in range(n, 0, -1):
        s_i, v_i = s_all[:, i - 1], v_all[:, i - 1]
        dt = float(deltas[i - 1])
        dw1, dw2 = bundle.dw1[:, i - 1], bundle.dw2[:, i - 1]

        cols = [s_i, v_i]
        if scheme.extra_predictors is ExtraPredictor.HESTON_PRICE:
            tau = float(grid.horizon - grid.knots[i - 1])
            cols.append(_heston_predictor_column(ctx.params, s_i, v_i, tau, opt.strike))
        x_step = np.column_stack(cols)
        regr = _StepRegressor(scheme.regressor, x_step)

        if mars_deriv:
            z1, z2 = z_right  # Z at the right time point, from the previous fit
        elif not needs_z:
            z1 = z2 = np.zeros(n_paths)
        elif scheme.variance_reduction:
            # Center the smoothed time-t value (the recursive running sum has
            # the same conditional mean but far more martingale noise).
            zc = y_next - regr.predict(y_next)
            z1, z2 = regr.predict_many([zc * dw1 / dt, zc * dw2 / dt])
        else:
            zeta = running if recursive else y_next
            z1, z2 = regr.predict_many([zeta * dw1 / dt, zeta * dw2 / dt])

        f_vals, cancelled, controls = _eval_driver(
            ctx, s_i, v_i, y_next, z1, z2, want_controls=store_controls
        )
        cancel_counts[i - 1] = cancelled
        if store_controls and controls is not None:
            control_paths[:, i - 1, :] = controls

        if recursive:
            base = running
            running = base + f_vals * dt
            target = running
            y_prev = regr.predict(target)
            for _ in range(scheme.fixed_point_iters):
                f_vals, cancelled, _ = _eval_driver(ctx, s_i, v_i, y_prev, z1, z2)
                running = base + f_vals * dt
                target = running
                y_prev = regr.predict(target)
        else:
            target = y_next + f_vals * dt
            y_prev = regr.predict(target)
            iters = scheme.fixed_point_iters if scheme.base is SchemeBase.IMPLICIT_BT else 0
            for _ in range(iters):
                f_vals, cancelled, _ = _eval_driver(ctx, s_i, v_i, y_prev, z1, z2)
                target = y_next + f_vals * dt
                y_prev = regr.predict(target)

        if mars_deriv:
            if regr.last_fit is None:
                raise NumericalError(f"no fit available for the gradient at step {i}")
            z_right = _z_from_gradient(regr.last_fit, x_step[:, :2], s_i, v_i, ctx.params)
            z1, z2 = z_right

        step_rss[i - 1] = regr.last_rss
        if store_paths:
            y_paths[:, i - 1] = y_prev
            z1_paths[:, i - 1] = z1
            z2_paths[:, i - 1] = z2
        y_next = y_prev
        final_target = target

    y0_mean = float(final_target.mean())
    y0_se = float(final_target.std(ddof=1) / np.sqrt(n_paths))
    return BsdeSolution(
        y0_mean=y0_mean,
        y0_se=y0_se,
        y0_paths=y_next,
        y0_sample=final_target,
        y_paths=y_paths,
        z1_paths=z1_paths,
        z2_paths=z2_paths,
        control_paths=control_paths,
        step_rss=tuple(step_rss),
        cancel_counts=tuple(cancel_counts),
    )


def scheme_label(scheme: BsdeScheme) -> str:
    reg = (f"knn({scheme.regressor.k})" if isinstance(scheme.regressor, KnnSpec)
           else f"mars({scheme.regressor.degree},{scheme.regressor.max_terms})")
    flags = []
    if scheme.variance_reduction:
        flags.append("vr")
    if scheme.fixed_point_iters:
        flags.append(f"imp{scheme.fixed_point_iters}")
    if scheme.z_source is ZSource.MARS_DERIVATIVE:
        flags.append("zgrad")
    suffix = "+" + "+".join(flags) if flags else ""
    return f"{scheme.base.value}-{reg}{suffix}"


def solution_summary_row(scheme: BsdeScheme, direction: Direction, sol: BsdeSolution, runtime: float):
    """CSV row (scheme, direction, y0_mean, se, runtime) for run logs."""
    return [scheme_label(scheme), direction.name.lower(), sol.y0_mean, sol.y0_se, runtime]


# ---------------------------------------------------------------------------
# pricing bounds pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    n_paths: int = 100_000
    n_steps: int = 25
    fine_steps: int | None = None
    seed: int = 0


def make_bundle(params: HestonParams, spot, v0, maturity, sim: SimConfig) -> PathBundle:
    if sim.fine_steps is not None and sim.fine_steps > sim.n_steps:
        fine = simulate_heston(
            params, spot, v0, TimeGrid.equidistant(maturity, sim.fine_steps), sim.n_paths, sim.seed
        )
        return downsample(fine, TimeGrid.equidistant(maturity, sim.n_steps))
    return simulate_heston(
        params, spot, v0, TimeGrid.equidistant(maturity, sim.n_steps), sim.n_paths, sim.seed
    )


def pricing_bounds(
    params: HestonParams,
    ellipse: UncertaintyEllipse | None,
    spot: float,
    v0: float,
    opt: OptionSpec,
    sim: SimConfig,
    scheme: BsdeScheme,
    mode: ParamMapMode = ParamMapMode.STATISTICAL,
    epsilon_v: float = EPSILON_V_DEFAULT,
    store_paths: bool = False,
):
    """One forward simulation, two backward solves (lower and upper driver)
    sharing the bundle. Returns (PriceInterval, (lower sol, upper sol))."""
    bundle = make_bundle(params, spot, v0, opt.maturity, sim)
    payoff = CallPayoff(opt.strike)
    ctx = DriverContext(params, ellipse, mode, epsilon_v, Direction.LOWER)
    sol_lo = solve_bsde(bundle, payoff, ctx, scheme, opt, store_paths=store_paths)
    sol_hi = solve_bsde(
        bundle, payoff, replace(ctx, direction=Direction.UPPER), scheme, opt, store_paths=store_paths
    )
    interval = PriceInterval(lower=sol_lo.y0_mean, upper=sol_hi.y0_mean)
    return interval, (sol_lo, sol_hi)
