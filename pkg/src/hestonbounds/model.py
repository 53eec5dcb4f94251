"""Model parameters, the statistical/calibrated parameter maps, and the
elliptical uncertainty set over (rate, reversion speed, reversion level).

Uncertainty coordinates are (r, kappa, beta) with beta = kappa * theta; the
instantaneous drift of the variance is linear in these, which is what makes
the optimised driver closed-form. Conversions to and from (r, kappa, theta)
happen only at the edges of the API.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, SingularMapError

# Singular values of the ellipse covariance below RANK_RTOL * s_max are
# treated as zero (the reference covariance is near-diagonal with scales
# spanning several orders of magnitude).
RANK_RTOL = 1e-12


@dataclass(frozen=True)
class HestonParams:
    """Five diffusion/drift parameters plus the volatility risk coefficient.

    r, kappa, theta, sigma, rho are the real-world (P) parameters; lam is the
    volatility risk premium coefficient (default 0). Risk-neutral reversion
    parameters are derived: kappa_rn = kappa + sigma*lam and
    theta_rn = kappa*theta / kappa_rn.
    """

    r: float
    kappa: float
    theta: float
    sigma: float
    rho: float
    lam: float = 0.0

    def __post_init__(self):
        if not (self.kappa > 0 and self.theta > 0 and self.sigma > 0):
            raise InputError(
                f"kappa, theta, sigma must be positive, got "
                f"({self.kappa}, {self.theta}, {self.sigma})"
            )
        if not -1.0 < self.rho < 1.0:
            raise InputError(f"rho must lie in (-1, 1), got {self.rho}")
        if self.kappa + self.sigma * self.lam <= 0:
            raise SingularMapError(
                f"kappa + sigma*lam = {self.kappa + self.sigma * self.lam} <= 0"
            )

    @property
    def kappa_rn(self) -> float:
        return self.kappa + self.sigma * self.lam

    @property
    def theta_rn(self) -> float:
        return self.kappa * self.theta / self.kappa_rn

    @property
    def beta(self) -> float:
        return self.kappa * self.theta

    @property
    def feller_ratio(self) -> float:
        return 2.0 * self.kappa * self.theta / self.sigma**2

    @property
    def feller_ok(self) -> bool:
        # Recorded, never enforced: the scheme runs with truncation when violated.
        return self.feller_ratio >= 1.0

    def center_control(self) -> "ControlVector":
        return ControlVector(self.r, self.kappa, self.theta)


@dataclass(frozen=True)
class ControlVector:
    """One admissible value of the (rate, reversion, level) control."""

    r: float
    kappa: float
    theta: float

    def __post_init__(self):
        for name in ("r", "kappa", "theta"):
            if not math.isfinite(getattr(self, name)):
                raise InputError(f"control component {name} must be finite")
        if self.kappa < 0 or self.theta < 0:
            raise InputError(
                f"kappa and theta controls must be nonnegative, got "
                f"({self.kappa}, {self.theta})"
            )

    @property
    def beta(self) -> float:
        return self.kappa * self.theta

    def to_rkb(self) -> np.ndarray:
        return np.array([self.r, self.kappa, self.beta])

    @classmethod
    def from_rkb(cls, rkb) -> "ControlVector":
        r, kappa, beta = map(float, rkb)
        if kappa <= 0:
            raise InputError(f"cannot convert beta to theta with kappa = {kappa}")
        return cls(r, kappa, beta / kappa)


class ParamMapMode(enum.Enum):
    STATISTICAL = "statistical"
    CALIBRATED = "calibrated"


def controlled_drift(u: ControlVector, params: HestonParams, mode: ParamMapMode):
    """Map a control to the drift parameters of the controlled dynamics.

    Statistical mode sends the real-world control through the same change of
    parametrisation as the reference measure change: (r, k, t) ->
    (r, k + sigma*lam, k*t / (k + sigma*lam)). Calibrated mode is the
    identity. Either way kappa_u * theta_u == kappa * theta of the control.
    """
    if mode is ParamMapMode.CALIBRATED:
        return u.r, u.kappa, u.theta
    shifted = u.kappa + params.sigma * params.lam
    if shifted == 0.0:
        raise SingularMapError(
            f"controlled reversion kappa_t + sigma*lam vanished (kappa_t={u.kappa})"
        )
    return u.r, shifted, u.kappa * u.theta / shifted


def _symmetrize_check(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (3, 3):
        raise InputError(f"covariance must be 3x3, got {cov.shape}")
    scale = max(np.abs(cov).max(), 1.0)
    if np.abs(cov - cov.T).max() > 1e-9 * scale:
        raise InputError("covariance must be symmetric")
    cov = 0.5 * (cov + cov.T)
    eig = np.linalg.eigvalsh(cov)
    if eig.min() < -1e-10 * max(eig.max(), 1.0):
        raise InputError(f"covariance must be positive semi-definite, eig={eig}")
    return cov


@dataclass(frozen=True)
class UncertaintyEllipse:
    """Admissible control set {u : (u - center)' Sigma^-1 (u - center) <= chi}
    in (r, kappa, beta) coordinates. chi = 0 degenerates to {center}."""

    center: ControlVector
    covariance: np.ndarray
    chi: float
    _pinv: np.ndarray = field(init=False, repr=False, compare=False)
    _sqrt: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        cov = _symmetrize_check(self.covariance)
        cov.flags.writeable = False
        object.__setattr__(self, "covariance", cov)
        if self.chi < 0:
            raise InputError(f"chi must be nonnegative, got {self.chi}")
        object.__setattr__(self, "_pinv", np.linalg.pinv(cov, rcond=RANK_RTOL))
        w, v = np.linalg.eigh(cov)
        w = np.clip(w, 0.0, None)
        object.__setattr__(self, "_sqrt", v @ np.diag(np.sqrt(w)) @ v.T)

    @property
    def pinv_covariance(self) -> np.ndarray:
        return self._pinv

    @property
    def sqrt_covariance(self) -> np.ndarray:
        """Symmetric square root of the covariance."""
        return self._sqrt

    def ball_transform(self) -> np.ndarray:
        """L with u = center + L w mapping the unit ball onto the ellipse."""
        scaled = self.chi * self.covariance
        try:
            return np.linalg.cholesky(scaled)
        except np.linalg.LinAlgError:
            # Singular covariance: fall back to the symmetric square root.
            return math.sqrt(self.chi) * self._sqrt

    def quad_form(self, deviation) -> float:
        d = np.asarray(deviation, dtype=float)
        return float(d @ self._pinv @ d)

    def with_center(self, center: ControlVector) -> "UncertaintyEllipse":
        return UncertaintyEllipse(center, self.covariance, self.chi)


def in_uncertainty_set(u: ControlVector, ell: UncertaintyEllipse, tol: float = 0.0) -> bool:
    """Boundary-inclusive membership test; tol relaxes chi multiplicatively."""
    dev = u.to_rkb() - ell.center.to_rkb()
    return ell.quad_form(dev) <= ell.chi * (1.0 + tol) + tol


@dataclass(frozen=True)
class NovikovReport:
    """Sufficient (not necessary) integrability conditions for the controlled
    measure change. A False flag warrants a warning, never an abort."""

    kappa_ok: bool
    level_ok: bool
    kappa_max_dev: float
    kappa_bound: float
    level_max: float
    level_bound: float

    @property
    def margins(self):
        return (self.kappa_bound - self.kappa_max_dev, self.level_bound - self.level_max)


def _max_quadratic_on_ellipse(ell: UncertaintyEllipse, m: np.ndarray) -> float:
    """max of d' M d over the ellipse (M psd). The maximiser sits on the
    boundary, so the value is chi * lambda_max(S M S) with S = sqrt(Sigma)."""
    s = ell.sqrt_covariance
    sym = s @ m @ s
    sym = 0.5 * (sym + sym.T)
    lam_max = float(np.linalg.eigvalsh(sym)[-1])
    return ell.chi * max(lam_max, 0.0)


def novikov_sufficient_check(params: HestonParams, ell: UncertaintyEllipse) -> NovikovReport:
    """Check the two closed-form sufficient conditions on the uncertainty set.

    The reversion condition bounds the worst |kappa_t - kappa| over the
    ellipse; the level condition bounds a quadratic form in the rate and
    beta deviations. Both maxima are exact (linear and quadratic objectives
    over an ellipsoid).
    """
    rho2 = params.rho**2
    kappa_bound = params.kappa_rn * math.sqrt(1.0 - rho2) / math.sqrt(2.0)
    # max |e2 . d| over the ellipse = sqrt(chi * Sigma_kk)
    kappa_max_dev = math.sqrt(max(ell.chi * ell.covariance[1, 1], 0.0))

    s = params.sigma
    # quadratic form sigma^2 dr^2 + dbeta^2 - 2 rho sigma dr dbeta over (dr, dk, dbeta)
    m = np.array(
        [
            [s**2, 0.0, -params.rho * s],
            [0.0, 0.0, 0.0],
            [-params.rho * s, 0.0, 1.0],
        ]
    )
    level_max = _max_quadratic_on_ellipse(ell, m)
    level_bound = 0.5 * (1.0 - rho2) * (params.beta - 0.5 * s**2) ** 2

    return NovikovReport(
        kappa_ok=kappa_max_dev <= kappa_bound,
        level_ok=level_max <= level_bound,
        kappa_max_dev=kappa_max_dev,
        kappa_bound=kappa_bound,
        level_max=level_max,
        level_bound=level_bound,
    )
