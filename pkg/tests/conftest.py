import numpy as np
import pytest

from hestonbounds.model import ControlVector, HestonParams, UncertaintyEllipse

CHI3_95 = 7.814727903251179
CHI2_95 = 5.991464547107979


@pytest.fixture(scope="session")
def ref_params() -> HestonParams:
    """The reference parameter point used throughout the numeric tests."""
    return HestonParams(r=0.05, kappa=5.07, theta=0.0457, sigma=0.48, rho=-0.767)


@pytest.fixture(scope="session")
def ref_cov() -> np.ndarray:
    return np.diag([2.5e-5, 0.25, 1e-4])


@pytest.fixture(scope="session")
def ref_ellipse(ref_params, ref_cov) -> UncertaintyEllipse:
    return UncertaintyEllipse(
        center=ControlVector(ref_params.r, ref_params.kappa, ref_params.theta),
        covariance=ref_cov,
        chi=CHI3_95,
    )
