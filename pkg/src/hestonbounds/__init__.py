"""Conservative European option pricing under Heston parameter uncertainty.

The package prices calls three ways: the deterministic semi-closed formula,
min/max of that formula over an elliptical parameter uncertainty set, and the
dynamically optimised value process solved backwards by regression Monte
Carlo. An estimation module builds the uncertainty set from realized-variance
data, and a CLI wires it all into an estimate -> bounds -> report pipeline.
"""

from .model import (
    ControlVector,
    HestonParams,
    ParamMapMode,
    UncertaintyEllipse,
    controlled_drift,
    in_uncertainty_set,
    novikov_sufficient_check,
)
from .analytic import (
    OptionSpec,
    PriceInterval,
    bs_price,
    formula_optimal_bounds,
    heston_price,
    implied_vol,
    to_zero_dividend_price,
)
from .simulate import PathBundle, TimeGrid, downsample, simulate_heston
from .regression import MarsFit, knn_fit_predict, mars_fit, mars_gradient, mars_predict
from .bsde import (
    BsdeScheme,
    BsdeSolution,
    CallPayoff,
    Direction,
    DriverContext,
    ExtraPredictor,
    IdentityPayoff,
    KnnSpec,
    MarsSpec,
    SchemeBase,
    SimConfig,
    ZSource,
    alpha_effect,
    driver_f,
    n_vector,
    optimal_driver,
    pricing_bounds,
    solution_summary_row,
    solve_bsde,
)
from .estimate import (
    EstimationResult,
    VarianceSeries,
    confidence_ellipse,
    decimate,
    euler_loglik,
    exact_loglik,
    exact_moments,
    fit_mle,
    realized_correlation,
    realized_variance,
)

__version__ = "0.1.0"
