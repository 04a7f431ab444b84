"""Numerical laboratory for gradient descent at the edge of stability on deep scalar factorisation."""

from .analysis import (
    RateFit,
    RateModel,
    RegimeReport,
    TheoremCheck,
    check_descent,
    check_perp_bounds,
    check_suboptimality,
    detect_cycle2,
    detect_tau,
    fit_rate,
    summarize,
)
from .dynamics import (
    Regime,
    RegimeSpec,
    RunConfig,
    Trajectory,
    classify,
    flip_step,
    gd_orbit,
    gd_step,
    normal_form_par_predict,
    normal_form_perp_predict,
    parabolic_step,
    phi_coordinate,
    run,
)
from .manifold import (
    GeometryConstants,
    TubeCoords,
    geometry_constants,
    project,
    riem_grad_lambda,
    riem_hess_lambda,
    sample_near,
    tube_coords,
)
from .problem import (
    FactorisationProblem,
    c_coeff,
    deriv_tensor_contract,
    dl3_n,
    dl4_n,
    f,
    finite_diff_oracle,
    grad_f,
    grad_loss,
    loss,
    normal,
    sharpness,
)

__version__ = "0.1.0"
