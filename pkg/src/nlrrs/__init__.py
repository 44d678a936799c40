"""Regression quantiles, regression rank scores and rank-score tests for
nonlinear regression models with an intercept."""

from .errors import (
    AllRestartsDivergedError,
    DegenerateActiveSetError,
    DomainError,
    InfeasibleError,
    McFailureRateError,
    NlrrsError,
    RankDeficiencyError,
    SimplexNumericalError,
    SingularCovarianceError,
)
from .lp import solve_box_lp
from .models import (
    Dataset,
    DesignEval,
    ModelSpec,
    RegularityReport,
    check_gradient,
    check_regularity,
    eval_design,
    eval_g,
    make_model,
)
from .quantile import (
    LinearQuantileFit,
    QuantileFit,
    SolverOptions,
    check_loss,
    fit_quantile,
    objective,
    solve_linear_quantile,
)
from .ranktests import (
    ScoreFunction,
    TestResult,
    a_phi_squared,
    asymptotic_power,
    chi_square_quantile,
    chi_square_sf,
    custom_score,
    median_score,
    noncentral_chi_square_sf,
    noncentrality,
    normal_quantile,
    normal_sf,
    projection_residual,
    score_integrals,
    statistic_Tn,
    statistic_Tn_star,
    truncate_phi,
    validate_z,
    wilcoxon_score,
)
from .scores import (
    RankScoreGrid,
    boundary_extension,
    format_grid,
    hajek_score,
    parse_grid_text,
    rank_score_grid,
    rank_scores_at,
    ranks_of,
    verify_duality,
)
from .simulate import (
    ErrorLaw,
    LadderReport,
    McReport,
    PowerCurve,
    ScenarioConfig,
    check_bahadur,
    check_hajek_equivalence,
    generate_dataset,
    monte_carlo_power,
    monte_carlo_size,
    null_design_covariance,
    psi_alpha,
)

__version__ = "0.1.0"
