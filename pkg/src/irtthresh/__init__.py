"""Thresholds models for tests with mixed item formats.

Each item i has a nondecreasing difficulty function delta_i on its response
support and P(Y_pi > y) = F(theta_p - delta_i(y)) for a fixed response
function F (normal or logistic). Binary, ordinal, count and continuous items
share one latent scale.
"""

from .curves import CurveKind, CurveTable, difficulty_curve, ic_curve, pt_curve, write_curves_csv
from .data import (
    Binary,
    Continuous,
    Count,
    Identification,
    ItemResponseMatrix,
    ItemSpec,
    ModelSpec,
    OrderedCategorical,
    SlopeMode,
    TreatAs,
    build_matrix,
    ingest_csv,
    rescale_to_unit_interval,
)
from .difficulty import (
    BSpline,
    BSplineBasis,
    DifficultyFamily,
    FreeOrdinal,
    InverseCdf,
    Linear,
    Log,
    LogP1,
    build_bspline_basis,
)
from .errors import *  # noqa: F401,F403
from .estimation import FitOptions, FitResult, LrTestResult, fit, lr_test, standard_errors
from .likelihood import (
    ParameterLayout,
    ParameterVector,
    build_layout,
    exceedance,
    log_density_continuous,
    log_density_discrete,
    marginal_log_likelihood,
    score,
    shape_penalty,
)
from .report import load_fit_report
from .response import ResponseFunctionKind
from .scoring import PersonScore, posterior_density, posterior_mean, posterior_mode, score_persons
from .simulation import (
    RecoveryReport,
    SimulationScenario,
    linear_recovery_scenario,
    load_scenario,
    recovery_study,
    sample_response,
    sample_responses,
    simulate_dataset,
)

__version__ = "0.1.0"
