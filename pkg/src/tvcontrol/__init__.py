"""Online control of unknown time-varying linear systems.

Disturbance-action policies tuned by online gradient descent with memory,
sliding-window least-squares system estimation with Gaussian exploration,
change point detection, and a regret harness.
"""

from .errors import (
    ConfigurationError,
    ContractViolation,
    InsufficientDataError,
    SingularSystemError,
    UnsupportedCostError,
)
from .lds import (
    CostSpec,
    DisturbanceRealization,
    EpisodeTrace,
    MarkovOperator,
    SystemConfig,
    SystemPath,
    generate_disturbances,
    generate_system,
    markov_operator,
    natural_output,
    rollout,
    step,
)
from .dac import (
    DacParams,
    OcoConstants,
    TruncatedContext,
    compute_oco_constants,
    dac_control,
    grad_truncated_cost,
    ogd_step,
    project_dac,
    truncated_cost,
    truncated_output,
)
from .estimation import (
    ChangePointDetector,
    CpdEstimator,
    EstimatorConfig,
    PeriodicEstimator,
    compute_beta,
    cpd_check,
    cpd_threshold,
    ls_estimate,
    project_G,
)
from .controllers import ControllerSpec, build_controller
from .regret import best_dac_in_hindsight, counterfactual_rollout, fit_scaling_exponent, regret_series
from .harness import ExperimentConfig, export_csv, load_config, run_experiment, sweep

__version__ = "0.1.0"
