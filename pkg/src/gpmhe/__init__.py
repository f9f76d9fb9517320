"""GP-based moving-horizon estimation with robust-stability error bounds.

Learn a nonlinear state-space model from offline trajectory data with
per-component Gaussian processes, estimate states online with a moving-
horizon estimator whose dynamics and cost weights come from the GP posterior,
and evaluate deterministic and probabilistic estimation-error bounds.
"""

from .backend import backend_name
from .bounds import (
    DetectabilityConfig,
    ProbBoundConfig,
    ProbBoundResult,
    StabilityConstants,
    beta,
    covering_number,
    error_bound_trajectory,
    joint_probability,
    max_model_mismatch,
    minimal_horizon,
    probabilistic_bound_trajectory,
    probabilistic_mismatch_bound,
    stability_constants,
)
from .dynamics import NoiseSpec, Trajectory, TrueSystem, batch_reactor, simulate
from .errors import (
    ConfigurationError,
    ContractViolationError,
    GpMheError,
    NumericalError,
)
from .gp import (
    Dataset,
    GpOptimizerOptions,
    Hyperparameters,
    TrainedGp,
    fit,
    gram_matrix,
    kernel_eval,
    log_marginal_likelihood,
    optimize_hyperparameters,
    posterior_mean,
    posterior_mean_grad,
    posterior_var,
)
from .mhe import (
    EstimatorState,
    ExactModelInterface,
    MheConfig,
    MheSolution,
    ModelInterface,
    SolverOptions,
    cost,
    estimator_step,
    solve_window,
)
from .model import (
    ExtremalWeights,
    GpModelInterface,
    GpStateSpaceModel,
    extremal_weights,
    load_model,
    predict_output,
    predict_state,
    save_model,
    train_state_space_model,
    weight_q,
    weight_r,
)

__version__ = "0.1.0"
