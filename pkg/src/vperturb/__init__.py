"""Virtual-perturbation diagnostics for SGD trajectories.

Structured Gaussian covariances, history-predictable covariance schedules,
trajectory recording, Monte Carlo proxy estimation, bound assembly, and
brute-force numerical oracles, with a CLI tying them together.
"""

__version__ = "0.1.0"

from .errors import (
    AdmissibilityError,
    ConfigError,
    DomainError,
    FormatError,
    InputError,
    RunError,
    SequencingError,
    VPerturbError,
)
from .gauss import (
    Covariance,
    Dense,
    Diagonal,
    GaussianMoments,
    Isotropic,
    LowRankRidge,
    comparability_kappa,
    cov_compare_cost,
    gaussian_kl,
    third_moment_bound,
)
from .schedule import ReferenceSpec, ScheduleSpec, replay_schedule
from .train import Trajectory, build_dataset, build_model, load_trajectory, run_sgd, save_trajectory
from .proxies import ProxyOptions, ProxyReport, run_algorithm1
from .bound import (
    BoundInputs,
    BoundReport,
    comparable_bound,
    curvature_expansion,
    general_bound,
    smoothness_penalty,
    synchronized_bound,
)

__all__ = [
    "__version__",
    "VPerturbError",
    "InputError",
    "DomainError",
    "SequencingError",
    "AdmissibilityError",
    "FormatError",
    "RunError",
    "ConfigError",
    "Covariance",
    "Isotropic",
    "Diagonal",
    "Dense",
    "LowRankRidge",
    "GaussianMoments",
    "gaussian_kl",
    "cov_compare_cost",
    "third_moment_bound",
    "comparability_kappa",
    "ScheduleSpec",
    "ReferenceSpec",
    "replay_schedule",
    "Trajectory",
    "run_sgd",
    "build_model",
    "build_dataset",
    "save_trajectory",
    "load_trajectory",
    "ProxyOptions",
    "ProxyReport",
    "run_algorithm1",
    "BoundInputs",
    "BoundReport",
    "general_bound",
    "synchronized_bound",
    "comparable_bound",
    "smoothness_penalty",
    "curvature_expansion",
]
