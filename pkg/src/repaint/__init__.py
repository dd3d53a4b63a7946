"""REPAINT policy transfer on a from-scratch numpy actor-critic."""

from ._validation import ContractError
from .approximator import (
    Categorical,
    DiagGaussian,
    Optimizer,
    PolicyNetwork,
    QNetwork,
    ValueNetwork,
    load_checkpoint,
    save_checkpoint,
)
from .envs import ENVIRONMENTS, TaskPair, TaskSpec, cosine_similarity, make_env, make_task, make_task_pair
from .estimators import PPOAgent, RepaintAgent
from .harness import (
    EvalRecord,
    ExperimentConfig,
    ExperimentReport,
    compare_selection_rules,
    compute_report,
    load_config,
    run_experiment,
    train_teacher,
)
from .ppo import ActorCritic, PpoConfig, ppo_iteration
from .rollout import GaeConfig, TrajectoryBuffer, collect, compute_gae, evaluate, gae
from .transfer import (
    AbsThreshold,
    BetaSchedule,
    Prioritized,
    QTransferConfig,
    TeacherPolicy,
    Threshold,
    TopFraction,
    TransferConfig,
    alternating_repaint_iteration,
    gradient_diagnostic,
    q_transfer_update,
    repaint_iteration,
    select_experiences,
    transfer_iteration,
)

__version__ = "0.1.0"

__all__ = [
    "AbsThreshold",
    "ActorCritic",
    "BetaSchedule",
    "Categorical",
    "ContractError",
    "DiagGaussian",
    "ENVIRONMENTS",
    "EvalRecord",
    "ExperimentConfig",
    "ExperimentReport",
    "GaeConfig",
    "Optimizer",
    "PPOAgent",
    "PolicyNetwork",
    "PpoConfig",
    "Prioritized",
    "QNetwork",
    "QTransferConfig",
    "RepaintAgent",
    "TaskPair",
    "TaskSpec",
    "TeacherPolicy",
    "Threshold",
    "TopFraction",
    "TrajectoryBuffer",
    "TransferConfig",
    "ValueNetwork",
    "alternating_repaint_iteration",
    "collect",
    "compare_selection_rules",
    "compute_gae",
    "compute_report",
    "cosine_similarity",
    "evaluate",
    "gae",
    "gradient_diagnostic",
    "load_checkpoint",
    "load_config",
    "make_env",
    "make_task",
    "make_task_pair",
    "ppo_iteration",
    "q_transfer_update",
    "repaint_iteration",
    "run_experiment",
    "save_checkpoint",
    "select_experiences",
    "train_teacher",
    "transfer_iteration",
]
