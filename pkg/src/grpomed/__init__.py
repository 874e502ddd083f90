"""Group-relative policy optimization with multi-channel fusion and hybrid GA/MCTS treatment search."""

from .cohort_env import CohortConfig, generate_cohort
from .config import ExperimentConfig, load_config
from .embedding_cluster import kmeans
from .errors import CheckInvalid, ConfigError, ContractViolation, DivergenceError, UsageError
from .fusion_encoder import fuse, init_fusion
from .grpo_optimizer import GrpoConfig, grpo_objective, train
from .strategy_search import GaConfig, MctsConfig, hybrid_search

__version__ = "0.1.0"

__all__ = [
    "CheckInvalid", "CohortConfig", "ConfigError", "ContractViolation", "DivergenceError",
    "ExperimentConfig", "GaConfig", "GrpoConfig", "MctsConfig", "UsageError",
    "fuse", "generate_cohort", "grpo_objective", "hybrid_search", "init_fusion",
    "kmeans", "load_config", "train",
]
