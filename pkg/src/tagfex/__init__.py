"""Task-agnostic guided feature expansion for class-incremental learning."""

from .analysis import compute_metrics, cka_report, linear_cka, memory_budget
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, ablation_matrix, load_config
from .datastream import (CollisionSpec, RehearsalMemory, SplitSpec, TaskDataset,
                         generate_collision_dataset, herding_select, make_splits,
                         rebalance_memory, two_view_augment)
from .estimator import DERClassifier, TagFexClassifier
from .experiment import analyze, prune_run, run
from .merge_attention import MergeAttention, merge_forward
from .pruning import apply_plan, build_plan, filter_scores
from .task_agnostic import infonce

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "CollisionSpec", "DERClassifier", "ExperimentConfig", "MergeAttention", "RehearsalMemory",
    "SplitSpec", "TagFexClassifier", "TaskDataset", "apply_plan", "build_plan", "cka_report",
    "compute_metrics", "filter_scores", "generate_collision_dataset", "herding_select",
    "ablation_matrix", "analyze", "infonce", "linear_cka", "load_checkpoint", "load_config", "make_splits", "memory_budget",
    "merge_forward", "prune_run", "rebalance_memory", "run", "save_checkpoint", "two_view_augment",
]
