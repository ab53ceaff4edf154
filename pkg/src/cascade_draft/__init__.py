"""Speculative decoding with a cascaded single-pass drafter and backbone draft trees."""

from .config import RunConfig
from .draft_tree import DraftTree, build_backbone_tree, tree_attention_mask
from .drafter import CascadeDrafter, DrafterConfig
from .engine import GenerationConfig, GenerationResult, compute_speedup, compute_tau, generate, generate_vanilla
from .target_model import ModelConfig, TargetModel
from .training import TrainConfig, generate_training_data, train_drafter
from .verification import verify_greedy, verify_stochastic

__version__ = "0.1.0"

__all__ = [
    "CascadeDrafter", "DraftTree", "DrafterConfig", "GenerationConfig", "GenerationResult", "ModelConfig",
    "RunConfig", "TargetModel", "TrainConfig", "build_backbone_tree", "compute_speedup", "compute_tau",
    "generate", "generate_training_data", "generate_vanilla", "train_drafter", "tree_attention_mask",
    "verify_greedy", "verify_stochastic",
]
