"""Iterative on-policy preference alignment with Rao-Kupper sample weighting, at desk scale."""

from .alignment import TrainingConfig, paper_recipe, run_iterative_alignment
from .data import OracleJudge, PromptRecord, generate_task
from .policy import FeatureMap, Policy, init_policy
from .preference import RaoKupperModel, sample_weight

__version__ = "0.1.0"

__all__ = [
    "FeatureMap", "Policy", "init_policy", "RaoKupperModel", "sample_weight", "OracleJudge", "PromptRecord",
    "generate_task", "TrainingConfig", "paper_recipe", "run_iterative_alignment",
]
