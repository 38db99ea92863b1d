"""Cross-dataset adaptation for multiple-choice visual question answering.

Residual feature transforms are learned on a target dataset's question and
answer embeddings so that they match the source dataset's distribution
(adversarially, through a domain discriminator) while staying well-scored by
a source model that sees only partial information.
"""

from .adaptation import AdaptConfig, AdaptSetting, ResidualTransform, coral_align, train_adaptation
from .data import SyntheticBiasSpec, Triplet, VqaDataset, generate_synthetic_pair, load_dataset
from .evaluation import mc_accuracy, run_comparison, vqa10_accuracy
from .probe import run_probe
from .scorer import InputMode, ScorerModel, ScorerTrainConfig, train_scorer

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig",
    "AdaptSetting",
    "InputMode",
    "ResidualTransform",
    "ScorerModel",
    "ScorerTrainConfig",
    "SyntheticBiasSpec",
    "Triplet",
    "VqaDataset",
    "coral_align",
    "generate_synthetic_pair",
    "load_dataset",
    "mc_accuracy",
    "run_comparison",
    "run_probe",
    "train_adaptation",
    "train_scorer",
    "vqa10_accuracy",
]
