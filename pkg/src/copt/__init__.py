"""Counterfactual off-policy adversarial training for dialogue generation."""

from .estimator import COPTDialogueModel
from .training import TrainConfig, analyze_rewards, counterfactual_rollout, train_adversarial

__version__ = "0.1.0"

__all__ = ["COPTDialogueModel", "TrainConfig", "analyze_rewards", "counterfactual_rollout",
           "train_adversarial", "__version__"]
