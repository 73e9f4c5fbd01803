"""Deterministic federated MoE simulator with routing-consistency weighting,
distribution-regularized local training, and semantic-aware expert
aggregation, plus FedAvg/FedProx baselines under one harness."""

from .harness import ExperimentConfig, RoundRecord, run_experiment
from .model import MoEConfig, ModelParams

__all__ = [
    "ExperimentConfig",
    "RoundRecord",
    "run_experiment",
    "MoEConfig",
    "ModelParams",
]
