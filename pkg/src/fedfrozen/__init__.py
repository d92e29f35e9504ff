"""Federated training of a linear-attention regressor whose query/key kernel
is trained jointly for a warm-up phase and then frozen."""

from .algorithms import Method, MethodSpec, RoundRecord, TrainingResult, run_round, run_training
from .attention import AttentionParams, ModelDims, Shard, forward, gradient, regularized_loss
from .data import DataConfig, FederatedDataset, generate_dataset, init_params
from .diagnostics import comm_cost_ratio, profile, profile_gap
from .matrix_core import ConfigurationError, SeededRng

__all__ = [
    "Method",
    "MethodSpec",
    "RoundRecord",
    "TrainingResult",
    "run_round",
    "run_training",
    "AttentionParams",
    "ModelDims",
    "Shard",
    "forward",
    "gradient",
    "regularized_loss",
    "DataConfig",
    "FederatedDataset",
    "generate_dataset",
    "init_params",
    "comm_cost_ratio",
    "profile",
    "profile_gap",
    "ConfigurationError",
    "SeededRng",
]
