"""Federated continual learning of decomposed CNN text classifiers with selective adapter transfer."""

from .client import Client, TrainConfig
from .data import EmbeddingTable, TaskDataset, non_iid_split
from .evaluation import ExperimentResult, evaluate_all, micro_accuracy
from .federation import FederationConfig, run
from .model import ModelConfig
from .server import SITConfig

__all__ = [
    "Client", "TrainConfig", "EmbeddingTable", "TaskDataset", "non_iid_split",
    "ExperimentResult", "evaluate_all", "micro_accuracy", "FederationConfig", "run",
    "ModelConfig", "SITConfig",
]
__version__ = "0.1.0"
