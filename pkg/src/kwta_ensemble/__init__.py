"""Ensembles of MLP sub-networks: averaging, cooperative training,
mixture-of-experts, and a k-winners-take-all combination layer."""

__version__ = "0.1.0"

from .ensemble import EnsembleModel, Family, build_model, load_model, save_model
from .estimators import (
    CooperativeEnsembleClassifier,
    IndependentEnsembleClassifier,
    KwtaEnsembleClassifier,
    MixtureOfExpertsClassifier,
)
from .train import RunRecord, TrainConfig, run_grid, train_one

__all__ = [
    "__version__",
    "EnsembleModel",
    "Family",
    "build_model",
    "load_model",
    "save_model",
    "IndependentEnsembleClassifier",
    "CooperativeEnsembleClassifier",
    "MixtureOfExpertsClassifier",
    "KwtaEnsembleClassifier",
    "RunRecord",
    "TrainConfig",
    "run_grid",
    "train_one",
]
