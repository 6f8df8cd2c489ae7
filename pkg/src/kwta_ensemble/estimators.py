"""scikit-learn compatible classifiers for the four ensemble families.

Each classifier holds out ``validation_fraction`` of the training rows,
trains with the package's SGD loop, and keeps the parameters with the best
validation accuracy::

    >>> from kwta_ensemble import KwtaEnsembleClassifier
    >>> clf = KwtaEnsembleClassifier(n_subnets=3, delay=0, random_state=42)
    >>> clf.fit(X_train, y_train).score(X_test, y_test)  # doctest: +SKIP
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, check_random_state, validate_data

from .data import Dataset
from .ensemble import Family, build_model, forward
from .linalg import spawn_rngs
from .train import TrainConfig, _predict_chunks, fit_ensemble

__all__ = [
    "IndependentEnsembleClassifier",
    "CooperativeEnsembleClassifier",
    "MixtureOfExpertsClassifier",
    "KwtaEnsembleClassifier",
]


class _EnsembleClassifier(ClassifierMixin, BaseEstimator):
    _family: Family

    def _train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            family=self._family.value,
            M=self.n_subnets,
            d=getattr(self, "delay", 0),
            k_frac=getattr(self, "k_frac", 0.75),
            member_output=getattr(self, "member_output", "probs"),
            epochs=self.epochs,
            batch_size=self.batch_size,
            hidden_dim=self.hidden_units,
            lr_start=self.lr_start,
            lr_end=self.lr_end,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            schedule=self.schedule,
            seed=seed,
            reload_each_epoch=self.reload_each_epoch,
        )

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes_.size} class")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError(f"validation_fraction must lie in [0, 1), got {self.validation_fraction}")

        seed = int(check_random_state(self.random_state).randint(np.iinfo(np.int32).max))
        config = self._train_config(seed)
        split_rng, init_rng, shuffle_rng = spawn_rngs(seed, 3)

        n = X.shape[0]
        n_val = int(round(self.validation_fraction * n))
        n_val = min(n_val, n - 1)
        perm = split_rng.permutation(n)
        k = self.classes_.size
        train = Dataset(X[perm[n_val:]], y_enc[perm[n_val:]], k)
        val = Dataset(X[perm[:n_val]], y_enc[perm[:n_val]], k)

        self.model_ = build_model(
            self._family, X.shape[1], k, self.n_subnets, init_rng,
            hidden_dim=self.hidden_units, k_frac=config.k_frac, delay_epochs=config.d,
            member_output=config.member_output,
        )
        result = fit_ensemble(self.model_, train, val, config, shuffle_rng)
        self.history_ = result.curves
        self.best_epoch_ = result.best_val_epoch
        self.best_validation_score_ = result.best_val_accuracy
        self.n_iter_ = result.steps
        return self

    def predict_proba(self, X):
        check_is_fitted(self)
        X = validate_data(self, X, dtype=np.float64, reset=False)
        final, _ = _predict_chunks(self.model_, X)
        return final

    def predict(self, X):
        check_is_fitted(self)
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def subnet_proba(self, X) -> np.ndarray:
        """Class probabilities of every member, shape ``(n_subnets, n_samples, n_classes)``."""
        check_is_fitted(self)
        X = validate_data(self, X, dtype=np.float64, reset=False)
        _, members = _predict_chunks(self.model_, X)
        return members

    def gate_proba(self, X) -> np.ndarray:
        """Gate probabilities (mixture-of-experts only)."""
        check_is_fitted(self)
        if self._family is not Family.MOE:
            raise AttributeError("only the mixture-of-experts classifier has a gate")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return forward(self.model_, X).gate_probs


_COMMON_DOC = """
    Parameters
    ----------
    n_subnets : int, default=2
        Number of MLP sub-networks.
    hidden_units : int, default=100
        Hidden layer width of every sub-network (and of the gate).
    epochs : int, default=20
    batch_size : int, default=100
    lr_start, lr_end : float, default=0.1, 1e-4
        Learning rate at the first and last optimizer step.
    momentum : float, default=0.9
    weight_decay : float, default=1e-5
        L2 coefficient added to the gradient before the momentum update.
    schedule : {"exponential", "linear"}, default="exponential"
    validation_fraction : float, default=0.1
        Share of the training rows held out to pick the best epoch.
    reload_each_epoch : bool, default=False
        Reload the best parameters at the end of every non-improving epoch.
    random_state : int, RandomState or None
"""


class IndependentEnsembleClassifier(_EnsembleClassifier):
    __doc__ = "Sub-networks trained on their own losses, averaged at prediction time.\n" + _COMMON_DOC
    _family = Family.INDEPENDENT

    def __init__(self, n_subnets=2, hidden_units=100, epochs=20, batch_size=100, lr_start=0.1, lr_end=1e-4,
                 momentum=0.9, weight_decay=1e-5, schedule="exponential", validation_fraction=0.1,
                 reload_each_epoch=False, random_state=None):
        self.n_subnets = n_subnets
        self.hidden_units = hidden_units
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.validation_fraction = validation_fraction
        self.reload_each_epoch = reload_each_epoch
        self.random_state = random_state


class CooperativeEnsembleClassifier(IndependentEnsembleClassifier):
    __doc__ = "Sub-networks trained jointly on the loss of their averaged output.\n" + _COMMON_DOC
    _family = Family.COOPERATIVE


class MixtureOfExpertsClassifier(IndependentEnsembleClassifier):
    __doc__ = "Experts selected per sample by the arg max of a gating network.\n" + _COMMON_DOC
    _family = Family.MOE


class KwtaEnsembleClassifier(_EnsembleClassifier):
    __doc__ = (
        "Sub-network outputs mixed by an affine layer followed by k-winners-take-all.\n"
        + _COMMON_DOC
        + """    k_frac : float, default=0.75
        Fraction of class scores kept per sample (at least one).
    delay : int, default=0
        Epochs trained before the winners-take-all step is switched on.
    member_output : {"probs", "logits"}, default="probs"
        Whether members hand softmax probabilities or raw logits to the
        combining layer. Logits avoid stacking two softmaxes, which can
        stall short training runs.
"""
    )
    _family = Family.KWTA

    def __init__(self, n_subnets=2, hidden_units=100, epochs=20, batch_size=100, lr_start=0.1, lr_end=1e-4,
                 momentum=0.9, weight_decay=1e-5, schedule="exponential", validation_fraction=0.1,
                 reload_each_epoch=False, random_state=None, k_frac=0.75, delay=0,
                 member_output="probs"):
        self.n_subnets = n_subnets
        self.hidden_units = hidden_units
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.validation_fraction = validation_fraction
        self.reload_each_epoch = reload_each_epoch
        self.random_state = random_state
        self.k_frac = k_frac
        self.delay = delay
        self.member_output = member_output
