"""scikit-learn compatible front ends.

``MappingNetworkClassifier`` and ``MappingNetworkRegressor`` train a dense
target network (``n_features -> hidden... -> outputs``) whose parameters
are generated from a small latent vector.  ``WeightManifoldPCA`` is a
transformer over parameter-snapshot matrices.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import tensor as T
from .data import Dataset
from .probe import pca_matrix
from .trainer import train


class _MappingBase(BaseEstimator):
    def __init__(self, hidden_layer_sizes=(64,), latent_dim=16, mode="slvt", alpha=0.1, activation="tanh",
                 loss_terms=("stab", "smooth", "align"), noise_std=0.01, learning_rate=0.01, epochs=20,
                 batch_size=64, target_rms=0.1, baseline=False, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.latent_dim = latent_dim
        self.mode = mode
        self.alpha = alpha
        self.activation = activation
        self.loss_terms = loss_terms
        self.noise_std = noise_std
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.target_rms = target_rms
        self.baseline = baseline
        self.random_state = random_state

    def _config(self, n_in: int, n_out: int) -> dict:
        seed = int(self.random_state or 0)
        sizes = [n_in, *[int(h) for h in self.hidden_layer_sizes], n_out]
        return {
            "mode": "baseline" if self.baseline else self.mode,
            "arch": {"kind": "mlp", "hyper": {"sizes": sizes}},
            "mapping": {"d": int(self.latent_dim), "alpha": float(self.alpha), "activation": self.activation,
                        "target_rms": float(self.target_rms)},
            "loss": {"mask": list(self.loss_terms), "sigma": float(self.noise_std)},
            "optim": {"lr": float(self.learning_rate)},
            "train": {"epochs": int(self.epochs), "batch_size": int(self.batch_size), "eval_train": False,
                      "audit_steps": [0]},
            "seeds": {"init": seed, "data": seed, "noise": seed},
            "data": {"source": "synth"},
        }

    def _fit(self, X, y, task):
        self.n_features_in_ = X.shape[1]
        n_out = y.shape[1] if task == "regression" else len(self.classes_)
        cfg = self._config(X.shape[1], n_out)
        ds = Dataset({"train": (X, y)}, task)
        self.result_ = train(cfg, ds)
        self.model_ = self.result_.model
        self.n_trainable_ = int(self.result_.meta["trainable_count"])
        self.history_ = self.result_.metrics
        return self

    def _raw(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        params = [T.Tensor._wrap(p) for p in self.model_.inference_params()]
        return self.model_.forward(params, T.Tensor._wrap(X)).data


class MappingNetworkClassifier(ClassifierMixin, _MappingBase):
    """Dense classifier trained through a latent-to-parameter generator.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
        Hidden widths of the target network.
    latent_dim : int
        Length of the trainable latent vector (total budget in layer-wise mode).
    mode : {"slvt", "lwt"}
        One latent for all parameters, or one per layer.
    baseline : bool
        Train the target parameters directly instead (for comparisons).

    Attributes
    ----------
    classes_ : ndarray
    n_trainable_ : int
        Scalars that received gradient updates.
    """

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float32)
        self.classes_, codes = np.unique(y, return_inverse=True)
        return self._fit(X, codes.astype(np.int64), "classification")

    def predict_proba(self, X):
        z = self._raw(X).astype(np.float64)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        raw = self._raw(X)
        return self.classes_[np.argmax(raw, axis=1)]


class MappingNetworkRegressor(RegressorMixin, _MappingBase):
    """Dense regressor trained through a latent-to-parameter generator (MSE loss)."""

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float32, multi_output=True, y_numeric=True)
        self._single = y.ndim == 1
        y2 = (y.reshape(-1, 1) if self._single else y).astype(np.float32)
        return self._fit(X, y2, "regression")

    def predict(self, X):
        out = self._raw(X)
        return out[:, 0] if self._single else out


class WeightManifoldPCA(TransformerMixin, BaseEstimator):
    """PCA of parameter snapshots (rows are snapshots).

    Uses the Gram-matrix route for up to 512 snapshots and a thin SVD
    beyond, with the largest-magnitude loading of every component positive.
    """

    def __init__(self, n_components=2, method="auto"):
        self.n_components = n_components
        self.method = method

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        res = pca_matrix(X, self.n_components, self.method)
        self.components_ = res.components
        self.explained_variance_ratio_ = res.ratios
        self.singular_values_ = res.singular_values
        self.mean_ = res.mean
        self.n_features_in_ = X.shape[1]
        self.embedding_ = res.projections
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        return (X - self.mean_) @ self.components_.T

    def fit_transform(self, X, y=None):
        return self.fit(X).embedding_
