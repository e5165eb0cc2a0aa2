"""Scikit-learn estimator facade over the model and trainer.

Lets the classifier drop into sklearn pipelines, grid search, and
cross-validation: hyperparameters live in ``__init__`` verbatim, fitted
state lands in trailing-underscore attributes, and ``get_params`` /
``set_params`` come from ``BaseEstimator``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .autodiff import softmax, Tensor
from .exceptions import ContractError
from .model import ModelConfig, forward, init_params
from .train import TrainConfig, fit_patches, predict_patches


def check_patch_array(X, patch_size: int | None = None) -> np.ndarray:
    """Validate an (n, s, s, bands) stack of square, odd-sized patches."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4:
        raise ContractError(f"expected patches of shape (n, s, s, bands), got {X.shape}")
    n, s1, s2, _ = X.shape
    if n == 0:
        raise ContractError("empty patch array")
    if s1 != s2 or s1 % 2 == 0:
        raise ContractError(f"patches must be square with odd side, got {s1}x{s2}")
    if patch_size is not None and s1 != patch_size:
        raise ContractError(f"patch side {s1} != configured patch_size {patch_size}")
    if not np.isfinite(X).all():
        raise ContractError("patches contain non-finite values")
    return X


class MultiscaleFormerClassifier(BaseEstimator, ClassifierMixin):
    """Pixel classifier over hyperspectral patches.

    Parameters
    ----------
    spectral_neighbors : int
        Adjacent bands bundled into one spectral token.
    num_layers : int
        Stacked inner/outer transformer layers.
    inner_dim, embed_dim : int
        Widths of the inner (spatial token) and outer (spectral token)
        streams.
    heads_inner, heads_outer : int
        Attention head counts; must divide the matching width.
    neighborhood_scales, filter_sizes : tuple of odd ints
        The (scale, filter) grid that defines the inner tokens; scales
        must not exceed the patch side seen in ``fit``.
    use_multiscale : bool
        When False, band groups are embedded by a single linear map and
        only the outer stream runs.
    use_fusion : bool
        Enable the cross-layer two-weight blending from layer 3 on.
    epochs, batch_size, learning_rate, weight_decay : training loop knobs.
    seed : int
        Drives initialization and batch shuffling.

    Attributes
    ----------
    classes_ : ndarray
        Class labels seen in ``fit``, in sorted order.
    params_ : dict
        Trained parameter tensors keyed by canonical name.
    model_config_ : ModelConfig
        The architecture resolved against the training data.
    history_ : list
        Per-epoch loss/accuracy records.
    """

    def __init__(
        self,
        spectral_neighbors: int = 5,
        num_layers: int = 5,
        inner_dim: int = 64,
        embed_dim: int = 64,
        heads_inner: int = 4,
        heads_outer: int = 4,
        neighborhood_scales: tuple = (3, 5, 7, 9),
        filter_sizes: tuple = (3, 5, 7),
        use_multiscale: bool = True,
        use_fusion: bool = True,
        epochs: int = 300,
        batch_size: int = 64,
        learning_rate: float = 5e-4,
        weight_decay: float = 5e-3,
        seed: int = 0,
    ):
        self.spectral_neighbors = spectral_neighbors
        self.num_layers = num_layers
        self.inner_dim = inner_dim
        self.embed_dim = embed_dim
        self.heads_inner = heads_inner
        self.heads_outer = heads_outer
        self.neighborhood_scales = neighborhood_scales
        self.filter_sizes = filter_sizes
        self.use_multiscale = use_multiscale
        self.use_fusion = use_fusion
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.seed = seed

    def fit(self, X, y):
        X = check_patch_array(X)
        y = np.asarray(y).ravel()
        if len(y) != len(X):
            raise ContractError(f"{len(X)} patches but {len(y)} labels")
        self.classes_ = np.unique(y)
        index_of = {label: i + 1 for i, label in enumerate(self.classes_)}
        encoded = np.asarray([index_of[label] for label in y], dtype=np.int64)

        self.model_config_ = ModelConfig(
            num_classes=len(self.classes_),
            bands=X.shape[3],
            patch_size=X.shape[1],
            spectral_neighbors=self.spectral_neighbors,
            num_layers=self.num_layers,
            inner_dim=self.inner_dim,
            embed_dim=self.embed_dim,
            heads_inner=self.heads_inner,
            heads_outer=self.heads_outer,
            neighborhood_scales=tuple(self.neighborhood_scales),
            filter_sizes=tuple(self.filter_sizes),
            use_multiscale=self.use_multiscale,
            use_fusion=self.use_fusion,
        )
        train_config = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            seed=self.seed,
        )
        self.params_ = init_params(self.model_config_, self.seed)
        self.history_ = fit_patches(self.params_, X, encoded, self.model_config_, train_config)
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("this MultiscaleFormerClassifier instance is not fitted yet")

    def predict(self, X):
        self._check_fitted()
        X = check_patch_array(X, self.model_config_.patch_size)
        encoded = predict_patches(self.params_, self.model_config_, X)
        return self.classes_[encoded - 1]

    def predict_proba(self, X):
        self._check_fitted()
        X = check_patch_array(X, self.model_config_.patch_size)
        probs = np.empty((len(X), len(self.classes_)), dtype=np.float64)
        for i, patch in enumerate(X):
            logits = forward(patch, self.params_, self.model_config_)
            probs[i] = softmax(logits, axis=0).data
        return probs
