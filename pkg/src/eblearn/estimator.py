"""Scikit-learn compatible classifier around the training loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datasets import DATASETS, Dataset
from .relaxation import PhaseSpec, Scheme, initial_state, relax
from .training import TrainConfig, fit, transform_for

__all__ = ["EBLClassifier"]


class EBLClassifier(ClassifierMixin, BaseEstimator):
    """Convolutional Hopfield network trained with an energy-based learning rule.

    Parameters mirror :class:`~eblearn.training.TrainConfig`; ``dataset``
    selects the input channels, normalisation, padding and the number of
    output units. ``X`` holds raw pixel intensities in ``[0, 255]`` with
    shape ``(n, C, H, W)`` or ``(n, H, W)``.

    Attributes
    ----------
    classes_ : ndarray
        Sorted class labels seen in ``fit``.
    params_ : Parameters
        Trained network parameters.
    history_ : list of EpochMetrics
        Per-epoch training metrics.
    """

    def __init__(self, rule="c-ep", beta=0.25, T=60, K=15,
                 lrs=(0.0625, 0.0375, 0.025, 0.02, 0.0125), gains=(0.5, 0.5, 0.5, 0.5, 0.5),
                 momentum=0.9, weight_decay=3e-4, batch_size=128, epochs=100, t_max=100,
                 lr_min=2e-6, channels=(128, 256, 512, 512), dataset="mnist", precision="f32",
                 scheme="async", seed=0, workers=1):
        self.rule = rule
        self.beta = beta
        self.T = T
        self.K = K
        self.lrs = lrs
        self.gains = gains
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.t_max = t_max
        self.lr_min = lr_min
        self.channels = channels
        self.dataset = dataset
        self.precision = precision
        self.scheme = scheme
        self.seed = seed
        self.workers = workers

    def _config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.get_params())

    def _images(self, X) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim == 3:
            X = X[:, None]
        if X.ndim != 4:
            raise ValueError(f"expected images of shape (n, C, H, W) or (n, H, W), got {X.shape}")
        if X.min() < 0 or X.max() > 255:
            raise ValueError("pixel values must lie in [0, 255]")
        return X

    def fit(self, X, y):
        """Train from scratch on raw images ``X`` and labels ``y``."""
        config = self._config()
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        X = self._images(X)
        self.classes_, codes = np.unique(y, return_inverse=True)
        n_out = DATASETS[config.dataset][1]
        if len(self.classes_) > n_out:
            raise ValueError(f"{len(self.classes_)} classes but {config.dataset} networks have "
                             f"{n_out} outputs")
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        data = Dataset(np.rint(X).astype(np.uint8), codes, config.dataset)
        self.params_, self.history_ = fit(config, data)
        return self

    def decision_function(self, X) -> np.ndarray:
        """Free-phase output units for the seen classes, shape ``(n, n_classes)``."""
        check_is_fitted(self, "params_")
        config = self._config()
        X = self._images(X)
        if int(np.prod(X.shape[1:])) != self.n_features_in_:
            raise ValueError(f"X has {int(np.prod(X.shape[1:]))} features per sample, "
                             f"expected {self.n_features_in_}")
        transform = transform_for(config.dataset, config.storage_dtype)
        params = self.params_.astype(config.storage_dtype)
        outputs = []
        for start in range(0, len(X), 256):
            x = transform(np.rint(X[start:start + 256]).astype(np.uint8))
            state = relax(params, initial_state(params, x),
                          PhaseSpec.free(config.T, Scheme(config.scheme))).state
            outputs.append(state.output.astype(np.float64))
        return np.concatenate(outputs)[:, :len(self.classes_)]

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
