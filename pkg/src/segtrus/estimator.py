"""scikit-learn compatible wrapper around the segmentation network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import loss_metrics as LM
from .data import TRAIN, Dataset, Sample
from .errors import DataError, ShapeError
from .model import NetworkConfig
from .train import TrainConfig, predict_proba, run_training


def check_images(X):
    """Validate an image batch and return it as float64 (N, 1, H, W)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] != 1:
        raise ShapeError(f"expected images of shape (N, H, W) or (N, 1, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ShapeError("image batch is empty")
    if not np.isfinite(X).all() or X.min() < 0.0 or X.max() > 1.0:
        raise DataError("image values must be finite and lie in [0, 1]")
    return X


def check_masks(y, X):
    """Validate binary masks against an already checked image batch."""
    y = np.asarray(y)
    if y.ndim == 4 and y.shape[1] == 1:
        y = y[:, 0]
    if y.shape != (X.shape[0], *X.shape[2:]):
        raise ShapeError(f"masks have shape {y.shape}, images {X.shape}")
    if not ((y == 0) | (y == 1)).all():
        raise DataError("masks must be binary")
    return y.astype(np.uint8)


class ResidualSegmenter(BaseEstimator):
    """Binary segmentation network with neighbouring and remote residual connections.

    Every sample passed to ``fit`` is used for training. ``predict`` returns
    (N, H, W) binary masks, ``predict_proba`` the (N, 2, H, W) class
    probabilities, and ``score`` the mean per-image Dice coefficient.
    """

    def __init__(self, widths=(64, 128, 256, 512, 512), conv_counts=(2, 2, 4, 4, 4),
                 nrc_enabled=True, rrc_mode="indices", learning_rate=0.0005, momentum=0.9,
                 batch_size=4, epochs=30, random_state=0):
        self.widths = widths
        self.conv_counts = conv_counts
        self.nrc_enabled = nrc_enabled
        self.rrc_mode = rrc_mode
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def _network_config(self, input_size):
        return NetworkConfig(in_channels=1, input_size=input_size, widths=tuple(self.widths),
                             conv_counts=tuple(self.conv_counts), nrc_enabled=self.nrc_enabled,
                             rrc_mode=self.rrc_mode)

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, X)
        cfg = TrainConfig(learning_rate=self.learning_rate, momentum=self.momentum,
                          batch_size=self.batch_size, epochs=self.epochs,
                          seed=int(self.random_state or 0),
                          network=self._network_config(X.shape[2:]))
        samples = [Sample(image=X[i, 0], mask=y[i], id=f"{i:06d}") for i in range(len(X))]
        ds = Dataset(samples, split={s.id: TRAIN for s in samples})
        self.checkpoint_, self.history_ = run_training(ds, cfg)
        self.input_shape_ = X.shape[2:]
        return self

    @classmethod
    def from_checkpoint(cls, checkpoint):
        """Wrap an already trained :class:`segtrus.train.Checkpoint`."""
        cfg = checkpoint.config
        est = cls(widths=cfg.widths, conv_counts=cfg.conv_counts, nrc_enabled=cfg.nrc_enabled,
                  rrc_mode=cfg.rrc_mode)
        est.checkpoint_ = checkpoint
        est.history_ = []
        est.input_shape_ = cfg.input_size
        return est

    def predict_proba(self, X):
        check_is_fitted(self, "checkpoint_")
        X = check_images(X)
        if X.shape[2:] != tuple(self.input_shape_):
            raise ShapeError(f"images are {X.shape[2:]}, estimator was fit on {self.input_shape_}")
        return predict_proba(self.checkpoint_, X)

    def predict(self, X):
        return LM.binarize(self.predict_proba(X))

    def score(self, X, y):
        X = check_images(X)
        y = check_masks(y, X)
        pred = self.predict(X)
        return LM.report_stats([LM.dsc(pred[i], y[i]) for i in range(len(y))]).average


__all__ = ["ResidualSegmenter", "check_images", "check_masks"]
