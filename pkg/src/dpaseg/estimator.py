"""scikit-learn style wrapper around pre-training plus adaptation."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import DomainSet, RasterScene
from .errors import DataError
from .tensor import no_grad, softmax_channels
from .trainer import TrainConfig, adapt, pretrain_source, source_weights
from .unet import MicroUNet, UNetConfig, predict_classes


def check_bands(X, in_channels=None, multiple=1):
    """Validate an (n, c, h, w) band stack in [0, 1]; returns a float64 array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise DataError(f"expected bands of shape (n, c, h, w), got {X.shape}")
    if X.shape[0] == 0:
        raise DataError("no tiles given")
    if not np.isfinite(X).all():
        raise DataError("bands contain NaN or Inf")
    if X.min() < 0.0 or X.max() > 1.0:
        raise DataError("band values must lie in [0, 1]")
    if in_channels is not None and X.shape[1] != in_channels:
        raise DataError(f"expected {in_channels} bands, got {X.shape[1]}")
    if X.shape[2] % multiple or X.shape[3] % multiple:
        raise DataError(f"tile extents {X.shape[2:]} must be multiples of {multiple}")
    return X


def check_label_maps(y, X, num_classes):
    """Validate (n, h, w) integer maps with ids 0 (unlabeled) .. K matching ``X``."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise DataError(f"label maps {y.shape} do not match bands {X.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.array_equal(y, np.round(y)):
            raise DataError("label maps must hold integer class ids")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() > num_classes:
        raise DataError(f"label ids must lie in 0..{num_classes}")
    return y


class DPASegmenter(ClassifierMixin, BaseEstimator):
    """Pixel classifier: source pre-training, then optional DPA adaptation.

    ``fit(X, y)`` trains on labeled source tiles. Passing ``X_target`` adds
    the Siamese adaptation stage on those unlabeled tiles. Predictions are
    class ids 1..K per pixel.
    """

    def __init__(
        self,
        num_classes=24,
        depth=3,
        base_width=16,
        pretrain_epochs=30,
        adapt_epochs=20,
        batch_size=2,
        base_lr=1.5e-6,
        adapt_lr=5e-7,
        clip_norm=2e4,
        lam=0.5,
        val_fraction=0.0,
        seed=0,
    ):
        self.num_classes = num_classes
        self.depth = depth
        self.base_width = base_width
        self.pretrain_epochs = pretrain_epochs
        self.adapt_epochs = adapt_epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.adapt_lr = adapt_lr
        self.clip_norm = clip_norm
        self.lam = lam
        self.val_fraction = val_fraction
        self.seed = seed

    def _train_config(self, epochs, lr):
        return TrainConfig(
            epochs=epochs,
            batch_size=self.batch_size,
            base_lr=lr,
            clip_norm=self.clip_norm,
            lam=self.lam,
            val_fraction=self.val_fraction,
            seed=self.seed,
        )

    def fit(self, X, y, X_target=None):
        cfg = UNetConfig(4, self.num_classes, self.depth, self.base_width, self.seed)
        X = check_bands(X, cfg.in_channels, cfg.multiple)
        y = check_label_maps(y, X, self.num_classes)
        source = DomainSet([RasterScene(b, l, f"source_{i:05d}") for i, (b, l) in enumerate(zip(X, y))], "source")
        model = MicroUNet(cfg)
        weights = source_weights(source, self.num_classes)
        model, hist = pretrain_source(model, source, self._train_config(self.pretrain_epochs, self.base_lr), weights=weights)
        self.history_ = {"pretrain": hist.epochs}
        if X_target is not None:
            Xt = check_bands(X_target, cfg.in_channels, cfg.multiple)
            target = DomainSet([RasterScene(b, None, f"target_{i:05d}") for i, b in enumerate(Xt)], "target")
            model, hist = adapt(model, source, target, self._train_config(self.adapt_epochs, self.adapt_lr), weights=weights)
            self.history_["adapt"] = hist.epochs
        self.model_ = model
        self.class_weights_ = weights.w
        self.classes_ = np.arange(1, self.num_classes + 1)
        self.n_features_in_ = cfg.in_channels
        return self

    def predict_proba(self, X):
        """(n, K, h, w) softmax probabilities."""
        check_is_fitted(self, "model_")
        X = check_bands(X, self.model_.config.in_channels, self.model_.config.multiple)
        out = []
        with no_grad():
            for i in range(0, len(X), 16):
                out.append(softmax_channels(self.model_.forward(X[i : i + 16])).data)
        return np.concatenate(out)

    def predict(self, X):
        """(n, h, w) class ids 1..K."""
        return predict_classes(self.predict_proba(X)) + 1

    def score(self, X, y, sample_weight=None):
        """Overall accuracy over labeled pixels (fraction, not percent)."""
        pred = self.predict(X)
        y = check_label_maps(y, check_bands(X), self.num_classes)
        keep = y > 0
        if not keep.any():
            raise DataError("no labeled pixels to score")
        return float((pred[keep] == y[keep]).mean())
