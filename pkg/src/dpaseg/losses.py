"""Class-balanced cross-entropy and the joint Siamese objective.

Label maps use 0 for unlabeled pixels and 1..K for classes; class ``k``
lives in probability channel ``k - 1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError
from .tensor import Tensor, _result

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

#: Pixel percentages of the 24 land-cover classes in the labeled source set.
PUBLISHED_CLASSES = (
    ("industrial area", 3.57),
    ("urban residential", 5.60),
    ("rural residential", 4.39),
    ("stadium", 0.02),
    ("square", 0.02),
    ("road", 3.57),
    ("overpass", 0.23),
    ("railway station", 0.08),
    ("airport", 0.09),
    ("paddy field", 2.40),
    ("irrigated field", 37.26),
    ("dry cropland", 6.65),
    ("garden land", 0.91),
    ("arbor forest", 8.05),
    ("shrub forest", 3.80),
    ("park", 0.05),
    ("natural meadow", 1.65),
    ("artificial meadow", 0.36),
    ("river", 5.08),
    ("lake", 9.87),
    ("pond", 1.03),
    ("fish pond", 1.12),
    ("snow", 0.03),
    ("bare land", 4.16),
)
CLASS_NAMES = tuple(name for name, _ in PUBLISHED_CLASSES)


@dataclass
class ClassWeights:
    """Per-class proportions ``mu`` and weights ``w = 1 / ln(1 + mu)``."""

    mu: np.ndarray
    w: np.ndarray
    warnings: list = field(default_factory=list)

    @property
    def num_classes(self):
        return len(self.w)


def compute_class_weights(counts):
    """Weights from per-class labeled-pixel counts (index 0 is class 1).

    An empty class is weighted as if it held one pixel, the smallest
    proportion the counts can represent, and a warning is recorded.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ConfigurationError(f"counts must be a non-empty vector, got shape {counts.shape}")
    if (counts < 0).any():
        raise ConfigurationError("class counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise ConfigurationError("class statistics contain no labeled pixel")
    mu = counts / total
    warnings = []
    eff = mu.copy()
    for k in np.flatnonzero(mu == 0):
        eff[k] = 1.0 / total
        msg = f"class {k + 1} has no labeled pixels; weighted as 1 of {int(total)} pixels"
        warnings.append(msg)
        log.warning(msg)
    w = 1.0 / np.log1p(eff)
    return ClassWeights(mu=mu, w=w, warnings=warnings)


def count_classes(label_maps, num_classes):
    """Labeled-pixel count per class over an iterable of label maps."""
    counts = np.zeros(num_classes + 1, dtype=np.int64)
    for labels in label_maps:
        labels = np.asarray(labels)
        if labels.size and labels.max() > num_classes:
            raise DataError(f"label id {labels.max()} exceeds num_classes={num_classes}")
        counts += np.bincount(labels.ravel(), minlength=num_classes + 1)
    return counts[1:]


def read_class_stats(path):
    """Parse ``id name... count`` lines (``#`` comments allowed).

    Returns ``(ids, names, counts)``.
    """
    ids, names, counts = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 3:
                raise ConfigurationError(f"{path}:{lineno}: expected 'id name count'")
            try:
                ids.append(int(parts[0]))
                counts.append(int(parts[-1]))
            except ValueError as exc:
                raise ConfigurationError(f"{path}:{lineno}: {exc}") from None
            names.append(" ".join(parts[1:-1]))
    if ids != list(range(1, len(ids) + 1)):
        raise ConfigurationError(f"{path}: class ids must run 1..K in order")
    return ids, names, np.asarray(counts, dtype=np.int64)


def write_class_stats(path, counts, names=None):
    names = names or [f"class_{k}" for k in range(1, len(counts) + 1)]
    with open(path, "w", encoding="utf-8") as fh:
        for k, (name, c) in enumerate(zip(names, counts), 1):
            fh.write(f"{k} {name.replace(' ', '_')} {int(c)}\n")


def weighted_ce_loss(probs, labels, weights):
    """Sum over labeled pixels of ``W[l] * -ln(max(p_l, 1e-12))``.

    ``probs`` is an (n, K, h, w) Tensor, ``labels`` an (n, h, w) integer map.
    Returns a (1, 1, 1, 1) Tensor whose backward reaches ``probs``.
    """
    labels = np.asarray(labels)
    n, k, h, w = probs.shape
    if labels.shape != (n, h, w):
        raise DataError(f"label shape {labels.shape} does not match probs {probs.shape}")
    wvec = np.asarray(weights.w if isinstance(weights, ClassWeights) else weights, dtype=np.float64)
    if wvec.shape != (k,):
        raise ConfigurationError(f"{wvec.size} class weights for {k} channels")
    if labels.size:
        bad = np.argwhere((labels > k) | (labels < 0))
        if bad.size:
            idx = tuple(int(i) for i in bad[0])
            raise DataError(f"label {labels[idx]} at pixel {idx} outside 0..{k}")

    mask = labels > 0
    sel = np.nonzero(mask)
    cls = labels[sel] - 1
    p_sel = probs.data[sel[0], cls, sel[1], sel[2]]
    clamped = np.maximum(p_sel, PROB_FLOOR)
    pix_w = wvec[cls]
    loss = np.sum(pix_w * -np.log(clamped))

    def backward(g):
        grad = np.zeros(probs.shape)
        dp = np.where(p_sel > PROB_FLOOR, -pix_w / clamped, 0.0)
        grad[sel[0], cls, sel[1], sel[2]] = g.reshape(()) * dp
        return (grad,)

    return _result(np.full((1, 1, 1, 1), loss), (probs,), backward, "weighted_ce_loss")


def joint_loss(loss_source, loss_target):
    """Unweighted sum of the two branch losses (Tensors or floats)."""
    if not isinstance(loss_source, Tensor) and not isinstance(loss_target, Tensor):
        return float(loss_source) + float(loss_target)
    a = loss_source if isinstance(loss_source, Tensor) else Tensor(np.full((1, 1, 1, 1), float(loss_source)))
    b = loss_target if isinstance(loss_target, Tensor) else Tensor(np.full((1, 1, 1, 1), float(loss_target)))

    def backward(g):
        return g, g

    return _result(a.data + b.data, (a, b), backward, "joint_loss")


def published_counts(scale=1_000_000):
    """Integer per-class counts proportional to the published percentages."""
    return np.array([round(pct * scale) for _, pct in PUBLISHED_CLASSES], dtype=np.int64)

