"""Dynamic pseudo-label assignment.

Per target tile: compute the normalized entropy of every pixel's class
distribution, keep the ``N`` most certain pixels where ``N`` grows linearly
with the epoch up to a fraction ``lam`` of the tile, and label them with
their argmax class.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor

log = logging.getLogger(__name__)


def _array(probs):
    return probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)


def entropy_map(probs, num_classes=None):
    """Normalized Shannon entropy over the class axis, in [0, 1].

    ``probs`` has shape (K, h, w) or (n, K, h, w); 0 * ln 0 is taken as 0.
    """
    p = _array(probs)
    k = p.shape[-3]
    if num_classes is not None and num_classes != k:
        raise ConfigurationError(f"num_classes={num_classes} but probs have {k} channels")
    if k < 2:
        raise ConfigurationError(f"entropy needs K >= 2, got {k}")
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    e = -plogp.sum(axis=-3) / np.log(k)
    return np.clip(e, 0.0, 1.0)


@dataclass(frozen=True)
class DpaSchedule:
    lam: float = 0.5
    total_epochs: int = 100
    epoch: int = 1

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda must be in [0, 1], got {self.lam}")
        if self.total_epochs < 1:
            raise ConfigurationError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if not 0 <= self.epoch <= self.total_epochs:
            raise ConfigurationError(
                f"epoch {self.epoch} outside 0..{self.total_epochs}"
            )

    @property
    def fraction(self):
        return self.lam * self.epoch / self.total_epochs


def selection_budget(schedule, height, width):
    """``floor(lam * H * W * n_e / N_e)``, evaluated exactly.

    ``lam`` is read as the decimal it prints as, so 0.7 * 100 gives 70 rather
    than the 69 that binary rounding of 0.7 would produce.
    """
    lam = Fraction(repr(float(schedule.lam)))
    n = lam * height * width * schedule.epoch / schedule.total_epochs
    return int(n.numerator // n.denominator)


@dataclass
class PseudoLabelSet:
    """Selected pixels of one tile, ascending by entropy (row-major on ties)."""

    rows: np.ndarray
    cols: np.ndarray
    labels: np.ndarray
    entropy: np.ndarray
    tile_id: str = ""

    def __len__(self):
        return len(self.rows)

    @property
    def entries(self):
        return [
            ((int(r), int(c)), int(lab), float(e))
            for r, c, lab, e in zip(self.rows, self.cols, self.labels, self.entropy)
        ]

    def to_label_map(self, height, width):
        """Dense map: pseudo-label ids at selected pixels, 0 elsewhere."""
        out = np.zeros((height, width), dtype=np.int64)
        out[self.rows, self.cols] = self.labels
        return out


def select_lowest(values, n):
    """Flat indices of the ``n`` smallest values, ties by index, sorted by (value, index)."""
    flat = np.ravel(values)
    n = int(n)
    if n <= 0:
        return np.empty(0, dtype=np.int64)
    if n >= flat.size:
        chosen = np.arange(flat.size)
    else:
        cut = np.partition(flat, n - 1)[n - 1]
        below = np.flatnonzero(flat < cut)
        at = np.flatnonzero(flat == cut)[: n - below.size]
        chosen = np.concatenate([below, at])
    order = np.lexsort((chosen, flat[chosen]))
    return chosen[order]


def assign_pseudo_labels(probs, entropy, n, tile_id=""):
    """Label the ``n`` lowest-entropy pixels of one (K, h, w) tile with their argmax id (1..K)."""
    p = _array(probs)
    if p.ndim != 3:
        raise ConfigurationError(f"expected one (K, h, w) tile, got shape {p.shape}")
    k, h, w = p.shape
    entropy = np.asarray(entropy, dtype=np.float64)
    if entropy.shape != (h, w):
        raise ConfigurationError(f"entropy shape {entropy.shape} != {(h, w)}")
    if n > h * w:
        log.warning("pseudo-label budget %d exceeds %d pixels; clamped", n, h * w)
        n = h * w
    idx = select_lowest(entropy, n)
    rows, cols = np.divmod(idx, w)
    labels = p[:, rows, cols].argmax(axis=0) + 1
    return PseudoLabelSet(rows, cols, labels, entropy.ravel()[idx], tile_id)


def pseudo_label_batch(probs, schedule, tile_ids=None):
    """Run entropy, budget and assignment for each tile of an (n, K, h, w) batch.

    Returns ``(label_maps, sets, entropy)``; ``label_maps`` is (n, h, w) with 0
    for unselected pixels.
    """
    p = _array(probs)
    n_tiles, k, h, w = p.shape
    budget = selection_budget(schedule, h, w)
    ent = entropy_map(p)
    maps = np.zeros((n_tiles, h, w), dtype=np.int64)
    sets = []
    for i in range(n_tiles):
        tid = tile_ids[i] if tile_ids is not None else str(i)
        s = assign_pseudo_labels(p[i], ent[i], budget, tid)
        maps[i] = s.to_label_map(h, w)
        sets.append(s)
    return maps, sets, ent


def save_debug_pngs(entropy, pseudo_map, prefix):
    """Grayscale PNGs of an entropy map (white = uncertain) and a selection mask."""
    from PIL import Image

    Image.fromarray(np.round(np.asarray(entropy) * 255).astype(np.uint8)).save(
        f"{prefix}_entropy.png"
    )
    Image.fromarray(((np.asarray(pseudo_map) > 0) * 255).astype(np.uint8)).save(
        f"{prefix}_pseudo.png"
    )
