"""Confusion-matrix evaluation: OA, per-class UA / F1 / IOU and their means."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, EvaluationError


class ConfusionMatrix:
    """K x K tally, rows = truth, columns = prediction, over class ids 1..K."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (num_classes, num_classes):
            raise DataError(f"counts shape {self.counts.shape} != {(num_classes, num_classes)}")

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        if other.num_classes != self.num_classes:
            raise DataError("cannot merge matrices of different size")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def copy(self):
        return ConfusionMatrix(self.num_classes, self.counts.copy())


def accumulate(cm, truth, pred, mask=None):
    """Add one count per labeled, masked-in pixel at (truth, pred). Returns ``cm``."""
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape:
        raise DataError(f"truth {truth.shape} and prediction {pred.shape} extents differ")
    keep = truth > 0
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != truth.shape:
            raise DataError(f"mask {mask.shape} and truth {truth.shape} extents differ")
        keep &= mask
    k = cm.num_classes
    t = truth[keep].astype(np.int64) - 1
    p = pred[keep].astype(np.int64) - 1
    if t.size and (t.max() >= k or p.min() < 0 or p.max() >= k):
        raise DataError(f"class id outside 1..{k} in truth or prediction")
    cm.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    return cm


@dataclass
class Metrics:
    oa: float
    ua: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    iou: np.ndarray
    present: np.ndarray
    ua_undefined: np.ndarray
    mf1: float
    miou: float

    def summary(self):
        return {"OA": self.oa, "mF1": self.mf1, "mIOU": self.miou}


def _ratio(num, den):
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def metrics(cm):
    """All values in percent. Means cover classes present in truth only."""
    c = cm.counts.astype(np.float64)
    total = c.sum()
    if total == 0:
        raise EvaluationError("confusion matrix is empty")
    diag = np.diag(c)
    rows = c.sum(axis=1)
    cols = c.sum(axis=0)
    ua = _ratio(diag, cols)
    recall = _ratio(diag, rows)
    f1 = _ratio(2 * diag, rows + cols)
    iou = _ratio(diag, rows + cols - diag)
    present = rows > 0
    return Metrics(
        oa=float(100.0 * diag.sum() / total),
        ua=100.0 * ua,
        recall=100.0 * recall,
        f1=100.0 * f1,
        iou=100.0 * iou,
        present=present,
        ua_undefined=cols == 0,
        mf1=float(100.0 * f1[present].mean()),
        miou=float(100.0 * iou[present].mean()),
    )


# -- evaluation regions ------------------------------------------------------


@dataclass
class EvalRegionSet:
    """Pixel masks per tile; ``mode`` is ``sparse`` or ``dense``."""

    mode: str
    regions: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("sparse", "dense"):
            raise DataError(f"region mode must be sparse or dense, got {self.mode!r}")

    def mask_for(self, tile_id, shape):
        mask = np.zeros(shape, dtype=bool)
        for tid, m in self.regions:
            if tid == tile_id:
                mask |= m
        return mask


def full_regions(tile_ids, shape, mode="dense"):
    return EvalRegionSet(mode, [(t, np.ones(shape, dtype=bool)) for t in tile_ids])


def dense_regions(tile_ids, shape, fraction=0.5, seed=0):
    """One contiguous rectangle per tile covering about ``fraction`` of it."""
    rng = np.random.default_rng([seed, 21])
    h, w = shape
    rh, rw = max(1, int(round(h * np.sqrt(fraction)))), max(1, int(round(w * np.sqrt(fraction))))
    out = []
    for t in tile_ids:
        r0, c0 = rng.integers(h - rh + 1), rng.integers(w - rw + 1)
        m = np.zeros(shape, dtype=bool)
        m[r0 : r0 + rh, c0 : c0 + rw] = True
        out.append((t, m))
    return EvalRegionSet("dense", out)


def polygon_mask(shape, polygon):
    from PIL import Image, ImageDraw

    h, w = shape
    img = Image.new("1", (w, h), 0)
    ImageDraw.Draw(img).polygon([(float(x), float(y)) for x, y in polygon], fill=1, outline=1)
    return np.array(img, dtype=bool)


def sparse_regions(tile_ids, shape, polygons_per_tile=4, radius=3, seed=0):
    """A few small random polygons per tile."""
    rng = np.random.default_rng([seed, 22])
    h, w = shape
    out = []
    for t in tile_ids:
        m = np.zeros(shape, dtype=bool)
        polys = []
        for _ in range(polygons_per_tile):
            cy, cx = rng.uniform(radius, h - radius), rng.uniform(radius, w - radius)
            ang = np.sort(rng.uniform(0, 2 * np.pi, size=5))
            rad = rng.uniform(0.5 * radius, radius, size=5)
            poly = [(cx + r * np.cos(a), cy + r * np.sin(a)) for a, r in zip(ang, rad)]
            polys.append(poly)
            m |= polygon_mask(shape, poly)
        out.append((t, m))
    return EvalRegionSet("sparse", out)


def save_regions(regions, path):
    """JSON: mode plus, per tile, the row-major indices of masked-in pixels."""
    doc = {
        "mode": regions.mode,
        "regions": [
            {"tile": t, "shape": list(m.shape), "pixels": np.flatnonzero(m).tolist()}
            for t, m in regions.regions
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_regions(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    regions = []
    for r in doc["regions"]:
        shape = tuple(r["shape"])
        m = np.zeros(shape[0] * shape[1], dtype=bool)
        if "pixels" in r:
            m[np.asarray(r["pixels"], dtype=np.int64)] = True
        m = m.reshape(shape)
        for poly in r.get("polygons", []):
            m |= polygon_mask(shape, poly)
        for r0, c0, r1, c1 in r.get("rects", []):
            m[r0:r1, c0:c1] = True
        regions.append((r["tile"], m))
    return EvalRegionSet(doc["mode"], regions)


# -- reports -------------------------------------------------------------------

REPORT_COLUMNS = ("mode", "class_id", "class_name", "UA", "F1", "IOU")


def report_rows(mode, m, class_names):
    rows = []
    for k in range(len(m.f1)):
        ua = repr(float(m.ua[k])) + ("*" if m.ua_undefined[k] else "")
        rows.append([mode, k + 1, class_names[k], ua, repr(float(m.f1[k])), repr(float(m.iou[k]))])
    for key, value in m.summary().items():
        rows.append([mode, key, "", "", "", repr(float(value))])
    return rows


def write_report_csv(path, per_mode, class_names):
    """``per_mode`` maps mode name to :class:`Metrics`. UA of never-predicted classes is flagged with ``*``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for mode, m in per_mode.items():
        writer.writerows(report_rows(mode, m, class_names))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def format_table(rows):
    """Rows of (name, Metrics) as a fixed-width OA / mF1 / mIOU table."""
    lines = [f"{'':<24}{'OA':>8}{'mF1':>8}{'mIOU':>8}"]
    for name, m in rows:
        lines.append(f"{name:<24}{m.oa:>8.2f}{m.mf1:>8.2f}{m.miou:>8.2f}")
    return "\n".join(lines) + "\n"


def evaluate_predictions(preds, truth, regions, num_classes):
    """Confusion matrix over tiles; ``truth`` is a :class:`SealedTruth`."""
    if truth is None or len(truth) == 0:
        raise EvaluationError("target truth is missing")
    labels = truth.open()
    if len(preds) != len(labels):
        raise EvaluationError(f"{len(preds)} predictions for {len(labels)} truth tiles")
    cm = ConfusionMatrix(num_classes)
    for tid, t, p in zip(truth.ids, labels, preds):
        mask = None if regions is None else regions.mask_for(tid, t.shape)
        accumulate(cm, t, p, mask)
    return cm


def evaluate_run(model, target, truth, regions, tile=None, overlap=0.5):
    """Stitched inference on each target tile, then one matrix per region mode.

    ``regions`` is an EvalRegionSet or a list of them. Returns ``{mode: Metrics}``.
    """
    from .data import stitch_inference

    if truth is None:
        raise EvaluationError("target truth is missing")
    tile = tile or target.tiles[0].shape[0]
    preds = [stitch_inference(model, t, tile, overlap) for t in target.tiles]
    if isinstance(regions, EvalRegionSet):
        regions = [regions]
    out = {}
    for reg in regions:
        cm = evaluate_predictions(preds, truth, reg, model.config.num_classes)
        out[reg.mode] = metrics(cm)
    return out
