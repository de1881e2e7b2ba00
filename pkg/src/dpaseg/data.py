"""Rasters, synthetic shifted domains, multi-scale tiling and stitched inference."""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigurationError, DataError, FormatError
from .losses import PUBLISHED_CLASSES
from .tensor import no_grad, softmax_channels

log = logging.getLogger(__name__)

NUM_BANDS = 4
BAND_ROLES = ("blue", "green", "red", "nir")


@dataclass
class RasterScene:
    """Four-band image in [0, 1] with an optional label map (0 = unlabeled)."""

    bands: np.ndarray
    labels: np.ndarray | None = None
    geo_id: str = ""
    resolution_tag: str = "native"

    def __post_init__(self):
        self.bands = np.asarray(self.bands, dtype=np.float64)
        if self.bands.ndim != 3:
            raise DataError(f"bands must be (c, h, w), got {self.bands.shape}")
        if self.bands.size and (self.bands.min() < 0.0 or self.bands.max() > 1.0):
            raise DataError(f"{self.geo_id or 'scene'}: band values outside [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != self.bands.shape[1:]:
                raise DataError(
                    f"label extents {self.labels.shape} != band extents {self.bands.shape[1:]}"
                )
            if self.labels.size and self.labels.min() < 0:
                raise DataError("negative label id")

    @property
    def shape(self):
        return self.bands.shape[1:]


@dataclass
class DomainSet:
    tiles: list
    role: str = "source"
    name: str = ""

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise ConfigurationError(f"domain role must be source or target, got {self.role!r}")
        if self.role == "source":
            unlabeled = [t.geo_id for t in self.tiles if t.labels is None]
            if unlabeled:
                raise DataError(f"source tiles without labels: {unlabeled[:3]}")

    def __len__(self):
        return len(self.tiles)

    def bands(self, idx=None):
        tiles = self.tiles if idx is None else [self.tiles[i] for i in idx]
        return np.stack([t.bands for t in tiles])

    def labels(self, idx=None):
        tiles = self.tiles if idx is None else [self.tiles[i] for i in idx]
        return np.stack([t.labels for t in tiles])


class SealedTruth:
    """Target-domain labels kept apart from the training path."""

    def __init__(self, label_maps, ids):
        self._labels = [np.asarray(m, dtype=np.int64) for m in label_maps]
        self.ids = list(ids)

    def __len__(self):
        return len(self._labels)

    def open(self):
        return list(self._labels)


# -- synthetic domains ------------------------------------------------------


def default_frequencies(num_classes=24):
    """Class frequencies shaped like the published label distribution.

    The dominant class keeps 35% of the pixels; the others share the rest in
    proportion to the square root of their published share, so the rarest
    class still covers a few tenths of a percent.
    """
    pct = np.array([p for _, p in PUBLISHED_CLASSES])
    if num_classes != len(pct):
        pct = np.resize(pct, num_classes)
    top = int(np.argmax(pct))
    rest = np.sqrt(pct)
    rest[top] = 0.0
    freq = 0.65 * rest / rest.sum()
    freq[top] = 0.35
    return freq


def default_class_means(num_classes, seed=0, levels=(0.15, 0.38, 0.62, 0.85)):
    """Distinct per-class band means drawn from a 4-level grid."""
    rng = np.random.default_rng([seed, 7])
    grid = np.stack(np.meshgrid(*[levels] * NUM_BANDS, indexing="ij"), -1).reshape(-1, NUM_BANDS)
    if num_classes > len(grid):
        raise ConfigurationError(f"at most {len(grid)} classes supported by the mean grid")
    chosen = [int(rng.integers(len(grid)))]
    order = rng.permutation(len(grid))
    min_gap = 2 * (levels[1] - levels[0]) - 1e-9
    for i in order:
        if len(chosen) == num_classes:
            break
        if i in chosen:
            continue
        if np.min(np.abs(grid[chosen] - grid[i]).sum(axis=1)) >= min_gap:
            chosen.append(int(i))
    for i in order:
        if len(chosen) == num_classes:
            break
        if i not in chosen:
            chosen.append(int(i))
    return grid[chosen]


def _vec(value, size, name):
    arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
    if arr.size == 1:
        arr = np.full(size, arr[0])
    if arr.shape != (size,):
        raise ConfigurationError(f"{name} needs {size} values, got {arr.size}")
    return arr


@dataclass
class SynthSpec:
    num_classes: int = 24
    tile_size: int = 32
    region_count: int = 10
    shape_mix: tuple = (0.5, 0.35, 0.15)
    class_means: np.ndarray | None = None
    class_stds: np.ndarray | None = None
    pixel_std: float = 0.05
    segment_jitter: float = 0.02
    frequencies: np.ndarray | None = None
    unlabeled_fraction: float = 0.0
    gain: tuple = (1.0, 1.0, 1.0, 1.0)
    offset: tuple = (0.0, 0.0, 0.0, 0.0)
    noise: float = 0.0
    freq_skew: float = 0.0
    seed: int = 0

    def __post_init__(self):
        k = self.num_classes
        if not 1 <= k <= 24:
            raise ConfigurationError(f"num_classes must be in 1..24, got {k}")
        if self.tile_size < 4 or self.region_count < 0:
            raise ConfigurationError("tile_size must be >= 4 and region_count >= 0")
        mix = _vec(self.shape_mix, 3, "shape_mix")
        if (mix < 0).any() or mix.sum() <= 0:
            raise ConfigurationError("shape_mix must be non-negative with positive sum")
        self.shape_mix = tuple(mix / mix.sum())
        if self.frequencies is None:
            self.frequencies = default_frequencies(k)
        freq = np.asarray(self.frequencies, dtype=np.float64)
        if freq.shape != (k,) or (freq < 0).any():
            raise ConfigurationError(f"frequencies need {k} non-negative values")
        if abs(freq.sum() - 1.0) > 1e-3:
            raise ConfigurationError(f"frequencies sum to {freq.sum():.6f}, expected 1")
        self.frequencies = freq / freq.sum()
        if self.class_means is None:
            self.class_means = default_class_means(k, self.seed)
        self.class_means = np.asarray(self.class_means, dtype=np.float64).reshape(k, NUM_BANDS)
        if self.class_stds is None:
            self.class_stds = np.full((k, NUM_BANDS), self.pixel_std)
        self.class_stds = np.asarray(self.class_stds, dtype=np.float64).reshape(k, NUM_BANDS)
        self.gain = tuple(_vec(self.gain, NUM_BANDS, "gain"))
        self.offset = tuple(_vec(self.offset, NUM_BANDS, "offset"))
        if self.noise < 0 or not 0 <= self.unlabeled_fraction < 1:
            raise ConfigurationError("noise must be >= 0 and unlabeled_fraction in [0, 1)")

    @property
    def is_null_shift(self):
        return (
            self.gain == (1.0,) * NUM_BANDS
            and self.offset == (0.0,) * NUM_BANDS
            and self.noise == 0
            and self.freq_skew == 0
        )

    def target_frequencies(self):
        if not self.freq_skew:
            return self.frequencies
        z = np.random.default_rng([self.seed, 11]).standard_normal(self.num_classes)
        f = self.frequencies * np.exp(self.freq_skew * z)
        return f / f.sum()

    @classmethod
    def from_config(cls, cfg):
        """Build from a flat ``{key: str}`` mapping; comma lists become vectors."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in cfg.items():
            if key not in known:
                continue
            if key in ("num_classes", "tile_size", "region_count", "seed"):
                kwargs[key] = int(raw)
            elif key in ("pixel_std", "segment_jitter", "noise", "freq_skew", "unlabeled_fraction"):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = [float(v) for v in str(raw).replace(";", ",").split(",") if v.strip()]
        return cls(**kwargs)


def _paint_segments(size, region_count, shape_mix, rng):
    """Segment-id canvas: a background plus rectangles, blobs and strips."""
    canvas = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    kinds = rng.choice(3, size=region_count, p=shape_mix)
    for seg, kind in enumerate(kinds, 1):
        if kind == 0:
            h, w = rng.integers(size // 8 + 1, size // 2 + 1, size=2)
            r0, c0 = rng.integers(-h // 2, size - h // 2), rng.integers(-w // 2, size - w // 2)
            mask = (yy >= r0) & (yy < r0 + h) & (xx >= c0) & (xx < c0 + w)
        elif kind == 1:
            cy, cx = rng.uniform(0, size, size=2)
            a, b = rng.uniform(size / 10, size / 3, size=2)
            theta, phase = rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)
            dy, dx = yy - cy, xx - cx
            u = dx * np.cos(theta) + dy * np.sin(theta)
            v = -dx * np.sin(theta) + dy * np.cos(theta)
            wobble = 1.0 + 0.25 * np.sin(3 * np.arctan2(v, u) + phase)
            mask = (u / a) ** 2 + (v / b) ** 2 <= wobble**2
        else:
            cy, cx = rng.uniform(0, size, size=2)
            theta = rng.uniform(0, np.pi)
            width = rng.uniform(1.0, 3.0)
            dist = np.abs(-(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta))
            mask = dist <= width / 2
        canvas[mask] = seg
    return canvas


class _DeficitSampler:
    """Assigns segment classes so running pixel counts track target frequencies."""

    def __init__(self, freq, rng):
        self.freq = freq
        self.rng = rng
        self.counts = np.zeros(len(freq))

    def assign(self, areas):
        total_after = self.counts.sum() + areas.sum()
        classes = np.empty(len(areas), dtype=np.int64)
        for i in self.rng.permutation(len(areas)):
            deficit = np.maximum(self.freq * total_after - self.counts, 0.0)
            if deficit.sum() <= 0:
                deficit = self.freq.copy()
            k = int(self.rng.choice(len(self.freq), p=deficit / deficit.sum()))
            classes[i] = k
            self.counts[k] += areas[i]
        return classes


def _render_tile(spec, sampler, rng, apply_shift):
    size = spec.tile_size
    segs = _paint_segments(size, spec.region_count, spec.shape_mix, rng)
    seg_ids, inverse = np.unique(segs, return_inverse=True)
    inverse = inverse.reshape(segs.shape)
    areas = np.bincount(inverse.ravel()).astype(np.float64)
    seg_class = sampler.assign(areas)
    truth = seg_class[inverse] + 1

    jitter = rng.normal(0.0, spec.segment_jitter, size=(len(seg_ids), NUM_BANDS))
    means = spec.class_means[seg_class] + jitter
    stds = spec.class_stds[seg_class]
    pix = means[inverse] + stds[inverse] * rng.standard_normal((size, size, NUM_BANDS))
    bands = np.clip(pix, 0.0, 1.0).transpose(2, 0, 1)
    if apply_shift:
        gain = np.asarray(spec.gain)[:, None, None]
        offset = np.asarray(spec.offset)[:, None, None]
        bands = gain * bands + offset
        if spec.noise:
            bands = bands + rng.normal(0.0, spec.noise, size=bands.shape)
        bands = np.clip(bands, 0.0, 1.0)

    labels = truth.copy()
    if spec.unlabeled_fraction:
        hidden = rng.random(len(seg_ids)) < spec.unlabeled_fraction
        labels[hidden[inverse]] = 0
    return bands, labels, truth


def generate_domain(spec, count, role="source"):
    """Generate ``count`` tiles.

    Source tiles carry their labels. Target tiles are returned unlabeled,
    together with a :class:`SealedTruth` holding the real label maps.
    Returns ``(DomainSet, SealedTruth | None)``.
    """
    if role not in ("source", "target"):
        raise ConfigurationError(f"role must be source or target, got {role!r}")
    if count < 0:
        raise ConfigurationError("tile count must be >= 0")
    stream = 0 if role == "source" else 1
    rng = np.random.default_rng([spec.seed, stream])
    freq = spec.frequencies if role == "source" else spec.target_frequencies()
    sampler = _DeficitSampler(freq, rng)
    tiles, truths = [], []
    for i in range(count):
        bands, labels, truth = _render_tile(spec, sampler, rng, apply_shift=role == "target")
        geo = f"{role}_{i:05d}"
        if role == "source":
            tiles.append(RasterScene(bands, labels, geo))
        else:
            tiles.append(RasterScene(bands, None, geo))
            truths.append(truth)
    domain = DomainSet(tiles, role)
    if role == "target":
        return domain, SealedTruth(truths, [t.geo_id for t in tiles])
    return domain, None


# -- resampling and multi-scale source --------------------------------------


def area_weights(n_in, n_out):
    """(n_out, n_in) matrix of input-pixel overlap fractions per output pixel."""
    scale = n_in / n_out
    edges_out = np.arange(n_out + 1) * scale
    lo = np.maximum(edges_out[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges_out[1:, None], np.arange(n_in)[None, :] + 1)
    return np.clip(hi - lo, 0.0, None) / scale


def area_downsample(image, out_h, out_w):
    """Area-average resample of a (..., h, w) array."""
    image = np.asarray(image, dtype=np.float64)
    rh = area_weights(image.shape[-2], out_h)
    rw = area_weights(image.shape[-1], out_w)
    return rh @ image @ rw.T


def majority_downsample(labels, out_h, out_w):
    """Per output pixel, the label covering most of its footprint (lowest id on ties)."""
    labels = np.asarray(labels)
    rh = area_weights(labels.shape[0], out_h)
    rw = area_weights(labels.shape[1], out_w)
    ids = np.unique(labels)
    cover = np.stack([rh @ (labels == i).astype(np.float64) @ rw.T for i in ids])
    # Coverage values from different footprints can differ in the last bit.
    cover = np.round(cover, 12)
    return ids[cover.argmax(axis=0)]


def _split_by_ratio(count, ratio):
    ratio = np.asarray(ratio, dtype=np.float64)
    exact = count * ratio / ratio.sum()
    out = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - out), kind="stable")[: count - out.sum()]:
        out[i] += 1
    return out


def build_multiscale_source(scenes, count, sizes=(64, 128, 160), ratio=(2, 1, 1), out_size=64, seed=0):
    """Random crops at several sizes, each resampled to ``out_size``.

    Crop sizes that no scene can hold are skipped with a warning and the
    ratio is renormalized over the remaining sizes.
    """
    if len(sizes) != len(ratio):
        raise ConfigurationError("sizes and ratio must have equal length")
    scenes = [s for s in scenes if s.labels is not None]
    if not scenes:
        raise DataError("multi-scale source needs labeled scenes")
    usable = []
    for size, r in zip(sizes, ratio):
        fits = [i for i, s in enumerate(scenes) if min(s.shape) >= size]
        if not fits:
            log.warning("no scene holds a %d px crop; scale skipped", size)
            continue
        usable.append((size, r, fits))
    if not usable:
        raise DataError("no crop size fits any scene")
    per_scale = _split_by_ratio(count, [r for _, r, _ in usable])
    rng = np.random.default_rng([seed, 3])
    tiles = []
    for (size, _, fits), n in zip(usable, per_scale):
        tag = "native" if size == out_size else f"x{size / out_size:g}"
        for _ in range(n):
            scene = scenes[fits[int(rng.integers(len(fits)))]]
            h, w = scene.shape
            r0 = int(rng.integers(h - size + 1))
            c0 = int(rng.integers(w - size + 1))
            crop_b = scene.bands[:, r0 : r0 + size, c0 : c0 + size]
            crop_l = scene.labels[r0 : r0 + size, c0 : c0 + size]
            if size != out_size:
                crop_b = np.clip(area_downsample(crop_b, out_size, out_size), 0.0, 1.0)
                crop_l = majority_downsample(crop_l, out_size, out_size)
            geo = f"{scene.geo_id}@{r0},{c0}+{size}"
            tiles.append(RasterScene(crop_b, crop_l, geo, tag))
    return DomainSet(tiles, "source")


# -- stitched inference ------------------------------------------------------


def _window_starts(extent, tile, stride):
    if extent <= tile:
        return [0]
    n = -(-(extent - tile) // stride) + 1
    return [i * stride for i in range(n)]


def stitch_inference(model, scene, tile, overlap=0.5, batch_size=8, return_probs=False):
    """Sliding-window inference fused by summing per-window softmax probabilities.

    The scene is reflection-padded on the bottom/right so the windows cover it
    exactly; returns a label map of class ids 1..K.
    """
    if not 0.0 <= overlap < 1.0:
        raise ConfigurationError(f"overlap must be in [0, 1), got {overlap}")
    bands = scene.bands if isinstance(scene, RasterScene) else np.asarray(scene, dtype=np.float64)
    _, h, w = bands.shape
    if tile % model.config.multiple:
        raise ConfigurationError(
            f"tile {tile} must be a multiple of {model.config.multiple} for this model"
        )
    if tile > h or tile > w:
        log.warning("tile %d larger than scene %dx%d; using one padded window", tile, h, w)
    stride = max(1, int(round(tile * (1.0 - overlap))))
    rows = _window_starts(h, tile, stride)
    cols = _window_starts(w, tile, stride)
    ph, pw = rows[-1] + tile, cols[-1] + tile
    padded = bands
    if ph > h or pw > w:
        mode = "reflect" if ph - h < h and pw - w < w else "symmetric"
        padded = np.pad(bands, ((0, 0), (0, ph - h), (0, pw - w)), mode=mode)
    k = model.config.num_classes
    acc = np.zeros((k, ph, pw))
    origins = [(r, c) for r in rows for c in cols]
    with no_grad():
        for start in range(0, len(origins), batch_size):
            chunk = origins[start : start + batch_size]
            batch = np.stack([padded[:, r : r + tile, c : c + tile] for r, c in chunk])
            probs = softmax_channels(model.forward(batch)).data
            for (r, c), p in zip(chunk, probs):
                acc[:, r : r + tile, c : c + tile] += p
    acc = acc[:, :h, :w]
    labels = acc.argmax(axis=0) + 1
    if return_probs:
        return labels, acc
    return labels


# -- file formats ------------------------------------------------------------

MSR_MAGIC = b"MSRASTER"
MSR_VERSION = 1


def save_scene(scene, path):
    """Write a ``.msr`` container (little-endian, float64 bands, uint16 labels)."""
    c, h, w = scene.bands.shape
    geo = scene.geo_id.encode("utf-8")
    tag = scene.resolution_tag.encode("utf-8")
    has_labels = scene.labels is not None
    parts = [
        MSR_MAGIC,
        struct.pack("<IIIIB", MSR_VERSION, h, w, c, int(has_labels)),
        struct.pack("<H", len(geo)),
        geo,
        struct.pack("<H", len(tag)),
        tag,
        np.ascontiguousarray(scene.bands, dtype="<f8").tobytes(),
    ]
    if has_labels:
        if scene.labels.size and scene.labels.max() > 0xFFFF:
            raise DataError("label id does not fit in uint16")
        parts.append(np.ascontiguousarray(scene.labels, dtype="<u2").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_scene(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated {what} at offset {pos}")
        out = buf[pos : pos + n]
        pos += n
        return out

    magic = take(len(MSR_MAGIC), "magic")
    if magic != MSR_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    version_at = pos
    version, h, w, c, has_labels = struct.unpack("<IIIIB", take(17, "header"))
    if version != MSR_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset {version_at}")
    (glen,) = struct.unpack("<H", take(2, "geo-id length"))
    geo = take(glen, "geo-id").decode("utf-8")
    (tlen,) = struct.unpack("<H", take(2, "tag length"))
    tag = take(tlen, "resolution tag").decode("utf-8")
    bands = np.frombuffer(take(8 * c * h * w, "bands"), dtype="<f8").reshape(c, h, w)
    labels = None
    if has_labels:
        labels = np.frombuffer(take(2 * h * w, "labels"), dtype="<u2").reshape(h, w)
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes at offset {pos}")
    return RasterScene(bands.astype(np.float64), None if labels is None else labels.astype(np.int64), geo, tag)


#: Index 0 is black (unlabeled); 1..24 are distinct class colours.
PALETTE = (
    (0, 0, 0),
    (200, 0, 0), (250, 0, 150), (200, 150, 150), (250, 150, 150), (0, 0, 200),
    (0, 150, 200), (0, 200, 250), (150, 200, 150), (200, 200, 0), (0, 200, 0),
    (150, 150, 0), (0, 150, 0), (250, 200, 0), (200, 200, 250), (150, 0, 250),
    (150, 150, 250), (250, 200, 150), (150, 150, 150), (200, 150, 0), (0, 100, 200),
    (100, 0, 200), (50, 200, 200), (255, 255, 255), (120, 80, 40),
)


def save_label_png(labels, path, palette=PALETTE):
    from PIL import Image

    labels = np.asarray(labels)
    if labels.size and labels.max() >= len(palette):
        raise DataError(f"label id {labels.max()} has no palette entry")
    h, w = labels.shape
    img = Image.frombytes("P", (w, h), np.ascontiguousarray(labels, dtype=np.uint8).tobytes())
    flat = [v for rgb in palette for v in rgb]
    img.putpalette(flat + [0] * (768 - len(flat)))
    img.save(path, optimize=False)


def save_rgb_png(scene, path):
    """True-colour composite from the red, green and blue bands."""
    from PIL import Image

    rgb = np.clip(scene.bands[[2, 1, 0]].transpose(1, 2, 0) * 255 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(rgb).save(path)


# -- domain directories --------------------------------------------------------


def tile_path(directory, index):
    return os.path.join(directory, f"tile_{index:05d}.msr")


def save_domain(domain, directory):
    os.makedirs(directory, exist_ok=True)
    for i, tile in enumerate(domain.tiles):
        save_scene(tile, tile_path(directory, i))


def load_domain(directory, role):
    if not os.path.isdir(directory):
        raise DataError(f"domain directory not found: {directory}")
    names = sorted(f for f in os.listdir(directory) if f.endswith(".msr"))
    if not names:
        raise DataError(f"no .msr tiles in {directory}")
    tiles = [load_scene(os.path.join(directory, f)) for f in names]
    if role == "target":
        tiles = [RasterScene(t.bands, None, t.geo_id, t.resolution_tag) for t in tiles]
    return DomainSet(tiles, role, name=os.path.basename(os.path.dirname(directory.rstrip(os.sep))))


def load_truth(directory):
    domain = [load_scene(os.path.join(directory, f)) for f in sorted(os.listdir(directory)) if f.endswith(".msr")]
    if not domain or any(t.labels is None for t in domain):
        raise DataError(f"truth directory {directory} has no labeled tiles")
    return SealedTruth([t.labels for t in domain], [t.geo_id for t in domain])
