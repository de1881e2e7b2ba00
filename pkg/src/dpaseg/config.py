"""Flat ``key = value`` configuration files with ``include`` support.

Syntax::

    # comment
    include = base.cfg        # resolved relative to the including file
    epochs = 30
    gain = 1.1, 0.9, 1.1, 0.9

Later assignments override earlier ones, so keys written after an include
override the included values. Values stay strings until :func:`resolve`
coerces them against :data:`KEYS`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .errors import ConfigurationError


@dataclass(frozen=True)
class Key:
    name: str
    kind: str  # int | float | bool | str | floats | optfloat
    default: object
    help: str
    group: str


def _k(group, name, kind, default, text):
    return Key(name, kind, default, text, group)


KEYS = {
    k.name: k
    for k in (
        _k("general", "seed", "int", 0, "master seed for data, initialization, sampling and augmentation"),
        _k("general", "threads", "int", 0, "worker cap for numeric kernels; 0 = all logical cores"),
        # synthetic domains
        _k("synth", "name", "str", "synthetic", "domain name under domains/"),
        _k("synth", "n_source", "int", 48, "labeled source tiles"),
        _k("synth", "n_target", "int", 32, "unlabeled target tiles (truth written separately)"),
        _k("synth", "num_classes", "int", 24, "number of land-cover classes (at most 24, the published label set)"),
        _k("synth", "tile_size", "int", 32, "tile edge in pixels"),
        _k("synth", "region_count", "int", 10, "painted segments per tile"),
        _k("synth", "shape_mix", "floats", "0.5,0.35,0.15", "proportions of rectangles, blobs and road strips"),
        _k("synth", "pixel_std", "float", 0.05, "per-pixel spectral standard deviation"),
        _k("synth", "segment_jitter", "float", 0.02, "per-segment standard deviation of the class mean"),
        _k("synth", "frequencies", "floats", "", "class frequency vector; empty = dominant class at 35%, rest by published share"),
        _k("synth", "unlabeled_fraction", "float", 0.0, "fraction of source segments left unlabeled (id 0)"),
        _k("synth", "gain", "floats", "1.12,0.9,1.1,0.88", "target per-band gain (blue, green, red, nir)"),
        _k("synth", "offset", "floats", "0.03,-0.02,-0.04,0.05", "target per-band offset"),
        _k("synth", "noise", "float", 0.03, "extra Gaussian noise on target bands"),
        _k("synth", "freq_skew", "float", 0.0, "log-normal skew of target class frequencies"),
        # model
        _k("model", "depth", "int", 3, "U-Net encoder stages; tile edges must be divisible by 2^(depth-1)"),
        _k("model", "base_width", "int", 16, "channels of the first stage, doubled per stage"),
        # training
        _k("train", "epochs", "int", 30, "training epochs; for adapt this is N_e, the epoch count of the growing selection budget"),
        _k("train", "batch_size", "int", 2, "tiles per branch per step (published setting: 16 for both branches)"),
        _k("train", "base_lr", "float", 1.5e-6, "initial SGD learning rate for the summed (not averaged) pixel loss"),
        _k("train", "momentum", "float", 0.9, "SGD momentum (published setting)"),
        _k("train", "weight_decay", "float", 1e-5, "L2 weight decay (published setting)"),
        _k("train", "poly_power", "float", 0.9, "poly learning-rate decay exponent"),
        _k("train", "clip_norm", "optfloat", 2e4, "global gradient-norm clip; 'none' disables"),
        _k("train", "lam", "float", 0.5, "lambda: fraction of target pixels pseudo-labeled at the last epoch (published setting 0.5)"),
        _k("train", "hflip", "bool", True, "random horizontal flips"),
        _k("train", "vflip", "bool", True, "random vertical flips"),
        _k("train", "rot90", "bool", True, "random 90-degree rotations"),
        _k("train", "val_fraction", "float", 0.2, "source tiles held out for validation during pre-training (published setting 20%)"),
        _k("train", "checkpoint_every", "int", 10, "write a checkpoint every this many epochs"),
        _k("train", "class_stats", "str", "", "class statistics file for the loss weights 1/ln(1+mu); empty = count the source labels"),
        # inference / evaluation
        _k("eval", "tile", "int", 32, "inference window edge"),
        _k("eval", "overlap", "float", 0.5, "overlap-tile window overlap (published setting 50%)"),
        _k("eval", "region_mode", "str", "both", "evaluation regions: dense, sparse, both or full"),
        _k("eval", "regions", "str", "", "JSON region file; overrides region_mode"),
    )
}


def parse_text(text, source="<string>", base_dir=".", _stack=()):
    """Parse config text into an ordered ``{key: str}`` mapping, following includes."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigurationError(f"{source}:{lineno}: empty key")
        if key == "include":
            path = value if os.path.isabs(value) else os.path.join(base_dir, value)
            out.update(load_file(path, _stack))
        else:
            out[key] = value
    return out


def load_file(path, _stack=()):
    path = os.path.abspath(path)
    if path in _stack:
        chain = " -> ".join(_stack + (path,))
        raise ConfigurationError(f"include cycle: {chain}")
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_text(text, path, os.path.dirname(path), _stack + (path,))


def parse_overrides(items):
    """``["k=v", ...]`` from ``--set`` flags."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        out[key.strip()] = value.strip()
    return out


def _coerce(key, raw):
    spec = KEYS[key]
    if not isinstance(raw, str):
        return raw
    try:
        if spec.kind == "int":
            return int(raw)
        if spec.kind == "float":
            return float(raw)
        if spec.kind == "optfloat":
            return None if raw.lower() in ("", "none", "off") else float(raw)
        if spec.kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if spec.kind == "floats":
            return tuple(float(v) for v in raw.replace(";", ",").split(",") if v.strip())
    except ValueError:
        raise ConfigurationError(f"{key}: cannot read {raw!r} as {spec.kind}") from None
    return raw


def resolve(raw):
    """Fill defaults, coerce types and reject unknown keys. Returns ``{key: value}``."""
    unknown = sorted(set(raw) - set(KEYS))
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
    return {name: _coerce(name, raw.get(name, spec.default)) for name, spec in KEYS.items()}


def dump(cfg):
    """Canonical text form: one ``key = value`` per line in :data:`KEYS` order."""
    lines = []
    for name in KEYS:
        value = cfg[name]
        if isinstance(value, tuple):
            value = ",".join(repr(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif value is None:
            value = "none"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def help_text(groups=None):
    lines = []
    for spec in KEYS.values():
        if groups and spec.group not in groups:
            continue
        default = spec.default if spec.default != "" else "(empty)"
        lines.append(f"  {spec.name:<18} [{spec.kind}, default {default}] {spec.help}")
    return "\n".join(lines)
