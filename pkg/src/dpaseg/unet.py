"""Configurable-depth U-Net with skip concatenation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import checkpoint
from .errors import ConfigurationError
from .tensor import (
    Tensor,
    concat_channels,
    conv2d,
    glorot_uniform,
    max_pool2,
    relu,
    upsample2,
)


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 4
    num_classes: int = 24
    depth: int = 3
    base_width: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.in_channels < 1 or self.num_classes < 1 or self.base_width < 1:
            raise ConfigurationError(f"non-positive extent in {self}")
        if self.depth < 2:
            raise ConfigurationError(f"depth must be >= 2, got {self.depth}")

    @property
    def multiple(self):
        """Input height and width must be divisible by this."""
        return 2 ** (self.depth - 1)

    def stage_width(self, stage):
        return self.base_width * 2**stage

    def to_text(self):
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text):
        known = {f.name for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key.strip() in known:
                values[key.strip()] = int(value)
        return cls(**values)


#: Band values in [0, 1] are mapped affinely onto [-2, 2] before the first conv.
INPUT_CENTER = 0.5
INPUT_SCALE = 4.0


class MicroUNet:
    """Encoder/decoder network; each stage is two 3x3 conv + ReLU blocks.

    There is exactly one parameter set. The two Siamese branches are just two
    ``forward`` calls on the same instance.
    """

    def __init__(self, config=None):
        self.config = config or UNetConfig()
        self.params = {}
        rng = np.random.default_rng(self.config.seed)
        cfg = self.config
        in_ch = cfg.in_channels
        for s in range(cfg.depth):
            out_ch = cfg.stage_width(s)
            self._add_conv(f"enc{s}.conv1", in_ch, out_ch, 3, rng)
            self._add_conv(f"enc{s}.conv2", out_ch, out_ch, 3, rng)
            in_ch = out_ch
        for d in reversed(range(cfg.depth - 1)):
            self._add_conv(f"dec{d}.conv1", self.decoder_input_channels(d), cfg.stage_width(d), 3, rng)
            self._add_conv(f"dec{d}.conv2", cfg.stage_width(d), cfg.stage_width(d), 3, rng)
        self._add_conv("head", cfg.stage_width(0), cfg.num_classes, 1, rng)

    def decoder_input_channels(self, stage):
        """Upsampled channels from below plus the skip from encoder ``stage``."""
        return self.config.stage_width(stage + 1) + self.config.stage_width(stage)

    def _add_conv(self, name, cin, cout, k, rng):
        w = Tensor(glorot_uniform((cout, cin, k, k), rng), requires_grad=True, name=f"{name}.weight")
        b = Tensor(np.zeros((1, cout, 1, 1)), requires_grad=True, name=f"{name}.bias")
        self.params[w.name] = w
        self.params[b.name] = b

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return sum(p.data.size for p in self.params.values())

    def _conv(self, name, x):
        k = self.params[f"{name}.weight"]
        pad = k.shape[2] // 2
        return conv2d(x, k, self.params[f"{name}.bias"], stride=1, padding=pad)

    def _block(self, prefix, x):
        x = relu(self._conv(f"{prefix}.conv1", x))
        return relu(self._conv(f"{prefix}.conv2", x))

    def forward(self, batch):
        """Return logits (n, K, h, w) for a (n, in_channels, h, w) batch."""
        if isinstance(batch, Tensor):
            x = Tensor((batch.data - INPUT_CENTER) * INPUT_SCALE)
        else:
            x = Tensor((np.asarray(batch, dtype=np.float64) - INPUT_CENTER) * INPUT_SCALE)
        cfg = self.config
        if x.shape[1] != cfg.in_channels:
            raise ConfigurationError(
                f"expected {cfg.in_channels} input channels, got shape {x.shape}"
            )
        m = cfg.multiple
        if x.shape[2] % m or x.shape[3] % m:
            raise ConfigurationError(
                f"input extents {x.shape[2:]} must be multiples of {m} for depth {cfg.depth}"
            )
        skips = []
        for s in range(cfg.depth):
            if s:
                x = max_pool2(x)
            x = self._block(f"enc{s}", x)
            skips.append(x)
        for d in reversed(range(cfg.depth - 1)):
            x = concat_channels(upsample2(x), skips[d])
            x = self._block(f"dec{d}", x)
        return self._conv("head", x)

    __call__ = forward

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) ^ set(state)
        if missing:
            raise ConfigurationError(f"parameter name mismatch: {sorted(missing)}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ConfigurationError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)
            p.grad = np.zeros_like(p.data)

    def save(self, path):
        checkpoint.write_parameters(
            path, [(k, p.data) for k, p in self.params.items()], header=self.config.to_text()
        )

    @classmethod
    def load(cls, path):
        header, named = checkpoint.read_parameters(path)
        model = cls(UNetConfig.from_text(header))
        model.load_state_dict(dict(named))
        return model


def predict_classes(logits):
    """Per-pixel argmax over channels (0-based channel index, lowest index wins ties).

    Accepts a Tensor or array of shape (n, K, h, w) or (K, h, w).
    """
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data.argmax(axis=-3)
