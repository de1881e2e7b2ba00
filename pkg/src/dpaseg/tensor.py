"""Rank-4 double-precision tensors with reverse-mode gradients.

Only the handful of layers the micro U-Net needs are provided. Every op
returns a new :class:`Tensor`; when any input requires a gradient the
output records its parents and a backward rule, and :meth:`Tensor.backward`
walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NumericError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _check_finite(array, where):
    if not np.isfinite(array).all():
        raise NumericError(f"non-finite values produced by {where}")


class Tensor:
    """Dense (n, c, h, w) array of float64 with optional gradient storage."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 4:
            raise ConfigurationError(f"Tensor4 needs 4 dims, got shape {data.shape}")
        if min(data.shape, default=1) < 0:
            raise ConfigurationError(f"negative extent in shape {data.shape}")
        self.data = data
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(data) if requires_grad else None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf that requires a gradient.

        ``grad`` is the upstream gradient; it defaults to ones, so calling
        ``loss.backward()`` on a (1, 1, 1, 1) scalar does the usual thing.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ConfigurationError(
                f"upstream gradient shape {grad.shape} != tensor shape {self.shape}"
            )

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        pending = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad += g
                _check_finite(node.grad, f"backward into {node!r}")
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in pending:
                    pending[id(parent)] = pending[id(parent)] + pg
                else:
                    pending[id(parent)] = pg


def _result(data, parents, backward, where):
    _check_finite(data, where)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unfold(xp, kh, kw, stride, ho, wo):
    """(n, c, H, W) -> (n, c*kh*kw, ho*wo) patch matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : stride * ho : stride, : stride * wo : stride]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def conv2d(x, kernels, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x`` (n, c, h, w) with ``kernels`` (o, c, kh, kw)."""
    n, c, h, w = x.shape
    o, kc, kh, kw = kernels.shape
    if kc != c:
        raise ConfigurationError(
            f"conv2d channel mismatch: input {x.shape} vs kernels {kernels.shape}"
        )
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"bad stride={stride} / padding={padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigurationError(
            f"conv2d output would be empty: input {x.shape} vs kernels {kernels.shape}"
        )
    if bias is not None and bias.shape != (1, o, 1, 1):
        raise ConfigurationError(f"bias shape {bias.shape} != {(1, o, 1, 1)}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _unfold(xp, kh, kw, stride, ho, wo)
    wmat = kernels.data.reshape(o, c * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, o, ho, wo)
    if bias is not None:
        out += bias.data

    def backward(g):
        gmat = g.reshape(n, o, ho * wo)
        gx = gk = gb = None
        if kernels.requires_grad:
            gk = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernels.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1)
        if x.requires_grad:
            hp, wp = xp.shape[2], xp.shape[3]
            if stride == 1:
                # full correlation of g with the flipped kernels, channel roles swapped
                gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
                gcols = _unfold(gp, kh, kw, 1, hp, wp)
                wflip = kernels.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * kh * kw)
                dxp = np.matmul(wflip, gcols).reshape(n, c, hp, wp)
            else:
                dcols = np.matmul(wmat.T, gmat).reshape(n, c, kh, kw, ho, wo)
                dxp = np.zeros(xp.shape)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
            gx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
            gx = np.ascontiguousarray(gx)
        return gx, gk, gb

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _result(out, parents, backward, "conv2d")


def max_pool2(x):
    """2x2 non-overlapping max pool; ties go to the first element in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"max_pool2 needs even spatial extents, got {x.shape}")
    blocks = (
        x.data.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = (
            gb.reshape(n, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (gx,)

    return _result(out, (x,), backward, "max_pool2")


def upsample2(x):
    """Nearest-neighbour 2x spatial enlargement."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), backward, "upsample2")


def concat_channels(a, b):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ConfigurationError(
            f"concat_channels needs equal batch/spatial extents: {a.shape} vs {b.shape}"
        )
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return _result(out, (a, b), backward, "concat_channels")


def relu(x):
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def backward(g):
        return (g * mask,)

    return _result(out, (x,), backward, "relu")


def softmax_channels(x):
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    if x.shape[1] < 2:
        raise ConfigurationError(f"softmax over channels needs K >= 2, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, (x,), backward, "softmax_channels")


def glorot_uniform(shape, rng):
    """Uniform in +-sqrt(6 / (fan_in + fan_out)) for an (o, c, kh, kw) kernel."""
    o, c, kh, kw = shape
    limit = np.sqrt(6.0 / (c * kh * kw + o * kh * kw))
    return rng.uniform(-limit, limit, size=shape)
