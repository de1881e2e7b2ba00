"""Shared oracles for the test-suite."""

import contextlib

import numpy as np

from dpaseg import unet
from dpaseg.tensor import Tensor

FD_STEP = 1e-3


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-10)
    return float(np.max(np.abs(a - b) / scale))


def numeric_grad(f, array, step=FD_STEP, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``array`` (mutated in place)."""
    if indices is None:
        indices = list(np.ndindex(array.shape))
    out = []
    for idx in indices:
        old = array[idx]
        array[idx] = old + step
        up = f()
        array[idx] = old - step
        down = f()
        array[idx] = old
        out.append((up - down) / (2 * step))
    return np.array(out)


def check_op_gradients(op, inputs, seed=0, step=FD_STEP):
    """Max relative error of analytic vs numeric gradients of ``sum(op(*inputs) * R)``.

    ``inputs`` are arrays; each becomes a Tensor that requires a gradient.
    A fixed random projection ``R`` makes the scalar depend on every output.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    out.backward(proj)

    worst = 0.0
    for arr, t in zip(arrays, tensors):

        def f(arr=arr):
            return float(np.sum(op(*[Tensor(a) for a in arrays]).data * proj))

        num = numeric_grad(f, arr, step)
        worst = max(worst, rel_error(num, t.grad.ravel()))
    return worst


def conv2d_loop(x, k, b=None, stride=1, padding=0):
    """Direct quadruple-loop cross-correlation oracle."""
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for j in range(o):
            for r in range(ho):
                for s in range(wo):
                    patch = xp[i, :, r * stride : r * stride + kh, s * stride : s * stride + kw]
                    out[i, j, r, s] = np.sum(patch * k[j])
            if b is not None:
                out[i, j] += b[0, j, 0, 0]
    return out



@contextlib.contextmanager
def record_activation_pattern(log):
    """Append every ReLU sign mask and max-pool window argmax computed by the U-Net to ``log``."""
    orig_relu, orig_pool = unet.relu, unet.max_pool2

    def relu(x):
        log.append((x.data > 0).tobytes())
        return orig_relu(x)

    def pool(x):
        n, c, h, w = x.shape
        win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        log.append(win.reshape(n, c, h // 2, w // 2, 4).argmax(-1).tobytes())
        return orig_pool(x)

    unet.relu, unet.max_pool2 = relu, pool
    try:
        yield log
    finally:
        unet.relu, unet.max_pool2 = orig_relu, orig_pool


def unet_gradient_error(model, batch, fraction=0.01, seed=0, step=FD_STEP):
    """Max relative error of d mean(logits) / d theta over a random subset of parameters.

    The network is piecewise smooth, so a central difference is only an
    oracle where the +step and -step evaluations share one ReLU/max-pool
    pattern. Entries whose perturbation crosses a kink are skipped. Returns
    ``(error, checked, sampled)``.
    """
    model.zero_grad()
    out = model.forward(batch)
    out.backward(np.full(out.shape, 1.0 / out.data.size))
    rng = np.random.default_rng(seed)
    analytic, numeric, sampled = [], [], 0
    for p in model.parameters():
        count = max(1, int(round(fraction * p.data.size)))
        for flat in rng.choice(p.data.size, size=count, replace=False):
            idx = np.unravel_index(flat, p.shape)
            sampled += 1
            values, patterns = [], []
            old = p.data[idx]
            for delta in (step, -step):
                p.data[idx] = old + delta
                log = []
                with record_activation_pattern(log):
                    values.append(float(model.forward(batch).data.mean()))
                patterns.append(log)
            p.data[idx] = old
            if patterns[0] != patterns[1]:
                continue
            analytic.append(p.grad[idx])
            numeric.append((values[0] - values[1]) / (2 * step))
    analytic, numeric = np.array(analytic), np.array(numeric)
    # entries whose gradient is negligible against the largest one are compared on that scale
    floor = 1e-6 * np.abs(analytic).max()
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale)), len(analytic), sampled
