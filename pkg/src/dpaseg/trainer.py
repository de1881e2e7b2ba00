"""Source pre-training and Siamese domain joint learning.

Random streams are derived from the run seed per epoch so that an epoch's
source batches and augmentations do not depend on what happened before it:

* ``[seed, 1, e]`` source order and source augmentation in epoch ``e``
* ``[seed, 2, e]`` target order and target augmentation
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DomainSet
from .dpa import DpaSchedule, pseudo_label_batch
from .errors import ConfigurationError, DataError
from .losses import compute_class_weights, count_classes, joint_loss, weighted_ce_loss
from .metrics import ConfusionMatrix, accumulate, metrics
from .optim import OptimizerState, sgd_step
from .tensor import no_grad, softmax_channels
from .unet import predict_classes

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    # tuned for the summed (not averaged) pixel loss at desk-scale batch sizes
    base_lr: float = 1.5e-6
    momentum: float = 0.9
    weight_decay: float = 1e-5
    poly_power: float = 0.9
    clip_norm: float | None = 2e4
    lam: float = 0.5
    seed: int = 0
    hflip: bool = True
    vflip: bool = True
    rot90: bool = True
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigurationError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lam must be in [0, 1], got {self.lam}")

    def optimizer(self):
        return OptimizerState(
            base_lr=self.base_lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            poly_power=self.poly_power,
            total_epochs=self.epochs,
            clip_norm=self.clip_norm,
        )

    def to_dict(self):
        return asdict(self)


@dataclass
class History:
    epochs: list = field(default_factory=list)

    def append(self, **row):
        self.epochs.append(row)

    def column(self, key):
        return [row.get(key) for row in self.epochs]


class SiameseNetwork:
    """Two branches over one shared model; there is no second parameter set."""

    def __init__(self, model):
        self.model = model

    @property
    def source_branch(self):
        return self.model

    @property
    def target_branch(self):
        return self.model

    def forward_pair(self, x_source, x_target):
        return self.source_branch.forward(x_source), self.target_branch.forward(x_target)


def augment(bands, labels, rng, cfg, extra=None):
    """Random flips / 90-degree rotations applied identically to images and maps.

    ``extra`` is an optional list of further (n, h, w) maps transformed the same way.
    """
    n = bands.shape[0]
    flips = rng.integers(0, 2, size=(n, 2))
    rots = rng.integers(0, 4, size=n)
    square = bands.shape[-1] == bands.shape[-2]
    out_b = bands.copy()
    out_l = None if labels is None else labels.copy()
    extra = [m.copy() for m in extra] if extra else []
    for i in range(n):
        ops = []
        if cfg.hflip and flips[i, 0]:
            ops.append(lambda a: a[..., ::-1])
        if cfg.vflip and flips[i, 1]:
            ops.append(lambda a: a[..., ::-1, :])
        if cfg.rot90 and square and rots[i]:
            k = int(rots[i])
            ops.append(lambda a, k=k: np.rot90(a, k, axes=(-2, -1)))
        for op in ops:
            out_b[i] = op(out_b[i])
            if out_l is not None:
                out_l[i] = op(out_l[i])
            for m in extra:
                m[i] = op(m[i])
    if extra:
        return out_b, out_l, extra
    return out_b, out_l


def _batches(order, size):
    return [order[i : i + size] for i in range(0, len(order), size)]


def source_weights(source, num_classes):
    return compute_class_weights(count_classes((t.labels for t in source.tiles), num_classes))


def split_validation(source, cfg):
    """Shuffle-split tile indices into (train, val) with ``cfg.val_fraction`` held out."""
    n = len(source)
    n_val = int(round(n * cfg.val_fraction)) if n > 1 else 0
    perm = np.random.default_rng([cfg.seed, 0]).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def evaluate_tiles(model, bands, labels, batch_size=16):
    """mIOU (percent) of direct inference over labeled tiles; None if nothing labeled."""
    cm = ConfusionMatrix(model.config.num_classes)
    with no_grad():
        for i in range(0, len(bands), batch_size):
            pred = predict_classes(model.forward(bands[i : i + batch_size])) + 1
            for t, p in zip(labels[i : i + batch_size], pred):
                accumulate(cm, t, p)
    if cm.total == 0:
        return None
    return metrics(cm).miou


def probe_loss(model, bands, labels, weights):
    with no_grad():
        probs = softmax_channels(model.forward(bands))
        return float(weighted_ce_loss(probs, labels, weights).data.reshape(()))


def pretrain_source(model, source, cfg, weights=None, on_epoch=None):
    """Supervised class-balanced training on the source domain.

    Returns ``(model, history)``; history rows hold epoch, lr, loss_S (per
    tile), loss_T (0), n_pseudo (0) and val_mIOU.
    """
    if source is None or len(source) == 0:
        raise ConfigurationError("source domain is empty")
    k = model.config.num_classes
    train_idx, val_idx = split_validation(source, cfg)
    train = DomainSet([source.tiles[i] for i in train_idx], "source")
    if weights is None:
        weights = source_weights(train, k)
    xb, yb = train.bands(), train.labels()
    val_b = source.bands(val_idx) if len(val_idx) else None
    val_l = source.labels(val_idx) if len(val_idx) else None
    state = cfg.optimizer()
    params = model.parameters()
    history = History()
    for e in range(cfg.epochs):
        state.epoch = e
        rng = np.random.default_rng([cfg.seed, 1, e])
        order = rng.permutation(len(train))
        total = 0.0
        for idx in _batches(order, cfg.batch_size):
            x, y = augment(xb[idx], yb[idx], rng, cfg)
            loss = weighted_ce_loss(softmax_channels(model.forward(x)), y, weights)
            loss.backward()
            sgd_step(params, state)
            total += float(loss.data.reshape(()))
        val = evaluate_tiles(model, val_b, val_l) if val_b is not None else None
        history.append(epoch=e + 1, lr=state.lr, loss_S=total / len(train), loss_T=0.0, n_pseudo=0, val_mIOU=val)
        log.info("pretrain epoch %d loss_S=%.4f val_mIOU=%s", e + 1, total / len(train), val)
        if on_epoch is not None:
            on_epoch(e + 1, model, history)
    return model, history


def adapt(model, source, target, cfg, weights=None, monitor=None, on_epoch=None):
    """Siamese joint learning with dynamic pseudo-labels on the target branch.

    Each epoch draws a fresh sub-source of ``len(target)`` tiles, pairs source
    and target batches, and takes one optimizer step on the summed loss.
    ``monitor`` (a SealedTruth) is read only to record pseudo-label accuracy
    in the history; it never reaches the loss.
    """
    if target is None or len(target) == 0:
        raise ConfigurationError("target domain is empty")
    if source is None or len(source) == 0:
        raise ConfigurationError("source domain is empty")
    k = model.config.num_classes
    if weights is None:
        weights = source_weights(source, k)
    replace = len(target) > len(source)
    if replace:
        log.warning("target (%d tiles) larger than source (%d); sub-source drawn with replacement", len(target), len(source))
    xs_all, ys_all = source.bands(), source.labels()
    xt_all = target.bands()
    truth_all = np.stack(monitor.open()) if monitor is not None else None
    if xt_all.shape[1] != model.config.in_channels:
        raise DataError(f"target tiles have {xt_all.shape[1]} bands, model expects {model.config.in_channels}")

    siamese = SiameseNetwork(model)
    state = cfg.optimizer()
    params = model.parameters()
    history = History()
    for n_e in range(1, cfg.epochs + 1):
        state.epoch = n_e - 1
        schedule = DpaSchedule(cfg.lam, cfg.epochs, n_e)
        rng_s = np.random.default_rng([cfg.seed, 1, n_e - 1])
        rng_t = np.random.default_rng([cfg.seed, 2, n_e - 1])
        if replace:
            sub = rng_s.choice(len(source), size=len(target), replace=True)
        else:
            sub = rng_s.permutation(len(source))[: len(target)]
        t_order = rng_t.permutation(len(target))
        loss_s_sum = loss_t_sum = 0.0
        n_pseudo = correct = 0
        for s_idx, t_idx in zip(_batches(sub, cfg.batch_size), _batches(t_order, cfg.batch_size)):
            xs, ys = augment(xs_all[s_idx], ys_all[s_idx], rng_s, cfg)
            if truth_all is not None:
                xt, _, (tt,) = augment(xt_all[t_idx], None, rng_t, cfg, extra=[truth_all[t_idx]])
            else:
                xt, _ = augment(xt_all[t_idx], None, rng_t, cfg)
            logits_s, logits_t = siamese.forward_pair(xs, xt)
            loss_s = weighted_ce_loss(softmax_channels(logits_s), ys, weights)
            probs_t = softmax_channels(logits_t)
            pmaps, _, _ = pseudo_label_batch(probs_t, schedule)
            selected = pmaps > 0
            if selected.any():
                loss_t = weighted_ce_loss(probs_t, pmaps, weights)
                total = joint_loss(loss_s, loss_t)
                loss_t_sum += float(loss_t.data.reshape(()))
            else:
                total = loss_s
            total.backward()
            sgd_step(params, state)
            loss_s_sum += float(loss_s.data.reshape(()))
            n_pseudo += int(selected.sum())
            if truth_all is not None:
                correct += int((pmaps[selected] == tt[selected]).sum())
        row = dict(
            epoch=n_e,
            lr=state.lr,
            loss_S=loss_s_sum / len(sub),
            loss_T=loss_t_sum / len(target),
            n_pseudo=n_pseudo,
            val_mIOU=None,
        )
        if truth_all is not None:
            row["pseudo_acc"] = correct / n_pseudo if n_pseudo else None
        history.append(**row)
        log.info("adapt epoch %d loss_S=%.4f loss_T=%.4f n_pseudo=%d", n_e, row["loss_S"], row["loss_T"], n_pseudo)
        if on_epoch is not None:
            on_epoch(n_e, model, history)
    return model, history


def infer_branch(model, tile):
    """Single-branch forward pass and argmax; returns class ids 1..K."""
    bands = tile.bands if hasattr(tile, "bands") else np.asarray(tile, dtype=np.float64)
    if bands.shape[0] != model.config.in_channels:
        raise DataError(f"tile has {bands.shape[0]} bands, model expects {model.config.in_channels}")
    with no_grad():
        logits = model.forward(bands[None])
    return predict_classes(logits)[0] + 1
