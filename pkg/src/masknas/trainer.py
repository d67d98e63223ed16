"""Supernet training: alternating weight and architecture optimisation.

Each epoch runs an architecture phase over validation batches followed by a
weight phase over training batches.  Architecture steps are first order (the
weights are treated as constants) and gated by a trigger probability that
starts at 1 and decays over the remaining schedule; the first warmup_epochs
epochs skip the architecture phase entirely.  Weights use SGD with momentum,
cosine-annealed learning rate and global-norm gradient clipping; alpha and
beta use Adam with decoupled-into-gradient L2.  Batch provenance is asserted
on every step: weight steps only ever see training batches, architecture
steps only validation batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DivergenceError, ProvenanceError, RangeError
from .numcore import Tape, Tensor, backward
from .numcore import functional as F
from .rng import derive_seed, generator
from .searchspace import Supernet, count_params, supernet_forward

SIGMA_KINDS = ("linear", "final_third", "zero")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    w_lr: float = 0.1
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    grad_clip: float = 5.0
    arch_lr: float = 3e-4
    arch_weight_decay: float = 1e-3
    warmup_epochs: int = 10
    train_fraction: float = 0.8
    sigma_kind: str = "linear"
    sigma_horizon: Optional[int] = None
    seed: int = 0

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.w_lr <= 0 or self.arch_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if not 0.0 <= self.w_momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.w_momentum}")
        if self.w_weight_decay < 0 or self.arch_weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")
        if self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be > 0, got {self.grad_clip}")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError(
                f"warmup_epochs must be in [0, epochs], got {self.warmup_epochs}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(
                f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.sigma_kind not in SIGMA_KINDS:
            raise ConfigError(
                f"sigma_kind must be one of {SIGMA_KINDS}, got {self.sigma_kind!r}")
        if self.sigma_horizon is not None and self.sigma_horizon < 1:
            raise ConfigError("sigma_horizon must be >= 1 when given")
        return self


def split_dataset(data, fraction: float, seed: int):
    """Shuffle and split one dataset into (train, val) by sample fraction."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must be in (0, 1), got {fraction}")
    n = data.x.shape[0]
    k = int(round(n * fraction))
    if k == 0 or k == n:
        raise ConfigError(
            f"split of {n} samples at fraction {fraction} leaves a side empty")
    perm = generator(derive_seed(seed, "split")).permutation(n)
    return data.take(perm[:k]), data.take(perm[k:])


def cosine_lr(base_lr: float, t: int, total: int) -> float:
    """Cosine annealing from base_lr at t=0 to exactly 0 at t=total."""
    if total < 1:
        raise ConfigError(f"cosine schedule length must be >= 1, got {total}")
    if not 0 <= t <= total:
        raise RangeError(f"schedule step {t} outside [0, {total}]")
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * t / total))


def trigger_probability(t: int, horizon: int, kind: str = "linear") -> float:
    """Architecture-step trigger probability after t opportunities.

    'linear' decays from 1 to 0 across the horizon; 'final_third' holds 1 for
    the first two thirds, then decays linearly to 0; 'zero' disables
    architecture steps outright (for ablations and tests).
    """
    if kind == "zero":
        return 0.0
    if horizon < 1:
        raise ConfigError(f"trigger horizon must be >= 1, got {horizon}")
    if t < 0:
        raise RangeError(f"trigger step must be >= 0, got {t}")
    x = min(t, horizon)
    if kind == "linear":
        return max(0.0, 1.0 - x / horizon)
    if kind == "final_third":
        knee = 2 * horizon / 3
        if x <= knee:
            return 1.0
        return max(0.0, (horizon - x) / (horizon - knee))
    raise ConfigError(f"unknown trigger kind {kind!r}")


# ------------------------------------------------------------------ optimizers

@dataclass
class SGDState:
    velocity: Optional[np.ndarray] = None


def sgd_step(param: Tensor, state: SGDState, lr: float, momentum: float,
             weight_decay: float, update_mask: Optional[np.ndarray] = None):
    """Momentum SGD: v <- momentum * v + (g + wd * p); p <- p - lr * v.

    With an update_mask, masked-out entries are fully frozen: neither the
    velocity nor the parameter moves there (weight decay included)."""
    g = param.grad
    if g is None:
        raise ProvenanceError("sgd_step on a tensor with no gradient")
    if state.velocity is None:
        state.velocity = np.zeros_like(param.data)
    v = momentum * state.velocity + g + weight_decay * param.data
    if update_mask is not None:
        v = v * update_mask
    state.velocity = v
    param.data = param.data - lr * v


@dataclass
class AdamState:
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    t: int = 0


def adam_step(param: Tensor, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0):
    """Bias-corrected Adam with L2 folded into the gradient."""
    g = param.grad
    if g is None:
        raise ProvenanceError("adam_step on a tensor with no gradient")
    if state.m is None:
        state.m = np.zeros_like(param.data)
        state.v = np.zeros_like(param.data)
    if weight_decay:
        g = g + weight_decay * param.data
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * g
    state.v = beta2 * state.v + (1.0 - beta2) * (g * g)
    mhat = state.m / (1.0 - beta1 ** state.t)
    vhat = state.v / (1.0 - beta2 ** state.t)
    param.data = param.data - lr * mhat / (np.sqrt(vhat) + eps)


def clip_global_norm(tensors: list[Tensor], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most
    max_norm; returns the pre-clip norm."""
    sq = 0.0
    for t in tensors:
        if t.grad is not None:
            sq += float((t.grad * t.grad).sum())
    norm = float(np.sqrt(sq))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for t in tensors:
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


# ------------------------------------------------------------- training loop

@dataclass
class TrainState:
    epoch: int = 0
    arch_t: int = 0
    sgd: dict[str, SGDState] = field(default_factory=dict)
    adam: dict[str, AdamState] = field(default_factory=dict)

    def sgd_for(self, name: str) -> SGDState:
        if name not in self.sgd:
            self.sgd[name] = SGDState()
        return self.sgd[name]

    def adam_for(self, name: str) -> AdamState:
        if name not in self.adam:
            self.adam[name] = AdamState()
        return self.adam[name]


def _batches(n: int, bs: int, order: np.ndarray):
    for s in range(0, n - bs + 1, bs):
        yield order[s:s + bs]


def _forward_loss(net, x, y, training, update_stats):
    logits = supernet_forward(net, x, training=training,
                              update_stats=update_stats)
    loss = F.cross_entropy(logits, y)
    return logits, loss


def _check_finite(loss: Tensor, where: str):
    if not np.isfinite(loss.item()):
        raise DivergenceError(f"non-finite loss during {where}")


def _w_step(net: Supernet, batch, cfg: TrainConfig, state: TrainState,
            lr: float, hook=None):
    x, y, split = batch
    if split != "train":
        raise ProvenanceError(
            f"weight step fed a {split!r} batch; only training batches allowed")
    net.set_w_trainable(True)
    net.set_arch_trainable(False)
    with Tape() as tape:
        logits, loss = _forward_loss(net, x, y, training=True,
                                     update_stats=True)
    _check_finite(loss, "weight step")
    backward(tape, loss)
    params = net.named_params()
    clip_global_norm([t for _, t in params], cfg.grad_clip)
    for name, t in params:
        sgd_step(t, state.sgd_for(name), lr, cfg.w_momentum,
                 cfg.w_weight_decay)
    if hook is not None:
        hook("w", split)
    return loss.item(), logits


def _arch_step(net: Supernet, batch, cfg: TrainConfig, state: TrainState,
               hook=None):
    x, y, split = batch
    if split != "val":
        raise ProvenanceError(
            f"architecture step fed a {split!r} batch; only validation "
            "batches allowed")
    net.set_w_trainable(False)
    net.set_arch_trainable(True)
    with Tape() as tape:
        logits, loss = _forward_loss(net, x, y, training=True,
                                     update_stats=False)
    _check_finite(loss, "architecture step")
    backward(tape, loss)
    for name, t in net.arch_named_params():
        adam_step(t, state.adam_for(name), cfg.arch_lr,
                  weight_decay=cfg.arch_weight_decay)
    if hook is not None:
        hook("arch", split)
    return loss.item()


def evaluate(net: Supernet, data, batch_size: int, masks=None):
    """Eval-mode loss and accuracy over a dataset."""
    n = data.x.shape[0]
    bs = min(batch_size, n)
    tot_loss = 0.0
    correct = 0
    seen = 0
    for s in range(0, n, bs):
        x, y = data.x[s:s + bs], data.y[s:s + bs]
        logits = supernet_forward(net, x, masks=masks, training=False)
        loss = F.cross_entropy(logits, y)
        tot_loss += loss.item() * x.shape[0]
        correct += int((logits.data.argmax(axis=1) == y).sum())
        seen += x.shape[0]
    return tot_loss / seen, correct / seen


def train_supernet(net: Supernet, data, config: TrainConfig,
                   state: Optional[TrainState] = None,
                   on_epoch: Optional[Callable] = None, hook=None):
    """Run the full supernet schedule on one dataset.

    ``data`` is the training pool; it is split train/val internally by
    config.train_fraction.  Returns (net, metrics rows, state, (train, val))
    so callers can reuse the exact split.  ``on_epoch`` is called after every
    epoch with (epoch, net, state, metrics) for checkpointing; ``hook``
    receives (phase, split) after each optimizer step.
    """
    config.validate()
    train, val = split_dataset(data, config.train_fraction, config.seed)
    n_tr, n_va = train.x.shape[0], val.x.shape[0]
    bs = min(config.batch_size, n_tr, n_va)
    val_batches = max(n_va // bs, 1)
    if config.sigma_horizon is not None:
        horizon = config.sigma_horizon
    else:
        horizon = max((config.epochs - config.warmup_epochs) * val_batches, 1)
    state = state or TrainState()
    metrics = []
    for ep in range(state.epoch, config.epochs):
        lr = cosine_lr(config.w_lr, ep, config.epochs)
        if ep >= config.warmup_epochs:
            aorder = generator(derive_seed(config.seed, "vorder", ep)).permutation(n_va)
            trig = generator(derive_seed(config.seed, "trigger", ep))
            for idx in _batches(n_va, bs, aorder):
                sigma = trigger_probability(state.arch_t, horizon,
                                            config.sigma_kind)
                fire = trig.uniform() < sigma
                state.arch_t += 1
                if fire:
                    _arch_step(net, (val.x[idx], val.y[idx], "val"),
                               config, state, hook=hook)
        worder = generator(derive_seed(config.seed, "order", ep)).permutation(n_tr)
        tot_loss = 0.0
        correct = 0
        nb = 0
        for idx in _batches(n_tr, bs, worder):
            loss_v, logits = _w_step(net, (train.x[idx], train.y[idx], "train"),
                                     config, state, lr, hook=hook)
            tot_loss += loss_v
            correct += int((logits.data.argmax(axis=1) == train.y[idx]).sum())
            nb += 1
        net.set_w_trainable(True)
        net.set_arch_trainable(True)
        nparams = count_params(net)
        metrics.append(("supernet", ep, "train", tot_loss / max(nb, 1),
                        correct / max(nb * bs, 1), lr, nparams))
        va_loss, va_acc = evaluate(net, val, bs)
        metrics.append(("supernet", ep, "val", va_loss, va_acc, lr, nparams))
        state.epoch = ep + 1
        if on_epoch is not None:
            on_epoch(ep, net, state, metrics)
    return net, metrics, state, (train, val)
