"""Hierarchical binary masks over ops, edges and weights.

Three real-valued mask levels ride on top of a trained supernet: one entry
per (edge, op) pair mirroring alpha, one per edge mirroring beta, and one per
element of every maskable kernel.  A Heaviside step at threshold tau turns
them binary (the boundary value is kept).  Training uses straight-through
estimates: the loss is computed through the binarized masks, and the Adam
transform of the binary-mask gradient is applied to the real masks, which are
then clamped to [-0.1, 1.0].  Supernet weights and architecture logits stay
frozen throughout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError, RangeError
from .numcore import Tape, Tensor, backward
from .rng import derive_seed, generator
from .searchspace import (BinaryMasks, LiveMasks, Supernet, count_params,
                          supernet_forward, supernet_loss)
from .trainer import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class MaskTrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr_w_mask: float = 1e-4
    lr_arch_mask: float = 1e-5
    lr_decay_factor: float = 10.0
    lr_decay_epoch: int = 10
    mask_init: float = 1e-2
    tau: float = 5e-3
    seed: int = 0

    def validate(self):
        if self.epochs < 0:
            raise ConfigError(f"mask epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for nm in ("lr_w_mask", "lr_arch_mask"):
            if getattr(self, nm) < 0:
                raise ConfigError(f"{nm} must be >= 0")
        if self.lr_decay_factor <= 0:
            raise ConfigError("lr_decay_factor must be > 0")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must be in (0, 1], got {self.tau}")
        return self


def binarize(m: np.ndarray, tau: float) -> np.ndarray:
    """Heaviside step H(m - tau) with the boundary kept: m >= tau maps to 1."""
    if not 0.0 < tau <= 1.0:
        raise RangeError(f"tau must be in (0, 1], got {tau}")
    return np.asarray(m) >= tau


@dataclass
class HierMasks:
    """Real-valued mask state for one supernet."""

    alpha: dict[str, np.ndarray]
    beta: dict[str, np.ndarray]
    w: dict[str, np.ndarray]
    tau: float = 5e-3

    def binarize(self) -> BinaryMasks:
        return BinaryMasks(
            alpha={k: binarize(v, self.tau) for k, v in self.alpha.items()},
            beta={k: binarize(v, self.tau) for k, v in self.beta.items()},
            w={k: binarize(v, self.tau) for k, v in self.w.items()})

    def copy(self) -> "HierMasks":
        return HierMasks(
            alpha={k: v.copy() for k, v in self.alpha.items()},
            beta={k: v.copy() for k, v in self.beta.items()},
            w={k: v.copy() for k, v in self.w.items()},
            tau=self.tau)

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for k in sorted(self.alpha):
            out.append((f"mask.alpha.{k}", self.alpha[k]))
        for k in sorted(self.beta):
            out.append((f"mask.beta.{k}", self.beta[k]))
        for k in sorted(self.w):
            out.append((f"mask.w.{k}", self.w[k]))
        return out


def init_masks(net: Supernet, config: MaskTrainConfig) -> HierMasks:
    """Fresh masks, every entry at mask_init (above tau, so the initial
    binarization keeps everything)."""
    spec = net.spec
    v = float(config.mask_init)
    alpha = {k: np.full((spec.num_edges, spec.num_ops), v)
             for k in spec.kinds}
    beta = {k: np.full(spec.num_edges, v) for k in spec.kinds}
    w = {name: np.full(net.param(name).shape, v)
         for name in net.maskable_param_names()}
    return HierMasks(alpha, beta, w, tau=config.tau)


class MaskedNet:
    """Evaluation view of a supernet under masks.  Nothing is copied; the
    binarization is recomputed from the real masks on every call."""

    def __init__(self, net: Supernet, masks: HierMasks):
        self.net = net
        self.masks = masks

    def forward(self, x, training: bool = False,
                update_stats: bool | None = None) -> Tensor:
        return supernet_forward(self.net, x, masks=self.masks.binarize(),
                                training=training, update_stats=update_stats)

    def loss(self, x, labels, training: bool = False,
             update_stats: bool | None = None) -> Tensor:
        return supernet_loss(self.net, x, labels, masks=self.masks.binarize(),
                             training=training, update_stats=update_stats)

    def count_params(self) -> int:
        return count_params(self.net, self.masks.binarize())


def project(net: Supernet, masks: HierMasks) -> MaskedNet:
    """Masked view of the supernet; evaluating it applies the current
    binarized masks with renormalised mixing weights."""
    return MaskedNet(net, masks)


def degenerate_kinds(net: Supernet, binary: BinaryMasks) -> list[str]:
    """Kinds whose every intermediate node lost all incoming edges."""
    out = []
    for kind in net.spec.kinds:
        alive = binary.beta[kind] & binary.alpha[kind].any(axis=1)
        node_dead = [not alive[lo:hi].any()
                     for lo, hi in net.spec.node_slices]
        if all(node_dead):
            out.append(kind)
    return out


def _make_live(binary: BinaryMasks) -> LiveMasks:
    return LiveMasks(
        alpha={k: Tensor(v.astype(np.float64), requires_grad=True)
               for k, v in binary.alpha.items()},
        beta={k: Tensor(v.astype(np.float64), requires_grad=True)
              for k, v in binary.beta.items()},
        w={k: Tensor(v.astype(np.float64), requires_grad=True)
           for k, v in binary.w.items()})


def mask_update(real: np.ndarray, grad: np.ndarray, state: AdamState,
                lr: float) -> np.ndarray:
    """One straight-through update: Adam-transform the binary-mask gradient,
    apply it to the real mask, clamp to [-0.1, 1.0]."""
    holder = Tensor(real.copy())
    holder.grad = grad
    adam_step(holder, state, lr, weight_decay=0.0)
    return np.clip(holder.data, -0.1, 1.0)


@dataclass
class MaskTrainState:
    adam: dict[str, AdamState] = field(default_factory=dict)
    epoch: int = 0

    def state_for(self, name: str) -> AdamState:
        if name not in self.adam:
            self.adam[name] = AdamState()
        return self.adam[name]


def train_masks(net: Supernet, masks: HierMasks, data, config: MaskTrainConfig,
                state: MaskTrainState | None = None, on_epoch=None):
    """Train the mask hierarchy on the full training set with the supernet
    frozen.  Returns (trained HierMasks, metrics rows, final state).

    ``data`` is a Dataset (the whole training pool, not the 80% weight
    split).  Metrics rows follow the shared layout (stage, epoch, split,
    loss, accuracy, lr, params).
    """
    config.validate()
    masks = masks.copy()
    masks.tau = config.tau
    state = state or MaskTrainState()
    was_w = [t.requires_grad for _, t in net.named_params()]
    was_arch = [t.requires_grad for _, t in net.arch_named_params()]
    net.set_w_trainable(False)
    net.set_arch_trainable(False)
    metrics = []
    n = data.x.shape[0]
    bs = min(config.batch_size, n)
    try:
        for ep in range(state.epoch, config.epochs):
            decayed = ep >= config.lr_decay_epoch
            lr_w = config.lr_w_mask / (config.lr_decay_factor if decayed else 1.0)
            lr_arch = config.lr_arch_mask / (config.lr_decay_factor if decayed else 1.0)
            order = generator(derive_seed(config.seed, "maskorder", ep)).permutation(n)
            tot_loss = 0.0
            tot_correct = 0
            nb = 0
            for s in range(0, n - bs + 1, bs):
                idx = order[s:s + bs]
                xb, yb = data.x[idx], data.y[idx]
                binary = masks.binarize()
                live = _make_live(binary)
                with Tape() as tape:
                    logits = supernet_forward(net, xb, masks=binary,
                                              training=True,
                                              update_stats=False, live=live)
                    from .numcore import functional as F
                    loss = F.cross_entropy(logits, yb)
                if not np.isfinite(loss.item()):
                    raise DivergenceError(
                        f"non-finite mask-training loss at epoch {ep}")
                backward(tape, loss)
                for kind in net.spec.kinds:
                    masks.alpha[kind] = mask_update(
                        masks.alpha[kind], live.alpha[kind].grad,
                        state.state_for(f"alpha.{kind}"), lr_arch)
                    masks.beta[kind] = mask_update(
                        masks.beta[kind], live.beta[kind].grad,
                        state.state_for(f"beta.{kind}"), lr_arch)
                for name, t in live.w.items():
                    masks.w[name] = mask_update(
                        masks.w[name], t.grad,
                        state.state_for(f"w.{name}"), lr_w)
                tot_loss += loss.item()
                tot_correct += int((logits.data.argmax(axis=1) == yb).sum())
                nb += 1
            binary = masks.binarize()
            dead = degenerate_kinds(net, binary)
            if dead:
                log.warning("mask search degenerate: every node masked off "
                            "in %s cells", ", ".join(dead))
            metrics.append(("mask", ep, "train",
                            tot_loss / max(nb, 1),
                            tot_correct / max(nb * bs, 1),
                            lr_w, count_params(net, binary)))
            state.epoch = ep + 1
            if on_epoch is not None:
                on_epoch(ep, masks, state, metrics)
    finally:
        for (_, t), flag in zip(net.named_params(), was_w):
            t.requires_grad = flag
        for (_, t), flag in zip(net.arch_named_params(), was_arch):
            t.requires_grad = flag
    return masks, metrics, state


def sparsity_report(masks: HierMasks) -> dict:
    """Kept fractions after binarization, per level."""
    binary = masks.binarize()
    out = {}
    for level, group in (("alpha", binary.alpha), ("beta", binary.beta),
                         ("w", binary.w)):
        total = sum(int(a.size) for a in group.values())
        kept = sum(int(a.sum()) for a in group.values())
        out[level] = {"total": total, "kept": kept,
                      "fraction": kept / total if total else 1.0}
    return out
