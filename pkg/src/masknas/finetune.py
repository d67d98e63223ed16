"""Fine-tuning of a masked network.

The masked supernet is trained further with the masks frozen: surviving
weights move, masked-out weight entries and every parameter of a dead branch
stay exactly as they were (they are excluded from the optimizer, so weight
decay cannot drift them).  Warm mode starts from the supernet weights and
keeps its batch-norm buffers, so a zero-epoch fine-tune evaluates
bit-identically to the masked supernet; random mode redraws weights from a
derived seed while keeping the learned architecture state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DivergenceError
from .numcore import Tape, backward
from .numcore import functional as F
from .rng import derive_seed
from .rng import generator
from .masker import HierMasks, MaskedNet, project
from .searchspace import (BinaryMasks, Supernet, build_supernet, count_params,
                          supernet_forward)
from .trainer import SGDState, clip_global_norm, cosine_lr, evaluate, sgd_step

INIT_MODES = ("warm", "random")


@dataclass
class FinetuneConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0
    init_mode: str = "warm"
    seed: int = 0

    def validate(self):
        if self.epochs < 0:
            raise ConfigError(f"finetune epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be > 0")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(
                f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        return self


def build_finetune_model(net: Supernet, masks: HierMasks,
                         config: FinetuneConfig) -> Supernet:
    """Model to fine-tune.  Warm: a deep copy of the supernet, buffers
    included.  Random: freshly initialised weights from a seed derived from
    config.seed, with the learned alpha/beta copied over so the architecture
    stays fixed."""
    config.validate()
    if config.init_mode == "warm":
        return net.clone()
    fresh = build_supernet(net.spec, derive_seed(config.seed, "reinit"))
    for kind in net.spec.kinds:
        fresh.arch[kind].alpha.data = net.arch[kind].alpha.data.copy()
        fresh.arch[kind].beta.data = net.arch[kind].beta.data.copy()
    return fresh


def trainable_under_masks(net: Supernet, binary: BinaryMasks):
    """(name, tensor, update_mask) for parameters alive under the masks.
    Dead-branch parameters are omitted entirely; surviving maskable kernels
    carry their elementwise keep mask, everything else updates freely."""
    out = []
    spec = net.spec
    for name, t in net.named_params():
        parts = name.split(".")
        if parts[0] in ("stem", "head") or parts[1] in ("pre0", "pre1"):
            out.append((name, t, None))
            continue
        cell = net.cells[int(parts[0][4:])]
        e = int(parts[1][1:])
        oi = spec.ops.index(parts[2])
        a = binary.alpha[cell.kind]
        b = binary.beta[cell.kind]
        if not (b[e] and a[e].any() and a[e, oi]):
            continue
        keep = binary.w.get(name)
        if keep is not None and not keep.all():
            out.append((name, t, keep.astype(np.float64)))
        else:
            out.append((name, t, None))
    return out


@dataclass
class FinetuneState:
    epoch: int = 0
    sgd: dict[str, SGDState] = field(default_factory=dict)

    def sgd_for(self, name: str) -> SGDState:
        if name not in self.sgd:
            self.sgd[name] = SGDState()
        return self.sgd[name]


def finetune(net: Supernet, masks: HierMasks, train_data, test_data,
             config: FinetuneConfig, state: Optional[FinetuneState] = None,
             on_epoch=None, model: Optional[Supernet] = None):
    """Fine-tune under frozen masks.  Returns (model, metrics, state) where
    model is the trained copy (the input supernet is untouched).

    Passing ``model`` skips the build step; resuming callers hand back the
    partially trained copy together with its optimizer state."""
    config.validate()
    if model is None:
        model = build_finetune_model(net, masks, config)
    binary = masks.binarize()
    params = trainable_under_masks(model, binary)
    nparams = count_params(model, binary)
    state = state or FinetuneState()
    metrics = []
    n = train_data.x.shape[0]
    bs = min(config.batch_size, n)
    model.set_arch_trainable(False)
    for ep in range(state.epoch, config.epochs):
        lr = cosine_lr(config.lr, ep, config.epochs)
        order = generator(derive_seed(config.seed, "ftorder", ep)).permutation(n)
        tot_loss = 0.0
        correct = 0
        nb = 0
        for s in range(0, n - bs + 1, bs):
            idx = order[s:s + bs]
            xb, yb = train_data.x[idx], train_data.y[idx]
            for _, t, _m in params:
                t.requires_grad = True
            with Tape() as tape:
                logits = supernet_forward(model, xb, masks=binary,
                                          training=True, update_stats=True)
                loss = F.cross_entropy(logits, yb)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite fine-tune loss at epoch {ep}")
            backward(tape, loss)
            clip_global_norm([t for _, t, _m in params], config.grad_clip)
            for name, t, umask in params:
                sgd_step(t, state.sgd_for(name), lr, config.momentum,
                         config.weight_decay, update_mask=umask)
            tot_loss += loss.item()
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            nb += 1
        metrics.append(("finetune", ep, "train", tot_loss / max(nb, 1),
                        correct / max(nb * bs, 1), lr, nparams))
        te_loss, te_acc = evaluate(model, test_data, bs, masks=binary)
        metrics.append(("finetune", ep, "test", te_loss, te_acc, lr, nparams))
        state.epoch = ep + 1
        if on_epoch is not None:
            on_epoch(ep, model, state, metrics)
    return model, metrics, state


def epochs_to_target(metrics, target_loss: float, split: str = "test") -> int:
    """First epoch whose eval loss reached the target; sentinel epochs+1 when
    it never did.  Counts epochs as 1-based so 'reached after one epoch' is 1."""
    epochs = [r for r in metrics if r[0] == "finetune" and r[2] == split]
    for r in epochs:
        if r[3] <= target_loss:
            return r[1] + 1
    return len(epochs) + 1


def masked_eval(net: Supernet, masks: HierMasks, data, batch_size: int = 128):
    """Eval-mode loss and accuracy of the masked supernet view."""
    return evaluate(net, data, batch_size, masks=masks.binarize())
