"""Finite-difference audit of the reverse-mode gradients.

Every differentiable building block is checked against central differences
in double precision: the seven candidate ops at both strides, the op mixture
w.r.t. its mixing logits, the node combination w.r.t. its edge logits,
batch norm, and a whole micro supernet loss w.r.t. every weight and both
logit tensors.

Losses are random weighted sums, never plain sums: after a training-mode
batch norm a symmetric loss is nearly invariant to the parameters upstream
and its true gradient collapses to rounding noise, which makes relative
error meaningless.  Draws that land too close to a ReLU or max-pool kink
are rejected before any gradient is looked at (the margin test sees only
the forward activations) and redrawn from a deterministically bumped seed.
"""

from __future__ import annotations

import time

import numpy as np

from .errors import NumericError
from .numcore import functional as F
from .numcore.ops import CANDIDATE_OPS, init_op_params, op_forward
from .numcore.tensor import Tape, Tensor, backward
from .rng import derive_seed, generator
from .searchspace import (SearchSpaceSpec, build_supernet, mixed_op_forward,
                          node_forward, supernet_forward)

TOLERANCE = 1e-4
RELU_MARGIN = 1e-4
POOL_MARGIN = 1e-4
FD_STEP = 1e-5
MAX_REDRAWS = 25


def _pool_gap(x: np.ndarray, stride: int) -> float:
    """Smallest top-two gap over all 3x3 pooling windows."""
    b, c, h, w = x.shape
    pad = np.full((b, c, h + 2, w + 2), -np.inf)
    pad[:, :, 1:-1, 1:-1] = x
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    taps = []
    for di in range(3):
        for dj in range(3):
            taps.append(pad[:, :, di:di + (ho - 1) * stride + 1:stride,
                            dj:dj + (wo - 1) * stride + 1:stride])
    v = np.sort(np.stack(taps), axis=0)
    gap = v[-1] - v[-2]
    finite = gap[np.isfinite(gap)]
    return float(finite.min()) if finite.size else float("inf")


def _margins(tape: Tape) -> tuple[float, float]:
    """(min |relu input|, min pool top-two gap) over one recorded forward."""
    relu_m = float("inf")
    pool_m = float("inf")
    for e in tape.entries:
        if e.op == "relu":
            x = tape.tensors[e.input_ids[0]].data
            if x.size:
                relu_m = min(relu_m, float(np.abs(x).min()))
        elif e.op == "max_pool3":
            x = tape.tensors[e.input_ids[0]].data
            pool_m = min(pool_m, _pool_gap(x, e.attrs["stride"]))
    return relu_m, pool_m


def _fd_errors(loss_fn, targets: list[Tensor], tape: Tape,
               loss: Tensor) -> float:
    """Worst relative error across all coordinates of all targets.

    One backward pass supplies every analytic gradient; the numeric side
    perturbs each coordinate in place and re-runs the untaped forward."""
    backward(tape, loss)
    worst = 0.0
    for t in targets:
        if t.grad is None:
            raise NumericError("target tensor received no gradient")
        analytic = t.grad.reshape(-1).copy()
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + FD_STEP
            hi = loss_fn().item()
            flat[i] = keep - FD_STEP
            lo = loss_fn().item()
            flat[i] = keep
            num = (hi - lo) / (2.0 * FD_STEP)
            err = abs(analytic[i] - num) / (abs(num) + 1e-8)
            worst = max(worst, err)
    return worst


def _run_check(make, seed: int) -> float:
    """Reject kink-adjacent draws, then measure the worst relative error.

    ``make(seed)`` returns (loss_fn, targets): a zero-argument forward that
    reads the target tensors in place and never opens a tape of its own."""
    for attempt in range(MAX_REDRAWS):
        s = seed if attempt == 0 else derive_seed(seed, "redraw", attempt)
        loss_fn, targets = make(s)
        with Tape() as tape:
            loss = loss_fn()
        relu_m, pool_m = _margins(tape)
        if relu_m >= RELU_MARGIN and pool_m >= POOL_MARGIN:
            return _fd_errors(loss_fn, targets, tape, loss)
    raise NumericError(
        f"no kink-free draw found in {MAX_REDRAWS} attempts (seed {seed})")


def _rand_loss(y: Tensor, seed: int) -> Tensor:
    r = generator(derive_seed(seed, "loss")).normal(0.0, 1.0, y.data.shape)
    return F.sum_all(F.mul(y, Tensor(r)))


def _make_op_check(kind: str, stride: int):
    def make(seed):
        rng = generator(seed)
        c = 2
        params = init_op_params(kind, c, rng)
        x = Tensor(rng.normal(0.0, 1.0, (1, c, 6, 6)), requires_grad=True)

        def loss_fn():
            y = op_forward(kind, x, params, stride=stride, training=True,
                           update_stats=False)
            return _rand_loss(y, seed)

        return loss_fn, [x]
    return make


def _make_bn_check(which: str):
    def make(seed):
        rng = generator(seed)
        c = 3
        x = Tensor(rng.normal(0.0, 1.0, (2, c, 4, 4)))
        gamma = Tensor(rng.normal(1.0, 0.2, c))
        beta = Tensor(rng.normal(0.0, 0.2, c))
        rm = np.zeros(c)
        rv = np.ones(c)
        target = {"x": x, "gamma": gamma, "beta": beta}[which]
        target.requires_grad = True

        def loss_fn():
            y = F.batch_norm(x, gamma, beta, rm, rv, training=True)
            return _rand_loss(y, seed)

        return loss_fn, [target]
    return make


_MICRO = SearchSpaceSpec(nodes_per_cell=4, num_cells=1, init_channels=2,
                         num_candidate_ops=2, num_classes=2, in_channels=2,
                         reduction_cells=(),
                         candidate_ops=("sep_conv_3x3", "identity"))


def _micro_net(seed):
    rng = generator(derive_seed(seed, "data"))
    net = build_supernet(_MICRO, seed)
    x = Tensor(rng.normal(0.0, 1.0, (2, _MICRO.in_channels, 6, 6)))
    y = rng.integers(0, _MICRO.num_classes, 2)
    return net, x, y


def _make_mixed_check():
    def make(seed):
        net, x, _y = _micro_net(seed)

        def loss_fn():
            out = mixed_op_forward(0, x, net, kind="normal", stride=1,
                                   training=True)
            return _rand_loss(out, seed)

        return loss_fn, [net.arch["normal"].alpha]
    return make


def _make_node_check():
    def make(seed):
        net, _x, _y = _micro_net(seed)
        rng = generator(derive_seed(seed, "inputs"))
        c = _MICRO.init_channels
        ins = [Tensor(rng.normal(0.0, 1.0, (2, c, 6, 6))) for _ in range(2)]

        def loss_fn():
            out = node_forward(0, ins, net, kind="normal", training=True)
            return _rand_loss(out, seed)

        return loss_fn, [net.arch["normal"].beta]
    return make


def _make_supernet_check():
    def make(seed):
        net, x, y = _micro_net(seed)

        def loss_fn():
            logits = supernet_forward(net, x, training=True,
                                      update_stats=False)
            return F.cross_entropy(logits, y)

        targets = [t for _, t in net.named_params()]
        targets += [t for _, t in net.arch_named_params()]
        return loss_fn, targets
    return make


def run_gradcheck(num_seeds: int = 10, base_seed: int = 2026,
                  tolerance: float = TOLERANCE):
    """Run the whole audit; returns a report dict.

    Rows are (check name, seed index, max relative error).  The supernet
    row aggregates the loss gradient over every weight tensor plus both
    logit tensors and reports the worst coordinate.
    """
    if num_seeds < 1:
        raise NumericError("num_seeds must be at least 1")
    t0 = time.time()
    rows = []
    for k in range(num_seeds):
        seed = derive_seed(base_seed, "gradcheck", k)
        for kind in CANDIDATE_OPS:
            for stride in (1, 2):
                err = _run_check(_make_op_check(kind, stride),
                                 derive_seed(seed, kind, stride))
                rows.append((f"op.{kind}.s{stride}", k, float(err)))
        for which in ("x", "gamma", "beta"):
            err = _run_check(_make_bn_check(which),
                             derive_seed(seed, "bn", which))
            rows.append((f"bn.{which}", k, float(err)))
        err = _run_check(_make_mixed_check(), derive_seed(seed, "mixed"))
        rows.append(("mixed_op.alpha", k, float(err)))
        err = _run_check(_make_node_check(), derive_seed(seed, "node"))
        rows.append(("node.beta", k, float(err)))
        err = _run_check(_make_supernet_check(),
                         derive_seed(seed, "supernet"))
        rows.append(("supernet.all_params", k, float(err)))
    max_err = max(r[2] for r in rows)
    return {
        "rows": rows,
        "max_err": max_err,
        "tolerance": tolerance,
        "passed": bool(max_err < tolerance),
        "seconds": time.time() - t0,
        "num_seeds": num_seeds,
    }
