"""Reverse-mode automatic differentiation on an explicit tape.

A Tensor wraps a float64 numpy array.  Operations from ``functional`` record
entries on the innermost active Tape; with no active tape they evaluate
eagerly without recording, which doubles as the no-grad mode used for
evaluation and finite differencing.  ``backward`` walks the tape in reverse
and accumulates gradients for every tensor recorded with requires_grad set.

Forward and backward rules are registered per op name in FORWARD / BACKWARD;
``functional`` fills both registries at import.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional

import numpy as np

from ..errors import NumericError, ProvenanceError, RankError

FORWARD: dict[str, Callable] = {}
BACKWARD: dict[str, Callable] = {}

_TAPE_STACK: list["Tape"] = []
_ids = itertools.count(1)


def active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A float64 array plus grad slot.  Data is owned, never aliased."""

    __slots__ = ("data", "requires_grad", "grad", "tid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError("tensor initialised with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tid = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal fast path for op outputs; skips the finiteness scan
        t = object.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.tid = next(_ids)
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag}, id={self.tid})"


class TapeEntry:
    __slots__ = ("op", "input_ids", "output_id", "attrs", "saved")

    def __init__(self, op, input_ids, output_id, attrs, saved):
        self.op = op
        self.input_ids = input_ids
        self.output_id = output_id
        self.attrs = attrs
        self.saved = saved


class Tape:
    """Ordered record of primitive applications inside a ``with`` block."""

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.tensors: dict[int, Tensor] = {}
        self._needs: set[int] = set()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
               attrs: dict, saved: dict):
        needed = False
        for t in inputs:
            self.tensors.setdefault(t.tid, t)
            if t.requires_grad or t.tid in self._needs:
                needed = True
        self.tensors[output.tid] = output
        if needed:
            self._needs.add(output.tid)
        self.entries.append(TapeEntry(
            op, tuple(t.tid for t in inputs), output.tid, attrs, saved))

    def needs_grad(self, tid: int) -> bool:
        return tid in self._needs or self.tensors[tid].requires_grad

    def replay(self) -> float:
        """Recompute every entry from current input data and compare with the
        recorded outputs.  Returns the max absolute deviation (0.0 when the
        leaves are unchanged: recorded forwards replay bit-identically)."""
        worst = 0.0
        for e in self.entries:
            ref = self.tensors[e.output_id].data
            out = FORWARD[e.op](e, self)
            if out.shape != ref.shape:
                return float("inf")
            d = np.abs(out - ref)
            if d.size:
                worst = max(worst, float(d.max()))
        return worst


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep seeding d(loss)/d(loss) = 1.

    Returns a map from tensor id to gradient for every requires_grad tensor
    on the tape, and stores the same arrays in each tensor's ``.grad``
    (overwriting, not accumulating, any previous value).
    """
    if loss.data.ndim != 0:
        raise RankError(f"loss must be a scalar, got shape {loss.data.shape}")
    produced = {e.output_id for e in tape.entries}
    if loss.tid not in produced:
        raise ProvenanceError("loss tensor was not produced through this tape")
    grads: dict[int, np.ndarray] = {loss.tid: np.ones((), dtype=np.float64)}
    for e in reversed(tape.entries):
        g = grads.get(e.output_id)
        if g is None or e.output_id not in tape._needs:
            continue
        need = tuple(tape.needs_grad(i) for i in e.input_ids)
        for pos, garr in BACKWARD[e.op](e, g, tape, need):
            tid = e.input_ids[pos]
            if tid in grads:
                grads[tid] = grads[tid] + garr
            else:
                grads[tid] = np.asarray(garr, dtype=np.float64)
    out: dict[int, np.ndarray] = {}
    for tid, t in tape.tensors.items():
        if t.requires_grad:
            t.grad = grads.get(tid)
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            out[tid] = t.grad
    return out


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      step: float = 1e-5) -> float:
    """Max relative error between tape gradients of ``f`` at ``x`` and central
    finite differences with the given step.

    ``f`` must map a Tensor to a scalar Tensor.  The analytic gradient is
    taken from one taped evaluation; each coordinate is then probed twice
    with no tape active.
    """
    if step <= 0:
        raise RankError("step must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(probe)
    backward(tape, loss)
    analytic = probe.grad.reshape(-1)
    flat = probe.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = f(Tensor(probe.data.copy())).item()
        flat[i] = keep - step
        lo = f(Tensor(probe.data.copy())).item()
        flat[i] = keep
        num = (hi - lo) / (2.0 * step)
        err = abs(analytic[i] - num) / (abs(num) + 1e-8)
        worst = max(worst, err)
    return worst
