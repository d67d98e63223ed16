"""Differentiable primitives.

Each function validates shapes, computes the forward value, and records a
tape entry when a tape is active.  The paired forward (replay) and backward
rules are registered in the tensor-module registries.  Everything here is
float64 and eager; no lazy graphs.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..errors import DimensionError, RangeError, RankError
from . import kernels as K
from .tensor import BACKWARD, FORWARD, Tensor, active_tape

BN_EPS = 1e-10
BN_MOMENTUM = 0.1


def _emit(op: str, inputs: tuple[Tensor, ...], data: np.ndarray,
          attrs: Optional[dict] = None, saved: Optional[dict] = None) -> Tensor:
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, out, attrs or {}, saved or {})
    return out


def _data(tape, entry, pos):
    return tape.tensors[entry.input_ids[pos]].data


# ---------------------------------------------------------------- arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    return _emit("add", (a, b), a.data + b.data)


FORWARD["add"] = lambda e, t: _data(t, e, 0) + _data(t, e, 1)
BACKWARD["add"] = lambda e, g, t, need: [(0, g), (1, g)]


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes differ: {a.shape} vs {b.shape}")
    return _emit("sub", (a, b), a.data - b.data)


FORWARD["sub"] = lambda e, t: _data(t, e, 0) - _data(t, e, 1)
BACKWARD["sub"] = lambda e, g, t, need: [(0, g), (1, -g)]


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")
    return _emit("mul", (a, b), a.data * b.data)


FORWARD["mul"] = lambda e, t: _data(t, e, 0) * _data(t, e, 1)
BACKWARD["mul"] = lambda e, g, t, need: [
    (0, g * _data(t, e, 1)), (1, g * _data(t, e, 0))]


def smul(a: Tensor, s: Tensor) -> Tensor:
    """Scale tensor ``a`` by the rank-0 tensor ``s``."""
    if s.ndim != 0:
        raise RankError(f"smul scale must be rank 0, got shape {s.shape}")
    return _emit("smul", (a, s), a.data * s.data)


FORWARD["smul"] = lambda e, t: _data(t, e, 0) * _data(t, e, 1)
BACKWARD["smul"] = lambda e, g, t, need: [
    (0, g * _data(t, e, 1)),
    (1, np.asarray((g * _data(t, e, 0)).sum()))]


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient for the constant)."""
    c = float(c)
    return _emit("scale", (a,), a.data * c, attrs={"c": c})


FORWARD["scale"] = lambda e, t: _data(t, e, 0) * e.attrs["c"]
BACKWARD["scale"] = lambda e, g, t, need: [(0, g * e.attrs["c"])]


def div_scalar(a: Tensor, s: Tensor) -> Tensor:
    """Divide tensor ``a`` by the rank-0 tensor ``s``."""
    if s.ndim != 0:
        raise RankError(f"div_scalar divisor must be rank 0, got {s.shape}")
    return _emit("div_scalar", (a, s), a.data / s.data)


FORWARD["div_scalar"] = lambda e, t: _data(t, e, 0) / _data(t, e, 1)


def _div_scalar_bwd(e, g, t, need):
    a, s = _data(t, e, 0), _data(t, e, 1)
    out = [(0, g / s)]
    if need[1]:
        out.append((1, np.asarray(-(g * a).sum() / (s * s))))
    return out


BACKWARD["div_scalar"] = _div_scalar_bwd


def sum_all(a: Tensor) -> Tensor:
    return _emit("sum_all", (a,), np.asarray(a.data.sum()))


FORWARD["sum_all"] = lambda e, t: np.asarray(_data(t, e, 0).sum())
BACKWARD["sum_all"] = lambda e, g, t, need: [
    (0, np.broadcast_to(g, _data(t, e, 0).shape))]


def relu(x: Tensor) -> Tensor:
    return _emit("relu", (x,), np.maximum(x.data, 0.0))


FORWARD["relu"] = lambda e, t: np.maximum(_data(t, e, 0), 0.0)
BACKWARD["relu"] = lambda e, g, t, need: [(0, g * (_data(t, e, 0) > 0))]


# ------------------------------------------------------------- index helpers

def row(m: Tensor, i: int) -> Tensor:
    if m.ndim != 2:
        raise RankError(f"row expects a matrix, got shape {m.shape}")
    if not 0 <= i < m.shape[0]:
        raise RangeError(f"row index {i} out of range for {m.shape}")
    return _emit("row", (m,), m.data[i].copy(), attrs={"i": i})


FORWARD["row"] = lambda e, t: _data(t, e, 0)[e.attrs["i"]].copy()


def _row_bwd(e, g, t, need):
    gm = np.zeros_like(_data(t, e, 0))
    gm[e.attrs["i"]] = g
    return [(0, gm)]


BACKWARD["row"] = _row_bwd


def slice1d(v: Tensor, lo: int, hi: int) -> Tensor:
    if v.ndim != 1:
        raise RankError(f"slice1d expects a vector, got shape {v.shape}")
    if not 0 <= lo < hi <= v.shape[0]:
        raise RangeError(f"slice [{lo}:{hi}] invalid for length {v.shape[0]}")
    return _emit("slice1d", (v,), v.data[lo:hi].copy(),
                 attrs={"lo": lo, "hi": hi})


FORWARD["slice1d"] = lambda e, t: _data(t, e, 0)[e.attrs["lo"]:e.attrs["hi"]].copy()


def _slice1d_bwd(e, g, t, need):
    gv = np.zeros_like(_data(t, e, 0))
    gv[e.attrs["lo"]:e.attrs["hi"]] = g
    return [(0, gv)]


BACKWARD["slice1d"] = _slice1d_bwd


def select(v: Tensor, i: int) -> Tensor:
    if v.ndim != 1:
        raise RankError(f"select expects a vector, got shape {v.shape}")
    if not 0 <= i < v.shape[0]:
        raise RangeError(f"select index {i} out of range for {v.shape}")
    return _emit("select", (v,), np.asarray(v.data[i]), attrs={"i": i})


FORWARD["select"] = lambda e, t: np.asarray(_data(t, e, 0)[e.attrs["i"]])


def _select_bwd(e, g, t, need):
    gv = np.zeros_like(_data(t, e, 0))
    gv[e.attrs["i"]] = g
    return [(0, gv)]


BACKWARD["select"] = _select_bwd


# ------------------------------------------------------------------ conv/pool

def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
           dilation: int = 1, groups: int = 1) -> Tensor:
    if x.ndim != 4:
        raise RankError(f"conv2d input must be 4-D NCHW, got shape {x.shape}")
    if w.ndim != 4:
        raise RankError(f"conv2d weight must be 4-D, got shape {w.shape}")
    if stride < 1 or dilation < 1 or padding < 0 or groups < 1:
        raise RangeError("conv2d stride/dilation must be >= 1, padding >= 0")
    cin = x.shape[1]
    cout, cig, kh, kw = w.shape
    if cin % groups or cout % groups or cig != cin // groups:
        raise DimensionError(
            f"conv2d channel mismatch: input {cin}, weight {w.shape}, "
            f"groups {groups}")
    ho = (x.shape[2] + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (x.shape[3] + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d output would be empty for input {x.shape}, "
            f"kernel {(kh, kw)}, stride {stride}, padding {padding}")
    attrs = {"stride": stride, "padding": padding,
             "dilation": dilation, "groups": groups}
    y = K.conv2d_fwd(x.data, w.data, stride, padding, dilation, groups)
    return _emit("conv2d", (x, w), y, attrs=attrs)


def _conv2d_fwd_rule(e, t):
    a = e.attrs
    return K.conv2d_fwd(_data(t, e, 0), _data(t, e, 1),
                        a["stride"], a["padding"], a["dilation"], a["groups"])


def _conv2d_bwd_rule(e, g, t, need):
    a = e.attrs
    g = np.ascontiguousarray(g)
    gx, gw = K.conv2d_bwd(_data(t, e, 0), _data(t, e, 1), g,
                          a["stride"], a["padding"], a["dilation"], a["groups"])
    return [(0, gx), (1, gw)]


FORWARD["conv2d"] = _conv2d_fwd_rule
BACKWARD["conv2d"] = _conv2d_bwd_rule


def _check_pool_input(x: Tensor, stride: int):
    if x.ndim != 4:
        raise RankError(f"pool input must be 4-D NCHW, got shape {x.shape}")
    if stride not in (1, 2):
        raise RangeError(f"pool stride must be 1 or 2, got {stride}")


def max_pool3(x: Tensor, stride: int = 1) -> Tensor:
    """3x3 max pooling, padding 1."""
    _check_pool_input(x, stride)
    y, idx = K.maxpool3_fwd(x.data, stride)
    return _emit("max_pool3", (x,), y, attrs={"stride": stride},
                 saved={"idx": idx})


FORWARD["max_pool3"] = lambda e, t: K.maxpool3_fwd(
    _data(t, e, 0), e.attrs["stride"])[0]
BACKWARD["max_pool3"] = lambda e, g, t, need: [
    (0, K.maxpool3_bwd(_data(t, e, 0).shape, e.saved["idx"],
                       np.ascontiguousarray(g), e.attrs["stride"]))]


def avg_pool3(x: Tensor, stride: int = 1) -> Tensor:
    """3x3 average pooling, padding 1; padded cells are excluded from the
    divisor so a constant input stays constant."""
    _check_pool_input(x, stride)
    y = K.avgpool3_fwd(x.data, stride)
    return _emit("avg_pool3", (x,), y, attrs={"stride": stride})


FORWARD["avg_pool3"] = lambda e, t: K.avgpool3_fwd(
    _data(t, e, 0), e.attrs["stride"])
BACKWARD["avg_pool3"] = lambda e, g, t, need: [
    (0, K.avgpool3_bwd(_data(t, e, 0).shape,
                       np.ascontiguousarray(g), e.attrs["stride"]))]


def subsample2(x: Tensor) -> Tensor:
    """Parameter-free stride-2 spatial subsampling (every other pixel)."""
    if x.ndim != 4:
        raise RankError(f"subsample2 input must be 4-D, got shape {x.shape}")
    return _emit("subsample2", (x,), np.ascontiguousarray(x.data[:, :, ::2, ::2]))


FORWARD["subsample2"] = lambda e, t: np.ascontiguousarray(
    _data(t, e, 0)[:, :, ::2, ::2])


def _subsample2_bwd(e, g, t, need):
    gx = np.zeros_like(_data(t, e, 0))
    gx[:, :, ::2, ::2] = g
    return [(0, gx)]


BACKWARD["subsample2"] = _subsample2_bwd


# ------------------------------------------------------------------ batchnorm

def batch_norm(x: Tensor, gamma: Optional[Tensor], beta: Optional[Tensor],
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, eps: float = BN_EPS,
               stats_out: Optional[dict] = None) -> Tensor:
    """Per-channel normalisation over (batch, H, W).

    Training mode normalises with biased batch statistics; eval mode uses the
    provided running statistics.  Buffers are never written here: in training
    mode the batch statistics are copied into ``stats_out`` (keys ``mean`` and
    ``var``) so the owning layer can update its buffers explicitly.
    """
    if x.ndim != 4:
        raise RankError(f"batch_norm input must be 4-D, got shape {x.shape}")
    c = x.shape[1]
    affine = gamma is not None
    if affine and (gamma.shape != (c,) or beta.shape != (c,)):
        raise DimensionError(
            f"batch_norm affine shape {gamma.shape} does not match {c} channels")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise DimensionError("batch_norm running stats do not match channels")
    saved: dict = {}
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if stats_out is not None:
            stats_out["mean"] = mean
            stats_out["var"] = var
    else:
        mean = running_mean.copy()
        var = running_var.copy()
        saved["rmean"] = mean
        saved["rvar"] = var
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * istd[None, :, None, None]
    y = xhat
    if affine:
        y = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    saved["xhat"] = xhat
    saved["istd"] = istd
    inputs = (x, gamma, beta) if affine else (x,)
    return _emit("batch_norm", inputs, y,
                 attrs={"training": bool(training), "affine": affine,
                        "eps": float(eps)},
                 saved=saved)


def _bn_fwd_rule(e, t):
    x = _data(t, e, 0)
    if e.attrs["training"]:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    else:
        mean, var = e.saved["rmean"], e.saved["rvar"]
    istd = 1.0 / np.sqrt(var + e.attrs["eps"])
    xhat = (x - mean[None, :, None, None]) * istd[None, :, None, None]
    if e.attrs["affine"]:
        g, b = _data(t, e, 1), _data(t, e, 2)
        return xhat * g[None, :, None, None] + b[None, :, None, None]
    return xhat


def _bn_bwd_rule(e, g, t, need):
    xhat, istd = e.saved["xhat"], e.saved["istd"]
    if e.attrs["affine"]:
        gamma = _data(t, e, 1)
        gxhat = g * gamma[None, :, None, None]
    else:
        gxhat = g
    out = []
    if e.attrs["training"]:
        b, _, h, w = xhat.shape
        n = b * h * w
        s1 = gxhat.sum(axis=(0, 2, 3))
        s2 = (gxhat * xhat).sum(axis=(0, 2, 3))
        gx = (istd[None, :, None, None] / n) * (
            n * gxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None])
    else:
        gx = gxhat * istd[None, :, None, None]
    out.append((0, gx))
    if e.attrs["affine"]:
        if need[1]:
            out.append((1, (g * xhat).sum(axis=(0, 2, 3))))
        if need[2]:
            out.append((2, g.sum(axis=(0, 2, 3))))
    return out


FORWARD["batch_norm"] = _bn_fwd_rule
BACKWARD["batch_norm"] = _bn_bwd_rule


# ------------------------------------------------------------------- head ops

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 2 or w.ndim != 2:
        raise RankError(f"linear expects matrices, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise DimensionError(
            f"linear shapes incompatible: x {x.shape}, w {w.shape}, b {b.shape}")
    return _emit("linear", (x, w, b), x.data @ w.data.T + b.data)


FORWARD["linear"] = lambda e, t: _data(t, e, 0) @ _data(t, e, 1).T + _data(t, e, 2)


def _linear_bwd(e, g, t, need):
    x, w = _data(t, e, 0), _data(t, e, 1)
    out = [(0, g @ w)]
    if need[1]:
        out.append((1, g.T @ x))
    if need[2]:
        out.append((2, g.sum(axis=0)))
    return out


BACKWARD["linear"] = _linear_bwd


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_channels needs at least one input")
    ref = parts[0]
    for p in parts:
        if p.ndim != 4:
            raise RankError(f"concat_channels inputs must be 4-D, got {p.shape}")
        if (p.shape[0], p.shape[2], p.shape[3]) != (ref.shape[0], ref.shape[2], ref.shape[3]):
            raise DimensionError(
                f"concat_channels mismatch: {p.shape} vs {ref.shape}")
    sizes = [p.shape[1] for p in parts]
    y = np.concatenate([p.data for p in parts], axis=1)
    return _emit("concat_channels", tuple(parts), y, attrs={"sizes": sizes})


FORWARD["concat_channels"] = lambda e, t: np.concatenate(
    [_data(t, e, i) for i in range(len(e.input_ids))], axis=1)


def _concat_bwd(e, g, t, need):
    out = []
    off = 0
    for i, c in enumerate(e.attrs["sizes"]):
        if need[i]:
            out.append((i, np.ascontiguousarray(g[:, off:off + c])))
        off += c
    return out


BACKWARD["concat_channels"] = _concat_bwd


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise RankError(f"global_avg_pool input must be 4-D, got {x.shape}")
    return _emit("global_avg_pool", (x,), x.data.mean(axis=(2, 3)))


FORWARD["global_avg_pool"] = lambda e, t: _data(t, e, 0).mean(axis=(2, 3))


def _gap_bwd(e, g, t, need):
    shp = _data(t, e, 0).shape
    n = shp[2] * shp[3]
    return [(0, np.broadcast_to(g[:, :, None, None] / n, shp))]


BACKWARD["global_avg_pool"] = _gap_bwd


# ----------------------------------------------------------- softmax and loss

def _softmax_vec(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax1d(x: Tensor) -> Tensor:
    if x.ndim != 1:
        raise RankError(f"softmax1d expects a vector, got shape {x.shape}")
    if x.shape[0] == 0:
        raise DimensionError("softmax1d on an empty vector")
    p = _softmax_vec(x.data)
    return _emit("softmax1d", (x,), p, saved={"p": p})


FORWARD["softmax1d"] = lambda e, t: _softmax_vec(_data(t, e, 0))


def _softmax1d_bwd(e, g, t, need):
    p = e.saved["p"]
    return [(0, p * (g - (g * p).sum()))]


BACKWARD["softmax1d"] = _softmax1d_bwd


def masked_softmax1d(x: Tensor, keep: np.ndarray) -> Tensor:
    """Softmax over the kept subset; dropped positions output exactly 0.

    With an all-true ``keep`` this runs the identical arithmetic to
    ``softmax1d`` and therefore returns bit-identical values.
    """
    if x.ndim != 1:
        raise RankError(f"masked_softmax1d expects a vector, got {x.shape}")
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != x.shape:
        raise DimensionError(f"mask shape {keep.shape} != input {x.shape}")
    if not keep.any():
        raise RangeError("masked_softmax1d with an empty support")
    z = x.data[keep]
    pk = _softmax_vec(z)
    p = np.zeros_like(x.data)
    p[keep] = pk
    return _emit("masked_softmax1d", (x,), p,
                 attrs={"keep": keep}, saved={"p": p})


def _msoftmax_fwd(e, t):
    keep = e.attrs["keep"]
    x = _data(t, e, 0)
    p = np.zeros_like(x)
    p[keep] = _softmax_vec(x[keep])
    return p


def _msoftmax_bwd(e, g, t, need):
    keep = e.attrs["keep"]
    p = e.saved["p"]
    gx = np.zeros_like(p)
    pk = p[keep]
    gk = g[keep]
    gx[keep] = pk * (gk - (gk * pk).sum())
    return [(0, gx)]


FORWARD["masked_softmax1d"] = _msoftmax_fwd
BACKWARD["masked_softmax1d"] = _msoftmax_bwd


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over the batch (natural log)."""
    if logits.ndim != 2:
        raise RankError(f"cross_entropy logits must be 2-D, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"labels shape {labels.shape} != batch {logits.shape[0]}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise RangeError("labels must be integers")
    k = logits.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise RangeError(f"labels out of range for {k} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    b = logits.shape[0]
    loss = -logp[np.arange(b), labels].mean()
    p = np.exp(logp)
    return _emit("cross_entropy", (logits,), np.asarray(loss),
                 attrs={"labels": labels.copy()}, saved={"p": p})


def _ce_fwd(e, t):
    logits = _data(t, e, 0)
    labels = e.attrs["labels"]
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    return np.asarray(-logp[np.arange(logits.shape[0]), labels].mean())


def _ce_bwd(e, g, t, need):
    p = e.saved["p"].copy()
    labels = e.attrs["labels"]
    b = p.shape[0]
    p[np.arange(b), labels] -= 1.0
    return [(0, p * (g / b))]


FORWARD["cross_entropy"] = _ce_fwd
BACKWARD["cross_entropy"] = _ce_bwd
