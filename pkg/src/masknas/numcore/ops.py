"""The candidate operations used on search-space edges.

Seven channel-preserving ops, each available at stride 1 and stride 2:
separable 3x3/5x5 convolutions (the ReLU-depthwise-pointwise-BN block applied
twice), dilated 3x3/5x5 convolutions (the same block once, dilation 2), 3x3
max and average pooling followed by an affine-free batch norm, and identity
(stride 2: plain spatial subsampling).  Pooling and identity own no trainable
parameters.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..errors import DimensionError, RangeError, RankError
from . import functional as F
from .functional import BN_MOMENTUM
from .tensor import Tensor

CANDIDATE_OPS = (
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
    "max_pool_3x3",
    "avg_pool_3x3",
    "identity",
)

# conv kernel slots eligible for weight masking, per op kind
MASKABLE_KERNELS = {
    "sep_conv_3x3": ("dw0", "pw0", "dw1", "pw1"),
    "sep_conv_5x5": ("dw0", "pw0", "dw1", "pw1"),
    "dil_conv_3x3": ("dw0", "pw0"),
    "dil_conv_5x5": ("dw0", "pw0"),
    "max_pool_3x3": (),
    "avg_pool_3x3": (),
    "identity": (),
}


class OpParams:
    """Parameters and buffers of one op instance on one edge."""

    __slots__ = ("kind", "channels", "tensors", "buffers")

    def __init__(self, kind: str, channels: int,
                 tensors: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.kind = kind
        self.channels = channels
        self.tensors = tensors
        self.buffers = buffers


def op_param_shapes(kind: str, channels: int) -> dict[str, tuple[int, ...]]:
    """Trainable parameter shapes for one instance of ``kind``."""
    if kind not in CANDIDATE_OPS:
        raise RangeError(f"unknown op kind {kind!r}")
    c = channels
    if kind.startswith("sep_conv"):
        k = 3 if kind.endswith("3x3") else 5
        shapes = {}
        for app in (0, 1):
            shapes[f"dw{app}"] = (c, 1, k, k)
            shapes[f"pw{app}"] = (c, c, 1, 1)
            shapes[f"bn{app}_g"] = (c,)
            shapes[f"bn{app}_b"] = (c,)
        return shapes
    if kind.startswith("dil_conv"):
        k = 3 if kind.endswith("3x3") else 5
        return {"dw0": (c, 1, k, k), "pw0": (c, c, 1, 1),
                "bn0_g": (c,), "bn0_b": (c,)}
    return {}


def init_op_params(kind: str, channels: int,
                   rng: np.random.Generator) -> OpParams:
    """Fresh parameters; conv kernels get He-style normal init, batch norms
    start at identity with unit-variance buffers."""
    shapes = op_param_shapes(kind, channels)
    tensors: dict[str, Tensor] = {}
    for name in sorted(shapes):
        shp = shapes[name]
        if name.startswith("dw"):
            std = np.sqrt(2.0 / (shp[2] * shp[3]))
            tensors[name] = Tensor(rng.normal(0.0, std, shp), requires_grad=True)
        elif name.startswith("pw"):
            std = np.sqrt(2.0 / shp[1])
            tensors[name] = Tensor(rng.normal(0.0, std, shp), requires_grad=True)
        elif name.endswith("_g"):
            tensors[name] = Tensor(np.ones(shp), requires_grad=True)
        else:
            tensors[name] = Tensor(np.zeros(shp), requires_grad=True)
    buffers: dict[str, np.ndarray] = {}
    napps = 2 if kind.startswith("sep_conv") else (
        1 if kind.startswith("dil_conv") or kind.endswith("pool_3x3") else 0)
    for app in range(napps):
        buffers[f"bn{app}_m"] = np.zeros(channels)
        buffers[f"bn{app}_v"] = np.ones(channels)
    return OpParams(kind, channels, tensors, buffers)


def _masked_kernel(params: OpParams, name: str,
                   wmask: Optional[dict]) -> Tensor:
    w = params.tensors[name]
    if wmask is not None and name in wmask:
        return F.mul(w, wmask[name])
    return w


def _bn(x, params: OpParams, slot: str, training: bool,
        update_stats: bool, affine: bool = True):
    gamma = params.tensors.get(f"{slot}_g") if affine else None
    beta = params.tensors.get(f"{slot}_b") if affine else None
    rm = params.buffers[f"{slot}_m"]
    rv = params.buffers[f"{slot}_v"]
    stats: Optional[dict] = {} if (training and update_stats) else None
    y = F.batch_norm(x, gamma, beta, rm, rv, training, stats_out=stats)
    if stats:
        m = BN_MOMENTUM
        params.buffers[f"{slot}_m"] = (1.0 - m) * rm + m * stats["mean"]
        params.buffers[f"{slot}_v"] = (1.0 - m) * rv + m * stats["var"]
    return y


def _conv_block(x, params, app: int, k: int, stride: int, dilation: int,
                training: bool, update_stats: bool, wmask):
    pad = dilation * (k - 1) // 2
    c = params.channels
    y = F.relu(x)
    y = F.conv2d(y, _masked_kernel(params, f"dw{app}", wmask),
                 stride=stride, padding=pad, dilation=dilation, groups=c)
    y = F.conv2d(y, _masked_kernel(params, f"pw{app}", wmask))
    return _bn(y, params, f"bn{app}", training, update_stats)


def op_forward(kind: str, x: Tensor, params: OpParams, stride: int = 1,
               training: bool = False, update_stats: bool = False,
               wmask: Optional[dict] = None) -> Tensor:
    """Apply one candidate op.  ``wmask`` optionally maps kernel slot names to
    same-shape mask tensors multiplied into the kernels on the tape."""
    if kind not in CANDIDATE_OPS:
        raise RangeError(f"unknown op kind {kind!r}")
    if x.ndim != 4:
        raise RankError(f"op input must be 4-D NCHW, got shape {x.shape}")
    if stride not in (1, 2):
        raise RangeError(f"op stride must be 1 or 2, got {stride}")
    if kind != "identity" and x.shape[1] != params.channels:
        raise DimensionError(
            f"{kind}: input has {x.shape[1]} channels, params expect "
            f"{params.channels}")
    if params.kind != kind:
        raise DimensionError(
            f"params built for {params.kind!r} cannot run {kind!r}")
    if kind.startswith("sep_conv"):
        k = 3 if kind.endswith("3x3") else 5
        y = _conv_block(x, params, 0, k, stride, 1, training, update_stats, wmask)
        return _conv_block(y, params, 1, k, 1, 1, training, update_stats, wmask)
    if kind.startswith("dil_conv"):
        k = 3 if kind.endswith("3x3") else 5
        return _conv_block(x, params, 0, k, stride, 2, training, update_stats,
                           wmask)
    if kind == "max_pool_3x3":
        y = F.max_pool3(x, stride)
        return _bn(y, params, "bn0", training, update_stats, affine=False)
    if kind == "avg_pool_3x3":
        y = F.avg_pool3(x, stride)
        return _bn(y, params, "bn0", training, update_stats, affine=False)
    # identity
    return x if stride == 1 else F.subsample2(x)


def aux_forward(name: str, inputs: list[Tensor], params: dict) -> Tensor:
    """Dispatch for the auxiliary (non-candidate) layers by name."""
    if name == "relu":
        return F.relu(inputs[0])
    if name == "batch_norm":
        return F.batch_norm(inputs[0], params.get("gamma"), params.get("beta"),
                            params["mean"], params["var"],
                            params.get("training", False))
    if name == "linear":
        return F.linear(inputs[0], params["weight"], params["bias"])
    if name == "concat_channels":
        return F.concat_channels(inputs)
    if name == "softmax":
        return F.softmax1d(inputs[0])
    if name == "cross_entropy":
        return F.cross_entropy(inputs[0], params["labels"])
    raise RangeError(f"unknown auxiliary layer {name!r}")
