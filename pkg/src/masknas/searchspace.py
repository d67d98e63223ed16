"""Cell-based supernet with two-level architecture encoding.

A cell is a DAG over ``nodes_per_cell`` nodes: two inputs (the outputs of the
two previous cells), K = nodes_per_cell - 3 intermediate nodes, and one
output node that concatenates the intermediates along channels.  Intermediate
node i receives an edge from every input node and every earlier intermediate,
so the template has sum(i + 2) edges.  Every edge runs all candidate ops
mixed by softmax(alpha) over that edge's row; every node mixes its incoming
edges by softmax(beta) over the slice of incoming edges.  alpha and beta are
shared across cells of the same kind (normal / reduce); weights are per cell
instance.

Binary masks enter in two regimes.  Evaluation applies them to the
post-softmax mixing weights with renormalisation over survivors (implemented
as a softmax restricted to the surviving subset, which is the same
distribution and reproduces plain softmax bit for bit when nothing is
masked), skips dead branches entirely, and multiplies surviving kernels by
their weight masks.  Mask training instead keeps every branch alive and
builds the renormalisation explicitly from mask tensors on the tape so
gradients reach the masks, including through the normalising denominator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError, RangeError
from .numcore import OpParams, Tensor, init_op_params, op_forward
from .numcore import functional as F
from .numcore.ops import CANDIDATE_OPS, MASKABLE_KERNELS
from .rng import generator

NORMAL = "normal"
REDUCE = "reduce"


@dataclass(frozen=True)
class SearchSpaceSpec:
    """Static description of the search space; validated on construction."""

    nodes_per_cell: int = 7
    num_cells: int = 3
    init_channels: int = 16
    num_candidate_ops: int = 7
    num_classes: int = 10
    in_channels: int = 3
    reduction_cells: Optional[tuple[int, ...]] = None
    candidate_ops: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if self.nodes_per_cell < 4:
            raise ConfigError(
                f"nodes_per_cell must be >= 4, got {self.nodes_per_cell}")
        if self.num_cells < 1:
            raise ConfigError(f"num_cells must be >= 1, got {self.num_cells}")
        if self.init_channels < 1:
            raise ConfigError(
                f"init_channels must be >= 1, got {self.init_channels}")
        if self.num_classes < 2:
            raise ConfigError(
                f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1:
            raise ConfigError(
                f"in_channels must be >= 1, got {self.in_channels}")
        if self.candidate_ops is not None:
            if not self.candidate_ops:
                raise ConfigError("candidate_ops must not be empty")
            bad = [o for o in self.candidate_ops if o not in CANDIDATE_OPS]
            if bad:
                raise ConfigError(f"unknown candidate ops: {bad}")
            if len(set(self.candidate_ops)) != len(self.candidate_ops):
                raise ConfigError("candidate_ops contains duplicates")
            if len(self.candidate_ops) != self.num_candidate_ops:
                raise ConfigError(
                    f"num_candidate_ops={self.num_candidate_ops} does not "
                    f"match {len(self.candidate_ops)} explicit ops")
        elif not 1 <= self.num_candidate_ops <= len(CANDIDATE_OPS):
            raise ConfigError(
                f"num_candidate_ops must be in [1, {len(CANDIDATE_OPS)}], "
                f"got {self.num_candidate_ops}")
        for r in self.reductions:
            if not 0 <= r < self.num_cells:
                raise ConfigError(
                    f"reduction cell {r} outside [0, {self.num_cells})")

    @property
    def ops(self) -> tuple[str, ...]:
        if self.candidate_ops is not None:
            return self.candidate_ops
        return CANDIDATE_OPS[:self.num_candidate_ops]

    @property
    def num_ops(self) -> int:
        return len(self.ops)

    @property
    def num_intermediate(self) -> int:
        return self.nodes_per_cell - 3

    @property
    def edges(self) -> tuple[tuple[int, int], ...]:
        """(node, predecessor) pairs in template order.  Predecessors 0 and 1
        are the two cell inputs; predecessor j >= 2 is intermediate j - 2."""
        out = []
        for i in range(self.num_intermediate):
            for p in range(i + 2):
                out.append((i, p))
        return tuple(out)

    @property
    def num_edges(self) -> int:
        k = self.num_intermediate
        return k * (k + 3) // 2

    @property
    def node_slices(self) -> tuple[tuple[int, int], ...]:
        """Per intermediate node, the [lo, hi) range of its edges."""
        out = []
        lo = 0
        for i in range(self.num_intermediate):
            out.append((lo, lo + i + 2))
            lo += i + 2
        return tuple(out)

    @property
    def reductions(self) -> tuple[int, ...]:
        if self.reduction_cells is not None:
            return tuple(sorted(set(self.reduction_cells)))
        pos = {self.num_cells // 3, 2 * self.num_cells // 3}
        return tuple(sorted(p for p in pos if 0 <= p < self.num_cells))

    @property
    def kinds(self) -> tuple[str, ...]:
        return (NORMAL, REDUCE) if self.reductions else (NORMAL,)


@dataclass
class ArchParams:
    """Op-mixing logits alpha (E, N) and edge-mixing logits beta (E,),
    shared by all cells of one kind."""

    alpha: Tensor
    beta: Tensor


@dataclass
class BinaryMasks:
    """Binarized mask state: per-kind alpha (E, N) and beta (E,) keep flags
    plus per-parameter weight keeps for the maskable kernels."""

    alpha: dict[str, np.ndarray]
    beta: dict[str, np.ndarray]
    w: dict[str, np.ndarray]

    def all_ones(self) -> bool:
        return (all(a.all() for a in self.alpha.values())
                and all(b.all() for b in self.beta.values())
                and all(w.all() for w in self.w.values()))


@dataclass
class LiveMasks:
    """Mask tensors placed on the tape during mask training; same layout as
    BinaryMasks but every leaf is a requires_grad Tensor holding the current
    binarization."""

    alpha: dict[str, Tensor]
    beta: dict[str, Tensor]
    w: dict[str, Tensor]


class _Layer:
    """Stem or preprocessing block: optional ReLU, conv, affine batch norm."""

    __slots__ = ("tensors", "buffers", "stride", "padding", "relu_first")

    def __init__(self, tensors, buffers, stride, padding, relu_first):
        self.tensors = tensors
        self.buffers = buffers
        self.stride = stride
        self.padding = padding
        self.relu_first = relu_first

    def forward(self, x, training, update_stats):
        if self.relu_first:
            x = F.relu(x)
        y = F.conv2d(x, self.tensors["w"], stride=self.stride,
                     padding=self.padding)
        stats: Optional[dict] = {} if (training and update_stats) else None
        y = F.batch_norm(y, self.tensors["bn_g"], self.tensors["bn_b"],
                         self.buffers["bn_m"], self.buffers["bn_v"],
                         training, stats_out=stats)
        if stats:
            m = F.BN_MOMENTUM
            self.buffers["bn_m"] = (1 - m) * self.buffers["bn_m"] + m * stats["mean"]
            self.buffers["bn_v"] = (1 - m) * self.buffers["bn_v"] + m * stats["var"]
        return y


class _Cell:
    __slots__ = ("index", "kind", "channels", "pre0", "pre1", "ops")

    def __init__(self, index, kind, channels, pre0, pre1, ops):
        self.index = index
        self.kind = kind
        self.channels = channels
        self.pre0 = pre0
        self.pre1 = pre1
        # ops[edge][op_index] -> OpParams
        self.ops: list[list[OpParams]] = ops


def _init_layer(rng, c_in, c_out, k, stride, relu_first) -> _Layer:
    std = np.sqrt(2.0 / (c_in * k * k))
    tensors = {
        "w": Tensor(rng.normal(0.0, std, (c_out, c_in, k, k)),
                    requires_grad=True),
        "bn_g": Tensor(np.ones(c_out), requires_grad=True),
        "bn_b": Tensor(np.zeros(c_out), requires_grad=True),
    }
    buffers = {"bn_m": np.zeros(c_out), "bn_v": np.ones(c_out)}
    return _Layer(tensors, buffers, stride, (k - 1) // 2, relu_first)


class Supernet:
    """All weights, buffers and architecture parameters of the search model.

    Parameter tensors are reachable both through the structural views (cells,
    stem, head) and through the flat name -> Tensor map built at construction;
    both views share the same Tensor objects.
    """

    def __init__(self, spec: SearchSpaceSpec, seed: int):
        self.spec = spec
        self.seed = int(seed)
        rng = generator(self.seed)
        c_in = spec.in_channels
        c = spec.init_channels
        self.stem = _init_layer(rng, c_in, c, 3, 1, relu_first=False)
        self.cells: list[_Cell] = []
        # channels of the two most recent feature maps and their reduction depth
        prev_prev = (c, 0)
        prev = (c, 0)
        c_cell = c
        for ci in range(spec.num_cells):
            reduce_cell = ci in spec.reductions
            if reduce_cell:
                c_cell *= 2
            kind = REDUCE if reduce_cell else NORMAL
            stride0 = 2 if prev[1] > prev_prev[1] else 1
            pre0 = _init_layer(rng, prev_prev[0], c_cell, 1, stride0,
                               relu_first=True)
            pre1 = _init_layer(rng, prev[0], c_cell, 1, 1, relu_first=True)
            ops = []
            for _e in range(spec.num_edges):
                ops.append([init_op_params(k, c_cell, rng) for k in spec.ops])
            self.cells.append(_Cell(ci, kind, c_cell, pre0, pre1, ops))
            depth = prev[1] + (1 if reduce_cell else 0)
            out_c = spec.num_intermediate * c_cell
            prev_prev, prev = prev, (out_c, depth)
        feat = prev[0]
        self.head = {
            "w": Tensor(rng.normal(0.0, np.sqrt(1.0 / feat),
                                   (spec.num_classes, feat)),
                        requires_grad=True),
            "b": Tensor(np.zeros(spec.num_classes), requires_grad=True),
        }
        self.arch: dict[str, ArchParams] = {}
        for kind in spec.kinds:
            alpha = Tensor(rng.normal(0.0, 1.0, (spec.num_edges, spec.num_ops))
                           * 1e-3, requires_grad=True)
            beta = Tensor(rng.normal(0.0, 1.0, spec.num_edges) * 1e-3,
                          requires_grad=True)
            self.arch[kind] = ArchParams(alpha, beta)
        self._params = self._collect_params()

    # ------------------------------------------------------------- inventory

    def _collect_params(self) -> list[tuple[str, Tensor]]:
        out = [("stem.w", self.stem.tensors["w"]),
               ("stem.bn_g", self.stem.tensors["bn_g"]),
               ("stem.bn_b", self.stem.tensors["bn_b"])]
        for cell in self.cells:
            p = f"cell{cell.index}"
            for lname, layer in (("pre0", cell.pre0), ("pre1", cell.pre1)):
                for t in ("w", "bn_g", "bn_b"):
                    out.append((f"{p}.{lname}.{t}", layer.tensors[t]))
            for e, edge_ops in enumerate(cell.ops):
                for op in edge_ops:
                    for slot in sorted(op.tensors):
                        out.append((f"{p}.e{e}.{op.kind}.{slot}",
                                    op.tensors[slot]))
        out.append(("head.w", self.head["w"]))
        out.append(("head.b", self.head["b"]))
        return out

    def named_params(self) -> list[tuple[str, Tensor]]:
        """Weight tensors in deterministic order; excludes alpha and beta."""
        return list(self._params)

    def param(self, name: str) -> Tensor:
        for n, t in self._params:
            if n == name:
                return t
        raise RangeError(f"no parameter named {name!r}")

    def arch_named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for kind in self.spec.kinds:
            out.append((f"arch.{kind}.alpha", self.arch[kind].alpha))
            out.append((f"arch.{kind}.beta", self.arch[kind].beta))
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = [("stem.bn_m", self.stem.buffers["bn_m"]),
               ("stem.bn_v", self.stem.buffers["bn_v"])]
        for cell in self.cells:
            p = f"cell{cell.index}"
            for lname, layer in (("pre0", cell.pre0), ("pre1", cell.pre1)):
                for b in ("bn_m", "bn_v"):
                    out.append((f"{p}.{lname}.{b}", layer.buffers[b]))
            for e, edge_ops in enumerate(cell.ops):
                for op in edge_ops:
                    for b in sorted(op.buffers):
                        out.append((f"{p}.e{e}.{op.kind}.{b}", op.buffers[b]))
        return out

    def set_buffer(self, name: str, value: np.ndarray):
        parts = name.split(".")
        if parts[0] == "stem":
            self.stem.buffers[parts[1]] = np.asarray(value, dtype=np.float64)
            return
        cell = self.cells[int(parts[0][4:])]
        if parts[1] in ("pre0", "pre1"):
            layer = cell.pre0 if parts[1] == "pre0" else cell.pre1
            layer.buffers[parts[2]] = np.asarray(value, dtype=np.float64)
            return
        e = int(parts[1][1:])
        kind, slot = parts[2], parts[3]
        for op in cell.ops[e]:
            if op.kind == kind:
                op.buffers[slot] = np.asarray(value, dtype=np.float64)
                return
        raise RangeError(f"no buffer named {name!r}")

    def maskable_param_names(self) -> list[str]:
        """Names of the kernels the weight mask level covers: the candidate
        ops' conv kernels.  Stem, preprocessing, batch-norm affine and the
        classifier head are never masked."""
        out = []
        for cell in self.cells:
            p = f"cell{cell.index}"
            for e, edge_ops in enumerate(cell.ops):
                for op in edge_ops:
                    for slot in MASKABLE_KERNELS[op.kind]:
                        out.append(f"{p}.e{e}.{op.kind}.{slot}")
        return out

    def set_w_trainable(self, flag: bool):
        for _, t in self._params:
            t.requires_grad = flag

    def set_arch_trainable(self, flag: bool):
        for kind in self.spec.kinds:
            self.arch[kind].alpha.requires_grad = flag
            self.arch[kind].beta.requires_grad = flag

    def clone(self) -> "Supernet":
        other = Supernet(self.spec, self.seed)
        mine = dict(self._params + self.arch_named_params())
        for name, t in other._params + other.arch_named_params():
            t.data = mine[name].data.copy()
        for name, arr in self.named_buffers():
            other.set_buffer(name, arr.copy())
        return other

    def cell_kind(self, index: int) -> str:
        return self.cells[index].kind

    def first_cell_of(self, kind: str) -> int:
        for cell in self.cells:
            if cell.kind == kind:
                return cell.index
        raise RangeError(f"no cell of kind {kind!r}")


def build_supernet(spec: SearchSpaceSpec, seed: int) -> Supernet:
    """Construct and initialise a supernet.  Same spec and seed give
    bit-identical parameters."""
    return Supernet(spec, seed)


def mix_weights(logits: np.ndarray, keep: Optional[np.ndarray] = None) -> np.ndarray:
    """Softmax of ``logits`` optionally restricted to ``keep``; dropped
    entries are exactly zero.  Pure numpy twin of the taped coefficient
    computation, guaranteed to agree with it bitwise."""
    logits = np.asarray(logits, dtype=np.float64)
    if keep is None:
        z = logits
        e = np.exp(z - z.max())
        return e / e.sum()
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != logits.shape:
        raise DimensionError(f"keep shape {keep.shape} != {logits.shape}")
    if not keep.any():
        return np.zeros_like(logits)
    z = logits[keep]
    e = np.exp(z - z.max())
    out = np.zeros_like(logits)
    out[keep] = e / e.sum()
    return out


@dataclass
class _KindCoeffs:
    alpha_vec: list[Optional[Tensor]] = field(default_factory=list)
    alpha_keep: Optional[np.ndarray] = None
    edge_alive: Optional[np.ndarray] = None
    beta_vec: list[Optional[Tensor]] = field(default_factory=list)


def _coeffs_for_kind(net: Supernet, kind: str,
                     masks: Optional[BinaryMasks],
                     live: Optional[LiveMasks]) -> _KindCoeffs:
    spec = net.spec
    ap = net.arch[kind]
    out = _KindCoeffs()
    e_count = spec.num_edges
    n_ops = spec.num_ops
    if masks is None:
        a_keep = np.ones((e_count, n_ops), dtype=bool)
        b_keep = np.ones(e_count, dtype=bool)
    else:
        a_keep = masks.alpha[kind].astype(bool)
        b_keep = masks.beta[kind].astype(bool)
    out.alpha_keep = a_keep
    out.edge_alive = b_keep & a_keep.any(axis=1)
    if live is None:
        for e in range(e_count):
            if not out.edge_alive[e]:
                out.alpha_vec.append(None)
                continue
            logits = F.row(ap.alpha, e)
            if a_keep[e].all():
                out.alpha_vec.append(F.softmax1d(logits))
            else:
                out.alpha_vec.append(F.masked_softmax1d(logits, a_keep[e]))
        for lo, hi in spec.node_slices:
            keep = out.edge_alive[lo:hi]
            if not keep.any():
                out.beta_vec.append(None)
                continue
            logits = F.slice1d(ap.beta, lo, hi)
            if keep.all():
                out.beta_vec.append(F.softmax1d(logits))
            else:
                out.beta_vec.append(F.masked_softmax1d(logits, keep))
    else:
        ma = live.alpha[kind]
        mb = live.beta[kind]
        for e in range(e_count):
            p = F.softmax1d(F.row(ap.alpha, e))
            pm = F.mul(p, F.row(ma, e))
            if a_keep[e].any():
                pm = F.div_scalar(pm, F.sum_all(pm))
            out.alpha_vec.append(pm)
        for ni, (lo, hi) in enumerate(spec.node_slices):
            q = F.softmax1d(F.slice1d(ap.beta, lo, hi))
            qm = F.mul(q, F.slice1d(mb, lo, hi))
            if b_keep[lo:hi].any():
                qm = F.div_scalar(qm, F.sum_all(qm))
            out.beta_vec.append(qm)
        # during mask training every branch stays live for revival gradients
        out.edge_alive = np.ones(e_count, dtype=bool)
    return out


def _op_wmask(net: Supernet, cell: _Cell, e: int, op: OpParams,
              masks: Optional[BinaryMasks],
              live: Optional[LiveMasks]) -> Optional[dict]:
    slots = MASKABLE_KERNELS[op.kind]
    if not slots:
        return None
    prefix = f"cell{cell.index}.e{e}.{op.kind}."
    if live is not None:
        return {s: live.w[prefix + s] for s in slots if prefix + s in live.w}
    if masks is None:
        return None
    wm = {}
    for s in slots:
        keep = masks.w.get(prefix + s)
        if keep is not None and not keep.all():
            wm[s] = Tensor(keep.astype(np.float64))
    return wm or None


def _zeros_like_feature(batch: int, channels: int, spatial: int) -> Tensor:
    return Tensor(np.zeros((batch, channels, spatial, spatial)))


def _cell_forward(net: Supernet, cell: _Cell, s0: Tensor, s1: Tensor,
                  coeffs: _KindCoeffs, masks, live, training, update_stats):
    spec = net.spec
    x0 = cell.pre0.forward(s0, training, update_stats)
    x1 = cell.pre1.forward(s1, training, update_stats)
    states = [x0, x1]
    reduce_cell = cell.kind == REDUCE
    in_spatial = x0.shape[2]
    out_spatial = (in_spatial + 1) // 2 if reduce_cell else in_spatial
    batch = x0.shape[0]
    for ni, (lo, hi) in enumerate(spec.node_slices):
        bvec = coeffs.beta_vec[ni]
        acc = None
        for local, e in enumerate(range(lo, hi)):
            if not coeffs.edge_alive[e] or bvec is None:
                continue
            node, pred = spec.edges[e]
            stride = 2 if (reduce_cell and pred < 2) else 1
            src = states[pred]
            avec = coeffs.alpha_vec[e]
            akeep = coeffs.alpha_keep[e]
            mix = None
            for oi, op in enumerate(cell.ops[e]):
                if live is None and not akeep[oi]:
                    continue
                wmask = _op_wmask(net, cell, e, op, masks, live)
                y = op_forward(op.kind, src, op, stride=stride,
                               training=training, update_stats=update_stats,
                               wmask=wmask)
                term = F.smul(y, F.select(avec, oi))
                mix = term if mix is None else F.add(mix, term)
            if mix is None:
                continue
            term = F.smul(mix, F.select(bvec, local))
            acc = term if acc is None else F.add(acc, term)
        if acc is None:
            acc = _zeros_like_feature(batch, cell.channels, out_spatial)
        states.append(acc)
    return F.concat_channels(states[2:])


def supernet_forward(net: Supernet, batch, masks=None, training: bool = False,
                     update_stats: Optional[bool] = None,
                     live: Optional[LiveMasks] = None) -> Tensor:
    """Run the supernet on a batch of NCHW images and return logits.

    ``masks`` may be None (no masking) or a BinaryMasks.  ``live`` carries
    mask tensors during mask training; see the module docstring for how the
    two projection regimes differ.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.ndim != 4:
        raise RangeError(f"batch must be 4-D NCHW, got shape {x.shape}")
    if x.shape[1] != net.spec.in_channels:
        raise DimensionError(
            f"batch has {x.shape[1]} channels, spec expects "
            f"{net.spec.in_channels}")
    if update_stats is None:
        update_stats = training
    coeffs = {kind: _coeffs_for_kind(net, kind, masks, live)
              for kind in net.spec.kinds}
    s = net.stem.forward(x, training, update_stats)
    s0 = s1 = s
    for cell in net.cells:
        out = _cell_forward(net, cell, s0, s1, coeffs[cell.kind], masks, live,
                            training, update_stats)
        s0, s1 = s1, out
    feat = F.global_avg_pool(s1)
    return F.linear(feat, net.head["w"], net.head["b"])


def supernet_loss(net: Supernet, batch_x, labels, masks=None,
                  training: bool = False, update_stats: Optional[bool] = None,
                  live: Optional[LiveMasks] = None) -> Tensor:
    logits = supernet_forward(net, batch_x, masks, training, update_stats, live)
    return F.cross_entropy(logits, labels)


def mixed_op_forward(edge: int, x: Tensor, net: Supernet,
                     mask_alpha: Optional[np.ndarray] = None,
                     kind: str = NORMAL, cell_index: Optional[int] = None,
                     stride: int = 1, training: bool = False) -> Tensor:
    """Mix all candidate ops on one edge: sum of op outputs weighted by
    softmax(alpha[edge]), restricted to the mask when one is given."""
    spec = net.spec
    if not 0 <= edge < spec.num_edges:
        raise RangeError(f"edge {edge} out of range [0, {spec.num_edges})")
    ci = net.first_cell_of(kind) if cell_index is None else cell_index
    cell = net.cells[ci]
    if cell.kind != kind:
        raise RangeError(f"cell {ci} is {cell.kind!r}, not {kind!r}")
    logits = F.row(net.arch[kind].alpha, edge)
    if mask_alpha is None:
        vec = F.softmax1d(logits)
        keep = np.ones(spec.num_ops, dtype=bool)
    else:
        keep = np.asarray(mask_alpha).astype(bool)
        if keep.shape != (spec.num_ops,):
            raise DimensionError(
                f"mask_alpha shape {keep.shape} != ({spec.num_ops},)")
        if not keep.any():
            raise RangeError("mask_alpha keeps no ops on this edge")
        vec = F.masked_softmax1d(logits, keep) if not keep.all() \
            else F.softmax1d(logits)
    mix = None
    for oi, op in enumerate(cell.ops[edge]):
        if not keep[oi]:
            continue
        y = op_forward(op.kind, x, op, stride=stride, training=training)
        term = F.smul(y, F.select(vec, oi))
        mix = term if mix is None else F.add(mix, term)
    return mix


def node_forward(node: int, inputs: list[Tensor], net: Supernet,
                 masks: Optional[BinaryMasks] = None, kind: str = NORMAL,
                 cell_index: Optional[int] = None, stride_inputs: int = 1,
                 training: bool = False) -> Tensor:
    """Combine one intermediate node's incoming edges: each edge runs its op
    mixture, then edges are summed with softmax(beta) weights over this
    node's slice (renormalised over survivors under masks)."""
    spec = net.spec
    if not 0 <= node < spec.num_intermediate:
        raise RangeError(
            f"node {node} out of range [0, {spec.num_intermediate})")
    lo, hi = spec.node_slices[node]
    if len(inputs) != hi - lo:
        raise DimensionError(
            f"node {node} expects {hi - lo} predecessor states, "
            f"got {len(inputs)}")
    ci = net.first_cell_of(kind) if cell_index is None else cell_index
    cell = net.cells[ci]
    if masks is None:
        a_keep = np.ones((spec.num_edges, spec.num_ops), dtype=bool)
        alive = np.ones(spec.num_edges, dtype=bool)
    else:
        a_keep = masks.alpha[kind].astype(bool)
        alive = masks.beta[kind].astype(bool) & a_keep.any(axis=1)
    keep_local = alive[lo:hi]
    if not keep_local.any():
        ref = inputs[0]
        return Tensor(np.zeros_like(ref.data))
    blog = F.slice1d(net.arch[kind].beta, lo, hi)
    bvec = F.softmax1d(blog) if keep_local.all() \
        else F.masked_softmax1d(blog, keep_local)
    acc = None
    for local, e in enumerate(range(lo, hi)):
        if not keep_local[local]:
            continue
        _, pred = spec.edges[e]
        stride = stride_inputs if pred < 2 else 1
        mix = mixed_op_forward(e, inputs[local], net,
                               mask_alpha=a_keep[e] if masks is not None else None,
                               kind=kind, cell_index=ci, stride=stride,
                               training=training)
        term = F.smul(mix, F.select(bvec, local))
        acc = term if acc is None else F.add(acc, term)
    return acc


def count_params(net: Supernet, masks: Optional[BinaryMasks] = None) -> int:
    """Trainable scalar count.  Under masks: dead ops (edge masked off or all
    their alpha masks zero) contribute nothing, surviving maskable kernels
    count their kept entries, batch-norm affine pairs count when their op
    survives.  Stem, preprocessing and head always count; alpha and beta are
    architecture state, not weights, and are never counted."""
    total = 0
    for name, t in net.named_params():
        parts = name.split(".")
        if parts[0] in ("stem", "head") or parts[1] in ("pre0", "pre1"):
            total += t.data.size
            continue
        cell = net.cells[int(parts[0][4:])]
        e = int(parts[1][1:])
        kind_name, slot = parts[2], parts[3]
        if masks is not None:
            oi = net.spec.ops.index(kind_name)
            a = masks.alpha[cell.kind]
            b = masks.beta[cell.kind]
            if not (b[e] and a[e].any() and a[e, oi]):
                continue
            wkeep = masks.w.get(f"{parts[0]}.{parts[1]}.{kind_name}.{slot}")
            if wkeep is not None:
                total += int(wkeep.sum())
                continue
        total += t.data.size
    return total
