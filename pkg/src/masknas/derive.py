"""Discrete architecture extraction and reporting.

A derived architecture names, per cell kind, the surviving (node,
predecessor) edges, the op subset kept on each, and a real importance per
edge.  Architectures come from four places: reading the trained masks
(edges may keep several ops or be removed entirely), the two-level heuristic
(argmax op per edge, top-2 edges per node by edge-mixing weight), the
single-level heuristic (top-2 edges by best op-mixing weight, edge logits
ignored, equal importance), and uniform random sampling.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import RangeError
from .masker import HierMasks
from .rng import derive_seed, generator
from .searchspace import SearchSpaceSpec, Supernet, mix_weights

PROVENANCES = ("hierarchical", "heuristic_multi", "heuristic_single", "random")


@dataclass
class DerivedCell:
    """kept maps (node, predecessor) to a sorted tuple of op indices;
    importance carries one real weight per kept edge."""

    kept: dict[tuple[int, int], tuple[int, ...]]
    importance: dict[tuple[int, int], float]

    def edges_of_node(self, node: int) -> list[tuple[int, int]]:
        return sorted(e for e in self.kept if e[0] == node)


@dataclass
class DerivedArch:
    spec: SearchSpaceSpec
    cells: dict[str, DerivedCell]
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise RangeError(f"unknown provenance {self.provenance!r}")


def from_masks(net: Supernet, masks: HierMasks) -> DerivedArch:
    """Read the discrete architecture out of binarized masks.  An edge
    survives when its beta mask keeps it and at least one of its op masks is
    on; importance is the softmax of beta renormalised over the survivors of
    each node."""
    spec = net.spec
    binary = masks.binarize()
    cells = {}
    for kind in spec.kinds:
        a = binary.alpha[kind]
        b = binary.beta[kind]
        beta = net.arch[kind].beta.data
        alive = b & a.any(axis=1)
        kept = {}
        importance = {}
        for ni, (lo, hi) in enumerate(spec.node_slices):
            keep_local = alive[lo:hi]
            if keep_local.any():
                wts = mix_weights(beta[lo:hi], keep_local)
            else:
                wts = np.zeros(hi - lo)
            for local, e in enumerate(range(lo, hi)):
                if not alive[e]:
                    continue
                node, pred = spec.edges[e]
                kept[(node, pred)] = tuple(int(i) for i in np.flatnonzero(a[e]))
                importance[(node, pred)] = float(wts[local])
        cells[kind] = DerivedCell(kept, importance)
    return DerivedArch(spec, cells, "hierarchical")


def derive_heuristic(net: Supernet, level: str = "multi") -> DerivedArch:
    """Discretise without masks.  'multi' keeps the argmax op per edge and
    the top-2 incoming edges per node by softmax(beta); 'single' scores each
    edge by its best op-mixing weight, ignores beta, and reports equal
    importance for the two winners.  Ties break toward the lower index."""
    if level not in ("multi", "single"):
        raise RangeError(f"level must be 'multi' or 'single', got {level!r}")
    spec = net.spec
    cells = {}
    for kind in spec.kinds:
        alpha = net.arch[kind].alpha.data
        beta = net.arch[kind].beta.data
        kept = {}
        importance = {}
        for ni, (lo, hi) in enumerate(spec.node_slices):
            k = hi - lo
            best_ops = [int(np.argmax(alpha[e])) for e in range(lo, hi)]
            if level == "multi":
                wts = mix_weights(beta[lo:hi])
            else:
                wts = np.array([float(mix_weights(alpha[lo + j]).max())
                                for j in range(k)])
            order = sorted(range(k), key=lambda j: (-wts[j], j))[:2]
            chosen = sorted(order)
            if level == "multi":
                keep_local = np.zeros(k, dtype=bool)
                keep_local[chosen] = True
                imp = mix_weights(beta[lo:hi], keep_local)
            for j in chosen:
                node, pred = spec.edges[lo + j]
                kept[(node, pred)] = (best_ops[j],)
                importance[(node, pred)] = float(imp[j]) if level == "multi" else 0.5
        cells[kind] = DerivedCell(kept, importance)
    prov = "heuristic_multi" if level == "multi" else "heuristic_single"
    return DerivedArch(spec, cells, prov)


def sample_random_arch(spec: SearchSpaceSpec, seed: int) -> DerivedArch:
    """Uniform random architecture: two distinct predecessors per node, one
    uniform op per kept edge, equal importance."""
    rng = generator(derive_seed(seed, "randarch"))
    cells = {}
    for kind in spec.kinds:
        kept = {}
        importance = {}
        for ni in range(spec.num_intermediate):
            preds = sorted(int(p) for p in
                           rng.choice(ni + 2, size=2, replace=False))
            for p in preds:
                kept[(ni, p)] = (int(rng.integers(spec.num_ops)),)
                importance[(ni, p)] = 0.5
        cells[kind] = DerivedCell(kept, importance)
    return DerivedArch(spec, cells, "random")


def masks_from_arch(net: Supernet, arch: DerivedArch) -> HierMasks:
    """Binary-valued real masks selecting exactly this architecture in the
    supernet: kept entries at 1.0, dropped at 0.0, all weight masks kept."""
    spec = net.spec
    alpha = {}
    beta = {}
    for kind in spec.kinds:
        a = np.zeros((spec.num_edges, spec.num_ops))
        b = np.zeros(spec.num_edges)
        cell = arch.cells[kind]
        for e, (node, pred) in enumerate(spec.edges):
            ops = cell.kept.get((node, pred))
            if ops:
                b[e] = 1.0
                for oi in ops:
                    a[e, oi] = 1.0
        alpha[kind] = a
        beta[kind] = b
    w = {name: np.ones(net.param(name).shape)
         for name in net.maskable_param_names()}
    return HierMasks(alpha, beta, w, tau=5e-3)


def edge_importance_report(net: Supernet) -> dict:
    """softmax(beta) per node plus the per-node mean weight, for each kind."""
    spec = net.spec
    out = {}
    for kind in spec.kinds:
        beta = net.arch[kind].beta.data
        nodes = {}
        for ni, (lo, hi) in enumerate(spec.node_slices):
            wts = mix_weights(beta[lo:hi])
            nodes[ni] = {"weights": [float(v) for v in wts],
                         "mean": float(wts.mean())}
        out[kind] = nodes
    return out


def op_histogram(arch: DerivedArch) -> dict:
    """Per kind: kept-edge count per node, and the histogram of surviving
    edges by how many ops they kept (keys 1..num_ops)."""
    spec = arch.spec
    out = {}
    for kind, cell in arch.cells.items():
        per_node = [0] * spec.num_intermediate
        ops_hist = {i: 0 for i in range(1, spec.num_ops + 1)}
        for (node, _pred), ops in cell.kept.items():
            per_node[node] += 1
            ops_hist[len(ops)] += 1
        out[kind] = {"edges_per_node": per_node, "ops_per_edge": ops_hist}
    return out


def _pred_name(pred: int) -> str:
    if pred == 0:
        return "c_{k-2}"
    if pred == 1:
        return "c_{k-1}"
    return f"n{pred - 2}"


def export_dot(arch: DerivedArch, path: Optional[str] = None) -> str:
    """Graphviz text for every cell kind; edges are labeled with their kept
    op names (comma separated) and importance to three decimals.
    Intermediate nodes appear only when connected; inputs and the output
    node are always present."""
    blocks = []
    for kind in arch.spec.kinds:
        cell = arch.cells[kind]
        name = "normal_cell" if kind == "normal" else "reduction_cell"
        lines = [f"digraph {name} {{", "  rankdir=LR;",
                 '  "c_{k-2}" [shape=box];', '  "c_{k-1}" [shape=box];']
        present = set()
        for (node, pred) in sorted(cell.kept):
            present.add(node)
            if pred >= 2:
                present.add(pred - 2)
        for ni in sorted(present):
            lines.append(f'  "n{ni}";')
        lines.append('  "out" [shape=box];')
        for (node, pred) in sorted(cell.kept):
            ops = ",".join(arch.spec.ops[i] for i in cell.kept[(node, pred)])
            imp = cell.importance[(node, pred)]
            lines.append(f'  "{_pred_name(pred)}" -> "n{node}" '
                         f'[label="{ops} ({imp:.3f})"];')
        for ni in sorted(n for n in present
                         if any(e[0] == n for e in cell.kept)):
            lines.append(f'  "n{ni}" -> "out";')
        lines.append("}")
        blocks.append("\n".join(lines))
    text = "\n\n".join(blocks) + "\n"
    if path is not None:
        with open(path, "w") as f:
            f.write(text)
    return text


def write_histogram_csvs(arch: DerivedArch, out_dir: str) -> list[str]:
    """One edges-per-node file and one ops-per-edge file per kind."""
    hist = op_histogram(arch)
    paths = []
    for kind in arch.spec.kinds:
        h = hist[kind]
        p1 = os.path.join(out_dir, f"hist_edges_{kind}.csv")
        with open(p1, "w") as f:
            f.write("node_index,num_edges\n")
            for ni, cnt in enumerate(h["edges_per_node"]):
                f.write(f"{ni},{cnt}\n")
        p2 = os.path.join(out_dir, f"hist_ops_{kind}.csv")
        with open(p2, "w") as f:
            f.write("num_ops,num_edges\n")
            for k in sorted(h["ops_per_edge"]):
                f.write(f"{k},{h['ops_per_edge'][k]}\n")
        paths.extend([p1, p2])
    return paths
