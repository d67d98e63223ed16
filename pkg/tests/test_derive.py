"""Discrete architecture extraction: mask readout, heuristic baselines,
random sampling, reports."""

import collections

import numpy as np
import pytest

import oracles
from masknas.derive import (DerivedArch, DerivedCell, derive_heuristic,
                            edge_importance_report, export_dot, from_masks,
                            masks_from_arch, op_histogram, sample_random_arch,
                            write_histogram_csvs)
from masknas.errors import RangeError
from masknas.masker import MaskTrainConfig, init_masks
from masknas.rng import generator
from masknas.searchspace import (SearchSpaceSpec, build_supernet,
                                 supernet_forward)

SPEC5 = SearchSpaceSpec(nodes_per_cell=5, num_cells=1, init_channels=4,
                        num_candidate_ops=3, num_classes=2, in_channels=3,
                        reduction_cells=(),
                        candidate_ops=("sep_conv_3x3", "max_pool_3x3",
                                       "identity"))


def net5(seed=0):
    return build_supernet(SPEC5, seed)


# ------------------------------------------------------------ mask readout


def test_from_masks_reads_surviving_structure():
    net = net5(1)
    masks = init_masks(net, MaskTrainConfig())
    # node 0 edges: 0 (pred c_{k-2}), 1 (pred c_{k-1}); node 1 edges: 2,3,4
    masks.beta["normal"][1] = -0.1          # drop node0 <- c_{k-1}
    masks.alpha["normal"][3][:] = -0.1      # all ops off kills edge 3
    masks.alpha["normal"][2][2] = -0.1      # edge 2 keeps ops {0,1}
    arch = from_masks(net, masks)
    assert arch.provenance == "hierarchical"
    cell = arch.cells["normal"]
    assert set(cell.kept) == {(0, 0), (1, 0), (1, 2)}
    assert cell.kept[(1, 0)] == (0, 1)
    assert cell.kept[(0, 0)] == (0, 1, 2)
    # importance renormalizes beta softmax over each node's survivors
    beta = net.arch["normal"].beta.data
    w0 = oracles.subset_softmax(beta[0:2], np.array([True, False]))
    assert cell.importance[(0, 0)] == pytest.approx(w0[0])
    w1 = oracles.subset_softmax(beta[2:5], np.array([True, False, True]))
    assert cell.importance[(1, 0)] == pytest.approx(w1[0])
    assert cell.importance[(1, 2)] == pytest.approx(w1[2])
    assert sum(cell.importance[e] for e in cell.edges_of_node(1)) == pytest.approx(1.0)


def test_from_masks_empty_node_yields_no_edges():
    net = net5(2)
    masks = init_masks(net, MaskTrainConfig())
    masks.beta["normal"][0:2] = -0.1
    arch = from_masks(net, masks)
    assert arch.cells["normal"].edges_of_node(0) == []
    assert len(arch.cells["normal"].kept) == 3


# -------------------------------------------------------------- heuristics


def test_heuristic_multi_matches_manual_computation():
    net = net5(3)
    # craft logits with known winners
    alpha = net.arch["normal"].alpha.data
    beta = net.arch["normal"].beta.data
    alpha[:] = 0.0
    alpha[0, 1] = 2.0   # edge 0 -> op 1
    alpha[1, 0] = 1.0
    alpha[2, 2] = 3.0
    alpha[3, 0] = 0.5
    alpha[4, 2] = 0.2
    beta[:] = np.array([1.0, 2.0, 0.1, 3.0, 2.5])
    arch = derive_heuristic(net, "multi")
    assert arch.provenance == "heuristic_multi"
    cell = arch.cells["normal"]
    # node 0 keeps both its edges; node 1 keeps beta top-2 = edges 3, 4
    assert set(cell.kept) == {(0, 0), (0, 1), (1, 1), (1, 2)}
    assert cell.kept[(0, 0)] == (1,)
    assert cell.kept[(1, 1)] == (0,)
    assert cell.kept[(1, 2)] == (2,)
    w = oracles.subset_softmax(beta[2:5], np.array([False, True, True]))
    assert cell.importance[(1, 1)] == pytest.approx(w[1])
    assert cell.importance[(1, 2)] == pytest.approx(w[2])


def test_heuristic_single_ignores_beta():
    net = net5(4)
    alpha = net.arch["normal"].alpha.data
    beta = net.arch["normal"].beta.data
    alpha[:] = 0.0
    # node 1: edge 2 has the sharpest op distribution, edge 4 second
    alpha[2, 0] = 4.0
    alpha[4, 1] = 2.0
    alpha[3, 2] = 0.1
    beta[:] = np.array([0.0, 0.0, -9.0, 9.0, 0.0])  # beta would pick edge 3
    arch = derive_heuristic(net, "single")
    cell = arch.cells["normal"]
    assert set(cell.kept) == {(0, 0), (0, 1), (1, 0), (1, 2)}
    assert all(v == 0.5 for v in cell.importance.values())
    with pytest.raises(RangeError):
        derive_heuristic(net, "triple")


def test_heuristic_tie_breaks_toward_lower_index():
    net = net5(5)
    net.arch["normal"].alpha.data[:] = 0.0
    net.arch["normal"].beta.data[:] = 0.0
    arch = derive_heuristic(net, "multi")
    cell = arch.cells["normal"]
    # all-equal beta on node 1 keeps the two lowest edges
    assert set(cell.edges_of_node(1)) == {(1, 0), (1, 1)}
    assert all(ops == (0,) for ops in cell.kept.values())


# ---------------------------------------------------------- random sampling


def test_sample_random_arch_shape_and_determinism():
    a = sample_random_arch(SPEC5, 9)
    b = sample_random_arch(SPEC5, 9)
    c = sample_random_arch(SPEC5, 10)
    assert a.provenance == "random"
    assert a.cells["normal"].kept == b.cells["normal"].kept
    assert a.cells["normal"].kept != c.cells["normal"].kept or \
        sample_random_arch(SPEC5, 11).cells["normal"].kept != a.cells["normal"].kept
    for cell in a.cells.values():
        for node in range(SPEC5.num_intermediate):
            assert len(cell.edges_of_node(node)) == 2
        assert all(len(ops) == 1 for ops in cell.kept.values())


def test_sample_random_arch_is_roughly_uniform():
    # node 1 of the 5-node cell has 3 choose 2 = 3 predecessor pairs and
    # 3 ops per kept edge; chi-square against uniform over 600 draws
    pair_counts = collections.Counter()
    op_counts = collections.Counter()
    for seed in range(600):
        cell = sample_random_arch(SPEC5, seed).cells["normal"]
        preds = tuple(p for _, p in cell.edges_of_node(1))
        pair_counts[preds] += 1
        for ops in cell.kept.values():
            op_counts[ops[0]] += 1
    assert set(pair_counts) == {(0, 1), (0, 2), (1, 2)}
    expect = 600 / 3
    chi2_pairs = sum((c - expect) ** 2 / expect for c in pair_counts.values())
    assert chi2_pairs < 13.8  # p ~ 0.001 at 2 dof
    n_ops = sum(op_counts.values())
    expect_op = n_ops / 3
    chi2_ops = sum((op_counts[i] - expect_op) ** 2 / expect_op for i in range(3))
    assert chi2_ops < 13.8


# ------------------------------------------------------------- round trips


def test_masks_from_arch_round_trip():
    net = net5(6)
    masks = init_masks(net, MaskTrainConfig())
    masks.beta["normal"][4] = -0.1
    masks.alpha["normal"][0][0] = -0.1
    arch = from_masks(net, masks)
    rebuilt = masks_from_arch(net, arch)
    again = from_masks(net, rebuilt)
    assert again.cells["normal"].kept == arch.cells["normal"].kept
    for e, v in again.cells["normal"].importance.items():
        assert v == pytest.approx(arch.cells["normal"].importance[e])
    # rebuilt masks select exactly the same subnetwork
    x = generator(7).normal(0.0, 1.0, (2, 3, 8, 8))
    y1 = supernet_forward(net, x, masks=masks.binarize()).data
    y2 = supernet_forward(net, x, masks=rebuilt.binarize()).data
    np.testing.assert_allclose(y1, y2, atol=1e-12)


def test_masks_from_arch_random_arch_evaluates():
    net = net5(8)
    arch = sample_random_arch(SPEC5, 1)
    masks = masks_from_arch(net, arch)
    x = generator(9).normal(0.0, 1.0, (2, 3, 8, 8))
    y = supernet_forward(net, x, masks=masks.binarize()).data
    assert np.isfinite(y).all()
    assert from_masks(net, masks).cells["normal"].kept == arch.cells["normal"].kept


# ---------------------------------------------------------------- reports


def test_edge_importance_report():
    net = net5(10)
    rep = edge_importance_report(net)
    for kind, nodes in rep.items():
        for ni, info in nodes.items():
            k = len(info["weights"])
            assert sum(info["weights"]) == pytest.approx(1.0)
            assert info["mean"] == pytest.approx(1.0 / k)
    beta = net.arch["normal"].beta.data
    want = oracles.subset_softmax(beta[2:5], np.ones(3, dtype=bool))
    np.testing.assert_allclose(rep["normal"][1]["weights"], want, rtol=1e-12)


def test_op_histogram_counts():
    cell = DerivedCell(
        kept={(0, 0): (0,), (0, 1): (0, 2), (1, 3): (1,)},
        importance={(0, 0): 0.6, (0, 1): 0.4, (1, 3): 1.0})
    arch = DerivedArch(SPEC5, {"normal": cell}, "hierarchical")
    hist = op_histogram(arch)["normal"]
    assert hist["edges_per_node"] == [2, 1]
    assert hist["ops_per_edge"] == {1: 2, 2: 1, 3: 0}
    # an all-kept mask puts every edge in the top bucket
    net = net5(11)
    full = from_masks(net, init_masks(net, MaskTrainConfig()))
    h2 = op_histogram(full)["normal"]
    assert h2["ops_per_edge"][3] == 5
    assert h2["edges_per_node"] == [2, 3]


def test_export_dot_structure(tmp_path):
    net = net5(12)
    masks = init_masks(net, MaskTrainConfig())
    masks.beta["normal"][2:5] = -0.1  # node 1 fully dropped
    arch = from_masks(net, masks)
    path = tmp_path / "arch.dot"
    text = export_dot(arch, str(path))
    assert path.read_text() == text
    assert text.startswith("digraph normal_cell {")
    assert '"c_{k-2}" -> "n0"' in text
    assert '"c_{k-1}" -> "n0"' in text
    assert '"n0" -> "out"' in text
    assert '"n1"' not in text
    assert "sep_conv_3x3" in text
    # importances appear with three decimals
    assert "(0.500)" in text


def test_export_dot_includes_reduce_block():
    spec = SearchSpaceSpec(nodes_per_cell=4, num_cells=2, init_channels=4,
                           num_candidate_ops=2, num_classes=2, in_channels=3,
                           reduction_cells=(1,),
                           candidate_ops=("sep_conv_3x3", "identity"))
    net = build_supernet(spec, 13)
    arch = from_masks(net, init_masks(net, MaskTrainConfig()))
    text = export_dot(arch)
    assert "digraph normal_cell {" in text
    assert "digraph reduction_cell {" in text


def test_write_histogram_csvs(tmp_path):
    net = net5(14)
    arch = from_masks(net, init_masks(net, MaskTrainConfig()))
    paths = write_histogram_csvs(arch, str(tmp_path))
    assert len(paths) == 2
    edges = (tmp_path / "hist_edges_normal.csv").read_text().splitlines()
    assert edges[0] == "node_index,num_edges"
    assert edges[1:] == ["0,2", "1,3"]
    ops = (tmp_path / "hist_ops_normal.csv").read_text().splitlines()
    assert ops[0] == "num_ops,num_edges"
    assert ops[1:] == ["1,0", "2,0", "3,5"]
