"""Mask hierarchy: binarization, straight-through updates, pruning dynamics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from masknas.dataio import load_dataset
from masknas.errors import ConfigError, RangeError
from masknas.masker import (HierMasks, MaskTrainConfig, binarize,
                            degenerate_kinds, init_masks, mask_update,
                            project, sparsity_report, train_masks)
from masknas.rng import generator
from masknas.searchspace import (SearchSpaceSpec, build_supernet, count_params,
                                 supernet_forward)
from masknas.trainer import AdamState, TrainConfig, train_supernet

MICRO = SearchSpaceSpec(nodes_per_cell=4, num_cells=1, init_channels=4,
                        num_candidate_ops=2, num_classes=2, in_channels=3,
                        reduction_cells=(),
                        candidate_ops=("sep_conv_3x3", "identity"))


def blobs(seed=0, count=64):
    return load_dataset(f"synthetic:blobs2:{seed}", count=count)


# ------------------------------------------------------------- binarization


@given(st.lists(st.floats(-0.1, 1.0, allow_nan=False), min_size=1, max_size=30),
       st.sampled_from([1e-4, 1e-3, 5e-3, 1e-2, 0.5]))
@settings(max_examples=80, deadline=None)
def test_binarize_is_heaviside_with_boundary_kept(vals, tau):
    m = np.array(vals)
    b = binarize(m, tau)
    assert b.dtype == bool
    np.testing.assert_array_equal(b, m >= tau)
    # idempotent: re-binarizing the 0/1 projection changes nothing
    again = binarize(b.astype(float), tau)
    np.testing.assert_array_equal(again, b)


def test_binarize_boundary_and_errors():
    assert binarize(np.array([5e-3]), 5e-3)[0]
    assert not binarize(np.array([5e-3 - 1e-12]), 5e-3)[0]
    with pytest.raises(RangeError):
        binarize(np.array([0.5]), 0.0)
    with pytest.raises(RangeError):
        binarize(np.array([0.5]), 1.5)


def test_init_masks_layout_and_initial_keep_everything():
    net = build_supernet(MICRO, 1)
    cfg = MaskTrainConfig()
    masks = init_masks(net, cfg)
    assert set(masks.w) == set(net.maskable_param_names())
    for group in (masks.alpha, masks.beta, masks.w):
        for arr in group.values():
            assert np.all(arr == cfg.mask_init)
    assert masks.binarize().all_ones()
    # the initial binarization is the same across the whole tau sweep
    patterns = []
    for tau in (1e-4, 1e-3, 5e-3, 1e-2):
        m = init_masks(net, MaskTrainConfig(tau=tau))
        b = m.binarize()
        patterns.append(np.concatenate(
            [b.alpha["normal"].ravel(), b.beta["normal"].ravel()]
            + [b.w[k].ravel() for k in sorted(b.w)]))
    for later in patterns[1:]:
        assert np.array_equal(patterns[0], later)


def test_config_validation():
    with pytest.raises(ConfigError):
        MaskTrainConfig(epochs=-1).validate()
    with pytest.raises(ConfigError):
        MaskTrainConfig(lr_w_mask=-1e-4).validate()
    with pytest.raises(ConfigError):
        MaskTrainConfig(tau=0.0).validate()
    with pytest.raises(ConfigError):
        MaskTrainConfig(lr_decay_factor=0.0).validate()
    assert MaskTrainConfig().validate() is not None


# -------------------------------------------------------- update arithmetic


def test_mask_update_is_adam_transform_plus_clamp():
    rng = generator(10)
    real = rng.uniform(-0.05, 0.9, (4, 3))
    grad = rng.normal(0.0, 1.0, (4, 3))
    state = AdamState()
    got = mask_update(real, grad, state, lr=1e-4)
    delta, m, v, t = oracles.adam_transform(
        grad, np.zeros_like(real), np.zeros_like(real), 0, 1e-4)
    np.testing.assert_allclose(got, np.clip(real + delta, -0.1, 1.0),
                               rtol=0, atol=0)
    np.testing.assert_allclose(state.m, m, rtol=1e-15)
    np.testing.assert_allclose(state.v, v, rtol=1e-15)
    assert state.t == t
    # second step continues from the carried state
    grad2 = rng.normal(0.0, 1.0, (4, 3))
    got2 = mask_update(got, grad2, state, lr=1e-4)
    delta2, *_ = oracles.adam_transform(grad2, m, v, t, 1e-4)
    np.testing.assert_allclose(got2, np.clip(got + delta2, -0.1, 1.0),
                               rtol=0, atol=0)


def test_mask_update_clamps_both_ends():
    state_lo = AdamState()
    low = mask_update(np.array([-0.0999]), np.array([50.0]), state_lo, lr=0.5)
    assert low[0] == -0.1
    state_hi = AdamState()
    high = mask_update(np.array([0.999]), np.array([-50.0]), state_hi, lr=0.5)
    assert high[0] == 1.0


def test_mask_update_zero_lr_is_identity():
    real = np.array([0.01, 0.5, -0.05])
    out = mask_update(real, np.array([1.0, -2.0, 3.0]), AdamState(), lr=0.0)
    np.testing.assert_array_equal(out, real)


# ---------------------------------------------------------------- structure


def test_degenerate_kinds():
    net = build_supernet(MICRO, 2)
    masks = init_masks(net, MaskTrainConfig())
    assert degenerate_kinds(net, masks.binarize()) == []
    masks.beta["normal"][:] = -0.1
    assert degenerate_kinds(net, masks.binarize()) == ["normal"]
    masks.beta["normal"][1] = 1.0
    assert degenerate_kinds(net, masks.binarize()) == []
    # edges alive but every op masked off is just as dead
    masks2 = init_masks(net, MaskTrainConfig())
    masks2.alpha["normal"][:] = -0.1
    assert degenerate_kinds(net, masks2.binarize()) == ["normal"]


def test_project_view_shares_net():
    net = build_supernet(MICRO, 3)
    masks = init_masks(net, MaskTrainConfig())
    view = project(net, masks)
    x = generator(4).normal(0.0, 1.0, (2, 3, 8, 8))
    direct = supernet_forward(net, x, masks=masks.binarize()).data
    assert np.array_equal(view.forward(x).data, direct)
    assert view.count_params() == count_params(net, masks.binarize())
    # masks are live: flipping one changes the view without re-projecting
    masks.beta["normal"][0] = -0.1
    changed = view.forward(x).data
    assert not np.array_equal(changed, direct)


def test_sparsity_report_counts():
    net = build_supernet(MICRO, 5)
    masks = init_masks(net, MaskTrainConfig())
    masks.alpha["normal"][0, 0] = -0.1
    masks.w[sorted(masks.w)[0]][..., 0] = -0.1
    rep = sparsity_report(masks)
    assert rep["alpha"]["kept"] == rep["alpha"]["total"] - 1
    assert rep["beta"]["fraction"] == 1.0
    assert 0.0 < rep["w"]["fraction"] < 1.0
    for level in rep.values():
        assert level["kept"] == round(level["fraction"] * level["total"])


# ------------------------------------------------------------- mask training


def trained_micro(seed=20):
    net = build_supernet(MICRO, seed)
    cfg = TrainConfig(epochs=2, batch_size=16, w_lr=0.05, warmup_epochs=1,
                      train_fraction=0.75, seed=seed)
    train_supernet(net, blobs(seed), cfg)
    return net


def test_train_masks_freezes_supernet_and_restores_flags():
    net = trained_micro(21)
    before_w = {n: t.data.copy() for n, t in net.named_params()}
    before_arch = {n: t.data.copy() for n, t in net.arch_named_params()}
    before_flags = [t.requires_grad for _, t in net.named_params()]
    masks = init_masks(net, MaskTrainConfig())
    out, metrics, state = train_masks(
        net, masks, blobs(21), MaskTrainConfig(epochs=2, batch_size=16, seed=1))
    for n, t in net.named_params():
        assert np.array_equal(t.data, before_w[n]), n
    for n, t in net.arch_named_params():
        assert np.array_equal(t.data, before_arch[n]), n
    assert [t.requires_grad for _, t in net.named_params()] == before_flags
    assert state.epoch == 2
    assert [r[:3] for r in metrics] == [("mask", 0, "train"), ("mask", 1, "train")]
    # the input mask object is never mutated
    assert np.all(masks.alpha["normal"] == MaskTrainConfig().mask_init)


def test_train_masks_values_stay_clamped():
    net = trained_micro(22)
    masks = init_masks(net, MaskTrainConfig())
    out, _, _ = train_masks(net, masks, blobs(22),
                            MaskTrainConfig(epochs=3, batch_size=8,
                                            lr_w_mask=0.05, lr_arch_mask=0.05,
                                            seed=2))
    for group in (out.alpha, out.beta, out.w):
        for arr in group.values():
            assert arr.min() >= -0.1 and arr.max() <= 1.0


def test_train_masks_zero_lr_keeps_masks():
    net = trained_micro(23)
    masks = init_masks(net, MaskTrainConfig())
    out, _, _ = train_masks(net, masks, blobs(23),
                            MaskTrainConfig(epochs=1, batch_size=16,
                                            lr_w_mask=0.0, lr_arch_mask=0.0,
                                            seed=3))
    for k, v in out.alpha.items():
        np.testing.assert_array_equal(v, masks.alpha[k])
    for k, v in out.w.items():
        np.testing.assert_array_equal(v, masks.w[k])


def test_train_masks_resume_matches_straight():
    net = trained_micro(24)
    data = blobs(24)
    cfg = MaskTrainConfig(epochs=3, batch_size=16, seed=4)
    straight, s_metrics, _ = train_masks(net, init_masks(net, cfg), data, cfg)

    class Interrupt(Exception):
        pass

    grabbed = {}

    def abort(ep, masks, state, metrics):
        grabbed["masks"] = masks.copy()
        grabbed["state"] = state
        if ep == 0:
            raise Interrupt

    with pytest.raises(Interrupt):
        train_masks(net, init_masks(net, cfg), data, cfg, on_epoch=abort)
    resumed, r_metrics, _ = train_masks(net, grabbed["masks"], data, cfg,
                                        state=grabbed["state"])
    for k in straight.alpha:
        assert np.array_equal(straight.alpha[k], resumed.alpha[k])
        assert np.array_equal(straight.beta[k], resumed.beta[k])
    for k in straight.w:
        assert np.array_equal(straight.w[k], resumed.w[k])


def test_engineered_harmful_weight_flips_within_100_steps():
    # scalar straight-through simulation: loss = (m_bin * w * x - y)^2 with
    # y = 0, so keeping the weight is pure harm and dropping it is exact
    w, x, y = 5.0, 2.0, 0.0
    cfg = MaskTrainConfig()
    real = np.array([cfg.mask_init])
    state = AdamState()
    flipped_at = None
    for step in range(1, 101):
        m_bin = binarize(real, cfg.tau).astype(float)
        grad = np.array([2.0 * (m_bin[0] * w * x - y) * w * x])
        # the update must be exactly the optimizer transform, clamped
        want_delta, *_ = oracles.adam_transform(
            grad, (state.m if state.m is not None else np.zeros(1)).copy(),
            (state.v if state.v is not None else np.zeros(1)).copy(),
            state.t, cfg.lr_w_mask)
        expected = np.clip(real + want_delta, -0.1, 1.0)
        real = mask_update(real, grad, state, cfg.lr_w_mask)
        np.testing.assert_array_equal(real, expected)
        if flipped_at is None and not binarize(real, cfg.tau)[0]:
            flipped_at = step
    assert flipped_at is not None and flipped_at <= 100
    # once the binary mask is 0 the loss gradient vanishes and it stays off
    assert not binarize(real, cfg.tau)[0]


def test_end_to_end_pruning_reduces_params():
    net = trained_micro(26)
    masks = init_masks(net, MaskTrainConfig())
    out, metrics, _ = train_masks(
        net, masks, blobs(26),
        MaskTrainConfig(epochs=6, batch_size=8, lr_w_mask=2e-3,
                        lr_arch_mask=2e-4, seed=6))
    rep = sparsity_report(out)
    assert rep["w"]["fraction"] < 1.0
    assert count_params(net, out.binarize()) < count_params(net)
    assert metrics[-1][6] == count_params(net, out.binarize())
