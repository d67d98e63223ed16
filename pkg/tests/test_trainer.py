"""Supernet training: splits, schedules, optimizer steps, phase alternation,
provenance guards."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from masknas.dataio import load_dataset
from masknas.errors import ConfigError, DivergenceError, ProvenanceError, RangeError
from masknas.numcore.tensor import Tensor
from masknas.rng import generator
from masknas.searchspace import SearchSpaceSpec, build_supernet
from masknas.trainer import (AdamState, SGDState, TrainConfig, adam_step,
                             clip_global_norm, cosine_lr, evaluate, sgd_step,
                             split_dataset, train_supernet,
                             trigger_probability)

MICRO = SearchSpaceSpec(nodes_per_cell=4, num_cells=1, init_channels=4,
                        num_candidate_ops=2, num_classes=2, in_channels=3,
                        reduction_cells=(),
                        candidate_ops=("max_pool_3x3", "identity"))


def tiny_config(**kw):
    base = dict(epochs=2, batch_size=16, w_lr=0.05, warmup_epochs=1,
                train_fraction=0.75, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def blobs(seed=0, count=64):
    return load_dataset(f"synthetic:blobs2:{seed}", count=count)


# ------------------------------------------------------------------- splits


def test_split_deterministic_and_disjoint():
    data = blobs(1, 40)
    a_tr, a_va = split_dataset(data, 0.8, seed=9)
    b_tr, b_va = split_dataset(data, 0.8, seed=9)
    assert np.array_equal(a_tr.x, b_tr.x) and np.array_equal(a_va.y, b_va.y)
    assert a_tr.x.shape[0] == 32 and a_va.x.shape[0] == 8
    # every sample lands on exactly one side
    joined = np.concatenate([a_tr.x, a_va.x])
    assert joined.shape[0] == data.x.shape[0]
    seen = {arr.tobytes() for arr in joined}
    orig = {arr.tobytes() for arr in data.x}
    assert seen == orig
    c_tr, _ = split_dataset(data, 0.8, seed=10)
    assert not np.array_equal(a_tr.x, c_tr.x)


def test_split_rejects_degenerate():
    data = blobs(2, 10)
    with pytest.raises(ConfigError):
        split_dataset(data, 0.0, seed=0)
    with pytest.raises(ConfigError):
        split_dataset(data, 0.999, seed=0)  # empty val side


# ---------------------------------------------------------------- schedules


def test_cosine_endpoints_and_monotonicity():
    assert cosine_lr(0.1, 0, 20) == pytest.approx(0.1)
    assert cosine_lr(0.1, 20, 20) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(0.1, 10, 20) == pytest.approx(0.05)
    vals = [cosine_lr(0.1, t, 20) for t in range(21)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(RangeError):
        cosine_lr(0.1, 21, 20)
    with pytest.raises(ConfigError):
        cosine_lr(0.1, 0, 0)


@given(t=st.integers(0, 400), horizon=st.integers(1, 200))
@settings(max_examples=60, deadline=None)
def test_trigger_linear_properties(t, horizon):
    p = trigger_probability(t, horizon, "linear")
    assert 0.0 <= p <= 1.0
    if t == 0:
        assert p == 1.0
    if t >= horizon:
        assert p == 0.0
    if t + 1 <= horizon:
        assert trigger_probability(t + 1, horizon, "linear") <= p


@given(t=st.integers(0, 400), horizon=st.integers(3, 300))
@settings(max_examples=60, deadline=None)
def test_trigger_final_third_properties(t, horizon):
    p = trigger_probability(t, horizon, "final_third")
    assert 0.0 <= p <= 1.0
    if t <= 2 * horizon / 3:
        assert p == 1.0
    if t >= horizon:
        assert p == 0.0


def test_trigger_zero_and_errors():
    assert trigger_probability(5, 10, "zero") == 0.0
    with pytest.raises(ConfigError):
        trigger_probability(0, 0, "linear")
    with pytest.raises(RangeError):
        trigger_probability(-1, 10, "linear")
    with pytest.raises(ConfigError):
        trigger_probability(0, 10, "cubic")


# --------------------------------------------------------------- optimizers


def test_sgd_matches_trace_oracle():
    rng = generator(30)
    p0 = rng.normal(0.0, 1.0, (4, 3))
    grads = [rng.normal(0.0, 1.0, (4, 3)) for _ in range(6)]
    t = Tensor(p0.copy(), requires_grad=True)
    state = SGDState()
    for g in grads:
        t.grad = g.copy()
        sgd_step(t, state, lr=0.1, momentum=0.9, weight_decay=3e-4)
    want_p, want_v = oracles.sgd_trace(p0, grads, 0.1, 0.9, 3e-4)
    np.testing.assert_allclose(t.data, want_p, rtol=1e-13)
    np.testing.assert_allclose(state.velocity, want_v, rtol=1e-13)


def test_sgd_update_mask_freezes_entries():
    rng = generator(31)
    p0 = rng.normal(0.0, 1.0, (6,))
    grads = [rng.normal(0.0, 1.0, (6,)) for _ in range(4)]
    mask = np.array([1.0, 0.0, 1.0, 0.0, 1.0, 1.0])
    t = Tensor(p0.copy(), requires_grad=True)
    state = SGDState()
    for g in grads:
        t.grad = g.copy()
        sgd_step(t, state, 0.1, 0.9, 1e-3, update_mask=mask)
    assert np.array_equal(t.data[mask == 0.0], p0[mask == 0.0])
    want_p, _ = oracles.sgd_trace(p0, grads, 0.1, 0.9, 1e-3, update_mask=mask)
    np.testing.assert_allclose(t.data, want_p, rtol=1e-13)


def test_adam_matches_trace_oracle():
    rng = generator(32)
    p0 = rng.normal(0.0, 1.0, (5,))
    grads = [rng.normal(0.0, 1.0, (5,)) for _ in range(7)]
    t = Tensor(p0.copy(), requires_grad=True)
    state = AdamState()
    for g in grads:
        t.grad = g.copy()
        adam_step(t, state, lr=3e-4, weight_decay=1e-3)
    want_p, want_m, want_v, want_t = oracles.adam_trace(
        p0, grads, 3e-4, weight_decay=1e-3)
    np.testing.assert_allclose(t.data, want_p, rtol=1e-12)
    np.testing.assert_allclose(state.m, want_m, rtol=1e-12)
    np.testing.assert_allclose(state.v, want_v, rtol=1e-12)
    assert state.t == want_t


def test_optimizer_steps_require_grad():
    t = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ProvenanceError):
        sgd_step(t, SGDState(), 0.1, 0.9, 0.0)
    with pytest.raises(ProvenanceError):
        adam_step(t, AdamState(), 0.1)


def test_clip_global_norm():
    a = Tensor(np.zeros(3), requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([3.0, 0.0, 0.0])
    b.grad = np.array([0.0, 4.0])
    norm = clip_global_norm([a, b], 1.0)
    assert norm == pytest.approx(5.0)
    clipped = np.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum())
    assert clipped == pytest.approx(1.0, rel=1e-9)
    # under the bound: untouched
    a.grad = np.array([0.1, 0.0, 0.0])
    b.grad = np.array([0.0, 0.0])
    assert clip_global_norm([a, b], 1.0) == pytest.approx(0.1)
    assert a.grad[0] == 0.1


# ------------------------------------------------------------ training loop


def test_phase_alternation_and_warmup_freeze():
    net = build_supernet(MICRO, 50)
    alpha0 = net.arch["normal"].alpha.data.copy()
    beta0 = net.arch["normal"].beta.data.copy()
    events = []
    cfg = tiny_config(epochs=2, warmup_epochs=2)
    _, metrics, state, _ = train_supernet(net, blobs(3), cfg,
                                          hook=lambda ph, sp: events.append((ph, sp)))
    # warm-up covers every epoch: no architecture step ever fires
    assert all(ph == "w" for ph, _ in events)
    assert all(sp == "train" for _, sp in events)
    assert np.array_equal(net.arch["normal"].alpha.data, alpha0)
    assert np.array_equal(net.arch["normal"].beta.data, beta0)
    assert state.epoch == 2
    assert [r[1] for r in metrics] == [0, 0, 1, 1]


def test_arch_steps_fire_after_warmup():
    net = build_supernet(MICRO, 51)
    alpha0 = net.arch["normal"].alpha.data.copy()
    events = []
    cfg = tiny_config(epochs=3, warmup_epochs=1, seed=6)
    train_supernet(net, blobs(4), cfg,
                   hook=lambda ph, sp: events.append((ph, sp)))
    arch_events = [e for e in events if e[0] == "arch"]
    assert arch_events, "no architecture step fired after warm-up"
    assert all(sp == "val" for _, sp in arch_events)
    assert not np.array_equal(net.arch["normal"].alpha.data, alpha0)


def test_training_is_seed_deterministic():
    cfg = tiny_config(epochs=2, warmup_epochs=1)
    runs = []
    for _ in range(2):
        net = build_supernet(MICRO, 52)
        _, metrics, _, _ = train_supernet(net, blobs(5), cfg)
        runs.append((metrics, {n: t.data.copy() for n, t in net.named_params()}))
    assert runs[0][0] == runs[1][0]
    for name in runs[0][1]:
        assert np.array_equal(runs[0][1][name], runs[1][1][name])


def test_resume_after_interruption_matches_straight_run():
    data = blobs(6)
    cfg = tiny_config(epochs=3, warmup_epochs=1)
    straight = build_supernet(MICRO, 53)
    train_supernet(straight, data, cfg)

    class Interrupt(Exception):
        pass

    grabbed = {}

    def abort_after_first(ep, net, state, metrics):
        grabbed["state"] = state
        if ep == 0:
            raise Interrupt

    resumed = build_supernet(MICRO, 53)
    with pytest.raises(Interrupt):
        train_supernet(resumed, data, cfg, on_epoch=abort_after_first)
    assert grabbed["state"].epoch == 1
    _, _, st1, _ = train_supernet(resumed, data, cfg, state=grabbed["state"])
    assert st1.epoch == 3
    for (n, a), (_, b) in zip(straight.named_params(), resumed.named_params()):
        assert np.array_equal(a.data, b.data), n
    for (n, a), (_, b) in zip(straight.arch_named_params(),
                              resumed.arch_named_params()):
        assert np.array_equal(a.data, b.data), n


def test_divergence_raises():
    net = build_supernet(MICRO, 54)
    net.head["w"].data[...] = np.nan
    with pytest.raises(DivergenceError):
        train_supernet(net, blobs(7), tiny_config())


def test_evaluate_reports_sensible_metrics():
    net = build_supernet(MICRO, 55)
    data = blobs(8, 32)
    loss, acc = evaluate(net, data, 16)
    assert np.isfinite(loss) and 0.0 <= acc <= 1.0
    # eval must not touch weights or buffers
    before = net.cells[0].ops[0][0].buffers["bn0_m"].copy()
    evaluate(net, data, 16)
    assert np.array_equal(before, net.cells[0].ops[0][0].buffers["bn0_m"])


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(w_lr=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(w_momentum=1.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(warmup_epochs=101).validate()
    with pytest.raises(ConfigError):
        TrainConfig(train_fraction=1.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(sigma_kind="exp").validate()
    assert TrainConfig().validate() is not None
