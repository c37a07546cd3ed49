import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dasbs.approximators import (
    SGD, AdamW, BregmanDivergence, DenseMultiplier, NumericError, TabularMultiplier,
    build_multiplier, load_checkpoint,
)
from dasbs.state_space import SpaceSpec, enumerate_states
from helpers import gradient_probes, random_dense_problem

SPEC = SpaceSpec(2, 3)


def self_column(values, x):
    return np.take_along_axis(values, np.asarray(x)[..., None], -1)[..., 0]


def test_fresh_models_are_all_one(rng):
    x = rng.integers(0, 3, (7, 4))
    for m in (DenseMultiplier(SpaceSpec(3, 4), (16,), True), DenseMultiplier(SpaceSpec(3, 4), (16,), False),
              TabularMultiplier(SpaceSpec(3, 4), [0.0, 0.5]), TabularMultiplier(SpaceSpec(3, 4))):
        assert np.array_equal(m.evaluate(0.3, x), np.ones((7, 4, 3)))


def test_tabular_roundtrip_and_buckets():
    m = TabularMultiplier(SPEC, [0.0, 0.5])
    states = enumerate_states(SPEC)
    vals = np.exp(np.random.default_rng(0).normal(size=(8, 3, 2)))
    m.set_table(vals, 1)
    got = m.evaluate(0.7, states)
    own = states[..., None] == np.arange(2)
    assert np.allclose(got, np.where(own, 1.0, vals))
    assert np.allclose(m.evaluate(0.2, states), 1.0)
    assert np.allclose(m.table(0.9), got)


def test_batch_equals_pointwise(rng):
    model, t, x, _, _ = random_dense_problem(3)
    batch = model.evaluate(t, x)
    for i in range(len(x)):
        assert np.allclose(model.evaluate(t[i], x[i]), batch[i], rtol=1e-12)


def test_positivity_and_pinning(rng):
    model, t, x, _, _ = random_dense_problem(4)
    v = model.evaluate(t, x)
    assert np.all(v > 0)
    assert np.array_equal(self_column(v, x), np.ones(x.shape))


def test_controller_requires_time():
    m = DenseMultiplier(SPEC, (4,), True)
    with pytest.raises(ValueError):
        m.evaluate(None, np.zeros((1, 3), dtype=int))


def test_nan_parameters_raise():
    m = DenseMultiplier(SPEC, (4,), False)
    m.params["b1"][:] = np.nan
    with pytest.raises(NumericError):
        m.evaluate(None, np.zeros((1, 3), dtype=int))


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_bregman_nonnegative(a, b):
    for kind in ("generalized-kl", "squared-error"):
        d = BregmanDivergence(kind)
        assert d.value(a, b) >= -1e-12 * max(a, b)
        assert d.value(a, a) == pytest.approx(0.0, abs=1e-12 * a)


def test_constant_target_converges():
    m = TabularMultiplier(SPEC)
    x = enumerate_states(SPEC)
    tgt = np.full((8, 3, 2), 2.5)
    opt = SGD(lr=2.0)
    for _ in range(400):
        m.regression_step(opt, None, x, tgt)
    v = m.evaluate(None, x)
    own = x[..., None] == np.arange(2)
    assert np.allclose(v[~own], 2.5, rtol=1e-6)


def test_two_point_targets_converge_to_mean(rng):
    m = TabularMultiplier(SPEC)
    x = enumerate_states(SPEC)
    opt = SGD(lr=0.5)
    for _ in range(1000):
        tgt = np.where(rng.random((8, 3, 2)) < 0.25, 4.0, 0.5)
        m.regression_step(opt, None, x, tgt)
    m.fit_exact(None, np.repeat(x, 2, 0), np.stack([np.full((3, 2), 4.0), np.full((3, 2), 0.5)] * 8),
                np.tile([0.25, 0.75], 8))
    v = m.evaluate(None, x)
    own = x[..., None] == np.arange(2)
    assert np.allclose(v[~own], 0.25 * 4.0 + 0.75 * 0.5, rtol=1e-12)


def test_weighted_conditional_mean_sgd(rng):
    """Frozen dataset: tabular SGD under generalized KL reaches the weighted cell mean."""
    m = TabularMultiplier(SPEC)
    x = np.repeat(enumerate_states(SPEC), 4, 0)
    tgt = np.exp(rng.normal(size=(32, 3, 2)))
    w = rng.random(32)
    opt = SGD(lr=1.0)
    for _ in range(3000):
        m.regression_step(opt, None, x, tgt, w)
    wm = (w.reshape(8, 4)[..., None, None] * tgt.reshape(8, 4, 3, 2)).sum(1) / w.reshape(8, 4).sum(1)[:, None, None]
    v = m.evaluate(None, enumerate_states(SPEC))
    own = enumerate_states(SPEC)[..., None] == np.arange(2)
    assert np.max(np.abs(v[~own] / wm[~own] - 1)) < 1e-6


def test_rejected_rows_do_not_crash():
    m = DenseMultiplier(SPEC, (4,), False)
    x = np.zeros((3, 3), dtype=int)
    tgt = np.ones((3, 3, 2))
    tgt[1, 0, 1] = np.nan
    tgt[2, 2, 1] = np.inf
    loss, rejected = m.regression_step(AdamW(), None, x, tgt)
    assert rejected == 2 and np.isfinite(loss)


@pytest.mark.parametrize("seed", range(4))
def test_gradient_check(seed):
    model, t, x, targets, weights = random_dense_problem(seed)
    errs = gradient_probes(model, t, x, targets, weights, 25, np.random.default_rng(seed))
    assert errs.max() < 1e-5


def test_gradient_check_squared_error():
    model, t, x, targets, weights = random_dense_problem(9)
    errs = gradient_probes(model, t, x, targets, weights, 25, np.random.default_rng(9),
                           divergence=BregmanDivergence("squared-error"))
    assert errs.max() < 1e-5


def test_ema_examples():
    m = DenseMultiplier(SPEC, (4,), False, ema_decay=0.0)
    x = enumerate_states(SPEC)
    opt = AdamW(lr=0.1)
    m.ema_update()
    m.regression_step(opt, None, x, np.full((8, 3, 2), 3.0))
    m.ema_update()
    assert all(np.array_equal(m.shadow[k], m.params[k]) for k in m.params)
    f = DenseMultiplier(SPEC, (4,), False, ema_decay=1.0)
    f.ema_update()
    init = {k: v.copy() for k, v in f.params.items()}
    for _ in range(3):
        f.regression_step(opt, None, x, np.full((8, 3, 2), 3.0))
        f.ema_update()
    assert all(np.array_equal(f.shadow[k], init[k]) for k in init)
    live = f.evaluate(None, x)
    f.ema_swap()
    assert np.allclose(f.evaluate(None, x), 1.0)
    f.ema_swap()
    assert np.allclose(f.evaluate(None, x), live)
    assert DenseMultiplier(SPEC, (4,)).ema_decay == 0.9999


def test_snapshot_detached():
    m = DenseMultiplier(SPEC, (4,), False)
    snap = m.snapshot()
    m.regression_step(AdamW(lr=0.1), None, enumerate_states(SPEC), np.full((8, 3, 2), 3.0))
    assert np.allclose(snap.evaluate(None, enumerate_states(SPEC)), 1.0)


def test_checkpoint_roundtrip(tmp_path):
    model, t, x, targets, weights = random_dense_problem(5)
    opt = AdamW(lr=1e-2, weight_decay=0.1)
    model.regression_step(opt, t, x, targets, weights)
    model.ema_update()
    rng = np.random.default_rng(77)
    rng.random(3)
    path = tmp_path / "ck.npz"
    model.save(path, opt, rng, {"seed": 3})
    back, opt2, rng2, cfg = load_checkpoint(path)
    assert np.allclose(back.evaluate(t, x), model.evaluate(t, x), rtol=0, atol=0)
    assert cfg == {"seed": 3}
    assert rng2.random() == rng.random()
    a = model.regression_step(opt, t, x, targets, weights)[0]
    b = back.regression_step(opt2, t, x, targets, weights)[0]
    assert a == b
    tab = TabularMultiplier(SPEC, [0.0, 0.5])
    tab.save(tmp_path / "tab.npz")
    assert isinstance(load_checkpoint(tmp_path / "tab.npz")[0], TabularMultiplier)
    assert isinstance(build_multiplier(tab.architecture()), TabularMultiplier)
