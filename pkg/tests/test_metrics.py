import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dasbs.metrics import (
    MetricReport, SampleSet, SpecMismatchError, correlation_error, correlation_function,
    energy_w2, evaluate, magnetization_error, read_samples, wasserstein2_1d, write_samples,
)
from dasbs.mcmc import run_chains
from dasbs.state_space import SpaceSpec
from dasbs.targets import LatticeModel

ISING = LatticeModel.ising(4, 0.3)
UP = np.ones((5, 16), dtype=int)
DOWN = np.zeros((5, 16), dtype=int)
CHECKER = ((np.arange(4)[:, None] + np.arange(4)[None, :]) % 2).reshape(1, 16)


def test_magnetization_examples(rng):
    x = rng.integers(0, 2, (50, 16))
    assert magnetization_error(x, x, ISING) == 0.0
    assert magnetization_error(UP, DOWN, ISING) == 2.0
    assert magnetization_error(UP, np.concatenate([UP, DOWN]), ISING) == 1.0
    with pytest.raises(SpecMismatchError):
        magnetization_error(UP, np.ones((3, 9), dtype=int), ISING)


def test_correlation_examples(rng):
    x = rng.integers(0, 2, (50, 16))
    assert correlation_error(x, x, ISING) == 0.0
    assert np.allclose(correlation_function(UP, ISING), 1.0)
    assert correlation_error(UP, np.concatenate([UP, DOWN]), ISING) == pytest.approx(0.0, abs=1e-12)
    # checkerboard: C(r) = (-1)^(rx + ry), so the mixture with all-up is 1 or 0
    mix = np.concatenate([UP[:1], CHECKER])
    assert correlation_error(UP, mix, ISING) == pytest.approx(0.5, abs=1e-12)


def test_correlation_matches_direct_sum(rng):
    model = LatticeModel.potts(3, 0.5, 3)
    x = rng.integers(0, 3, (7, 9))
    g = x.reshape(7, 3, 3)
    direct = np.zeros((3, 3))
    for a in range(3):
        for b in range(3):
            same = g == np.roll(np.roll(g, -a, 1), -b, 2)
            direct[a, b] = np.mean((3 * same - 1) / 2)
    assert np.allclose(correlation_function(x, model), direct, atol=1e-12)
    s = 2.0 * rng.integers(0, 2, (6, 16)) - 1
    gs = s.reshape(6, 4, 4)
    direct = np.array([[np.mean(gs * np.roll(np.roll(gs, -a, 1), -b, 2)) for b in range(4)]
                       for a in range(4)])
    assert np.allclose(correlation_function((s > 0).astype(int), ISING), direct, atol=1e-12)


def test_correlation_vanishes_at_infinite_temperature(rng):
    a, b = rng.integers(0, 2, (20_000, 16)), rng.integers(0, 2, (20_000, 16))
    assert correlation_error(a, b, ISING) < 0.01


def test_w2_examples():
    assert wasserstein2_1d([0.0], [2.0]) == 2.0
    assert wasserstein2_1d([0.0, 2.0], [1.0, 3.0]) == 1.0
    assert wasserstein2_1d([3.0, 1.0, 2.0], [2.0, 3.0, 1.0]) == 0.0
    with pytest.raises(ValueError):
        wasserstein2_1d([], [1.0])
    # unequal sizes: point masses are still exact
    assert wasserstein2_1d([0.0] * 3, [2.0] * 5) == pytest.approx(2.0)
    assert wasserstein2_1d([0.0, 2.0], [0.0, 0.0, 2.0, 2.0]) == pytest.approx(0.0)


multiset = st.lists(st.integers(-20, 20), min_size=6, max_size=6)


@settings(max_examples=80, deadline=None)
@given(multiset, multiset, multiset)
def test_w2_is_a_metric(a, b, c):
    dab, dba = wasserstein2_1d(a, b), wasserstein2_1d(b, a)
    assert dab == pytest.approx(dba)
    assert (dab == 0) == (sorted(a) == sorted(b))
    assert wasserstein2_1d(a, c) <= dab + wasserstein2_1d(b, c) + 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    a, b = r.integers(0, 2, (12, 16)), r.integers(0, 2, (9, 16))
    pa, pb = a[r.permutation(12)], b[r.permutation(9)]
    for f in (magnetization_error, correlation_error, energy_w2):
        assert f(a, b, ISING) == pytest.approx(f(pa, pb, ISING), abs=1e-12)


def test_evaluate_self_is_zero(rng):
    s = SampleSet(rng.integers(0, 2, (30, 16)), ISING.spec)
    rep = evaluate(s, s, ISING)
    assert (rep.delta_mag, rep.delta_corr, rep.ew2) == (0.0, 0.0, 0.0)
    with pytest.raises(SpecMismatchError):
        evaluate(s, SampleSet(np.zeros((3, 16), dtype=int), SpaceSpec(3, 16)), ISING)
    with pytest.raises(FloatingPointError):
        MetricReport(np.nan, 0.0, 0.0, 1, 1)


def test_sample_set_validation():
    with pytest.raises(ValueError):
        SampleSet(np.zeros((0, 16), dtype=int), ISING.spec)
    with pytest.raises(ValueError):
        SampleSet(np.full((2, 16), 2), ISING.spec)


def test_sample_file_roundtrip(tmp_path, rng):
    s = SampleSet(rng.integers(0, 3, (11, 9)), SpaceSpec.lattice(3, 3), "mh", 4, "abc",
                  {"ess": 0.5})
    path = tmp_path / "s.bin"
    write_samples(path, s)
    back = read_samples(path)
    assert np.array_equal(back.states, s.states)
    assert (back.sampler, back.seed, back.config_hash, back.extra) == ("mh", 4, "abc", {"ess": 0.5})
    assert back.spec == s.spec
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"nope")
    with pytest.raises(ValueError):
        read_samples(bad)
