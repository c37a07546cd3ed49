import math

import numpy as np
import pytest

from dasbs.mcmc import (
    ChainState, UnsupportedModelError, mh_acceptance, mh_sweep, run_chains, state_histogram,
    sw_bond_probability, sw_sweep, total_variation,
)
from dasbs.state_space import index_to_state, state_to_index
from dasbs.targets import LatticeModel


def test_mh_examples():
    ising = LatticeModel.ising(3, 0.28)
    assert mh_acceptance(ising, np.ones(9, dtype=int), 4, 0) == pytest.approx(0.10646, abs=5e-6)
    hot = LatticeModel.ising(3, 1e-300)
    chain = ChainState.start(hot, 50, seed=0)
    mh_sweep(chain)
    assert chain.acceptance_rate == 1.0
    assert chain.sweeps == 1 and chain.proposed == 50 * 9


def test_sw_examples():
    assert sw_bond_probability(LatticeModel.ising(4, 0.4407)) == pytest.approx(0.58582, abs=1e-4)
    assert sw_bond_probability(LatticeModel.potts(4, 0.5, 3)) == pytest.approx(1 - math.exp(-0.5))
    with pytest.raises(UnsupportedModelError):
        sw_sweep(ChainState.start(LatticeModel.ising(3, 0.3, h=0.1), 2))
    with pytest.raises(UnsupportedModelError):
        sw_sweep(ChainState.start(LatticeModel.ising(3, 0.3, J=-1.0), 2))


def test_sw_high_temperature_uniformises():
    model = LatticeModel.potts(2, 1e-300, 3)
    chain = ChainState.start(model, 20_000, seed=1, init="0")
    sw_sweep(chain)
    hist = state_histogram(model, chain.x)
    assert total_variation(hist, np.full(81, 1 / 81)) < 0.05


def test_states_stay_valid():
    model = LatticeModel.potts(3, 0.8, 4)
    for sweep in (mh_sweep, sw_sweep):
        chain = ChainState.start(model, 16, seed=2)
        for _ in range(5):
            sweep(chain)
        model.spec.validate(chain.x)


def test_mh_detailed_balance():
    model = LatticeModel.ising(2, 0.4407)
    p = model.exact_pmf()
    r = np.random.default_rng(3)
    n = 200_000
    start = index_to_state(model.spec, r.choice(16, size=n, p=p))
    chain = ChainState(model, start.copy(), r)
    mh_sweep(chain)
    C = np.zeros((16, 16))
    np.add.at(C, (state_to_index(model.spec, start), state_to_index(model.spec, chain.x)), 1)
    sym = C + C.T
    z = np.abs(C - C.T)[sym > 0] / np.sqrt(sym[sym > 0])
    assert z.max() < 5.0


@pytest.mark.parametrize("method", ["mh", "sw"])
@pytest.mark.parametrize("model", [LatticeModel.ising(2, 0.4407), LatticeModel.potts(2, 0.5, 3)],
                         ids=["ising", "potts"])
def test_stationary_histogram(method, model):
    x = run_chains(model, method, 200_000, chains=1000, seed=5)
    assert total_variation(state_histogram(model, x), model.exact_pmf()) < 0.02


def test_mh_and_sw_agree_on_magnetisation():
    model = LatticeModel.ising(4, 0.4407)
    a = run_chains(model, "mh", 40_000, chains=400, seed=6)
    b = run_chains(model, "sw", 40_000, chains=400, seed=7)
    bins = np.linspace(-1, 1, 18)
    ha = np.histogram(model.magnetization(a), bins)[0] / len(a)
    hb = np.histogram(model.magnetization(b), bins)[0] / len(b)
    assert total_variation(ha, hb) < 0.02


def _autocorr_time(trace, max_lag=50):
    x = trace - trace.mean(0)
    var = np.mean(x * x)
    tau = 1.0
    for lag in range(1, max_lag):
        rho = np.mean(x[lag:] * x[:-lag]) / var
        if rho < 0.05:
            break
        tau += 2 * rho
    return tau


def test_sw_decorrelates_faster_at_criticality():
    model = LatticeModel.ising(8, 0.4407)
    traces = {}
    for method, sweep in (("mh", mh_sweep), ("sw", sw_sweep)):
        chain = ChainState.start(model, 64, seed=8)
        for _ in range(200):
            sweep(chain)
        tr = []
        for _ in range(300):
            sweep(chain)
            tr.append(model.energy(chain.x))
        traces[method] = _autocorr_time(np.array(tr))
    assert traces["sw"] < traces["mh"]


def test_run_chains_shapes_and_errors():
    model = LatticeModel.ising(3, 0.3)
    x = run_chains(model, "mh", 70, chains=16, burn_in=5, thin=1, seed=0)
    assert x.shape == (70, 9)
    with pytest.raises(ValueError):
        run_chains(model, "gibbs", 10)
