import numpy as np
import pytest

from dasbs.approximators import DenseMultiplier, TabularMultiplier
from dasbs.ctmc import TimeGrid, UniformInitial, ZeroTemperatureInitial
from dasbs.oracle import SBOracle, path_kl
from dasbs.schedule import NoiseSchedule, UniformKernel
from dasbs.state_space import SpaceSpec, enumerate_states
from dasbs.targets import LatticeModel, TableTarget
from dasbs.trainer import (
    ConfigError, PairBuffer, TabularFixedPoint, TrainConfig, Trainer, corr_am_log_targets,
    corr_dm_log_targets, ctrl_am_log_targets, ctrl_dm_log_targets, shift_gather,
)

CONST = NoiseSchedule("constant", 1.0, 0.0)
LOGLIN = NoiseSchedule("loglinear", 1.0, 0.5)
MEMLESS = NoiseSchedule("memoryless", 1.0, 0.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(stages=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=64, buffer_capacity=32)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        TrainConfig(corrector_loss="AM").resolved_corrector_loss(
            ZeroTemperatureInitial(SpaceSpec(2, 4)))
    assert TrainConfig().resolved_corrector_loss(ZeroTemperatureInitial(SpaceSpec(2, 4))) == "DM"
    assert TrainConfig().resolved_corrector_loss(UniformInitial(SpaceSpec(2, 4))) == "AM"
    cfg = TrainConfig(stages=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_shift_gather():
    table = np.arange(6, dtype=float).reshape(1, 2, 3)
    out = shift_gather(table, np.array([[1, 0]]), np.array([[2, 0]]))
    # site 0: m = 1 + n - 2; site 1: m = n
    assert out[0, 0].tolist() == [2.0, 0.0, 1.0]
    assert out[0, 1].tolist() == [3.0, 4.0, 5.0]


def test_ctrl_am_examples(rng):
    model = LatticeModel.potts(2, 0.7, 3)
    x, x1 = rng.integers(0, 3, (5, 4)), rng.integers(0, 3, (5, 4))
    zero = np.zeros((5, 4, 3))
    out = ctrl_am_log_targets(x, x1, model.log_discrete_score(x1), zero)
    # n = x[d] gives m = x1[d]: a no-op edit of x1
    assert np.allclose(np.take_along_axis(out, x[..., None], -1), 0.0)
    flat = np.zeros((5, 4, 3))
    assert np.allclose(ctrl_am_log_targets(x, x1, flat, zero), 0.0)
    with pytest.raises(FloatingPointError):
        ctrl_am_log_targets(x, x1, flat, np.full((5, 4, 3), -np.inf))


def test_corr_am_examples(rng):
    x0, x1 = rng.integers(0, 3, (5, 4)), rng.integers(0, 3, (5, 4))
    zero = np.zeros((5, 4, 3))
    assert np.allclose(corr_am_log_targets(x0, x1, zero, zero), 0.0)
    lr = rng.normal(size=(5, 4, 3))
    out = corr_am_log_targets(x0, x1, lr, zero)
    assert np.allclose(np.take_along_axis(out, x1[..., None], -1), 0.0)


def test_dm_examples():
    k = UniformKernel(LOGLIN, SpaceSpec(3, 2))
    log_a, log_b = k.log_ab(0.4, 1.0)
    r = log_a - log_b
    x = np.array([[0, 1]])
    x1 = np.array([[0, 2]])
    c = corr_dm_log_targets(k, x, x1, 0.4)[0]
    assert c[0, 0] == 0.0 and c[1, 2] == 0.0          # n = x1[d]
    assert c[0, 1] == pytest.approx(r) and c[0, 2] == pytest.approx(r)  # x1[d] = x[d]
    d = ctrl_dm_log_targets(k, x, x1, 0.4)[0]
    assert d[0, 0] == 0.0 and d[1, 1] == 0.0          # n = x[d]
    assert d[0, 1] == pytest.approx(r)                # x[d] = x1[d], n != x1[d]
    assert d[1, 2] == pytest.approx(-r)               # x[d] != x1[d], n = x1[d]
    assert np.isnan(corr_dm_log_targets(k, x, x1, 1.0)).all()
    assert np.isnan(ctrl_dm_log_targets(k, x, x1, 1.0)).all()
    km = UniformKernel(MEMLESS, SpaceSpec(3, 2))
    assert np.allclose(corr_dm_log_targets(km, x, x1, 0.0), 0.0)
    assert np.allclose(ctrl_dm_log_targets(km, x, x1, 0.0), 0.0)


# ---------------------------------------------- exhaustive target identities
@pytest.fixture(scope="module")
def bridge():
    target = LatticeModel.ising(2, 0.6)
    k = UniformKernel(LOGLIN, target.spec)
    orc = SBOracle(k, np.full(16, 1 / 16), target.exact_pmf())
    states = enumerate_states(target.spec)
    S = len(states)
    a = np.repeat(states, S, 0)      # first index
    b = np.tile(states, (S, 1))      # second index
    return target, k, orc, states, a, b


def _expect(joint, vals, over_second=True):
    """E[vals | first] (over_second) or E[vals | second] for pair-indexed vals."""
    S = joint.shape[0]
    v = vals.reshape(S, S, *vals.shape[1:])
    if over_second:
        return np.einsum("ab,ab...->a...", joint, v) / joint.sum(1)[:, None, None]
    return np.einsum("ab,ab...->b...", joint, v) / joint.sum(0)[:, None, None]


@pytest.mark.parametrize("t", [0.0, 0.3, 0.7])
def test_ctrl_am_exhaustive(bridge, t):
    target, k, orc, states, x, x1 = bridge
    log_corr = np.log(orc.corrector())[np.tile(np.arange(16), 16)]
    vals = np.exp(ctrl_am_log_targets(x, x1, target.log_discrete_score(x1), log_corr))
    got = _expect(orc.joint(t, 1.0), vals)
    assert np.abs(got - orc.controller(t)).max() <= 1e-8


def test_corr_am_exhaustive(bridge):
    target, k, orc, states, x0, x1 = bridge
    log_phi0 = np.log(orc.controller(0.0))[np.repeat(np.arange(16), 16)]
    vals = np.exp(corr_am_log_targets(x0, x1, np.zeros_like(log_phi0), log_phi0))
    got = _expect(orc.joint(0.0, 1.0), vals, over_second=False)
    assert np.abs(got - orc.corrector()).max() <= 1e-8


@pytest.mark.parametrize("t", [0.0, 0.3, 0.7])
def test_corr_dm_exhaustive(bridge, t):
    target, k, orc, states, x, x1 = bridge
    vals = np.exp(corr_dm_log_targets(k, x, x1, t))
    got = _expect(orc.joint(t, 1.0), vals, over_second=False)
    assert np.abs(got - orc.corrector()).max() <= 1e-8


@pytest.mark.parametrize("t", [0.0, 0.3, 0.7])
def test_ctrl_dm_exhaustive(bridge, t):
    target, k, orc, states, x, x1 = bridge
    vals = np.exp(ctrl_dm_log_targets(k, x, x1, t))
    got = _expect(orc.joint(t, 1.0), vals)
    assert np.abs(got - orc.controller(t)).max() <= 1e-8


# ------------------------------------------------------------ the loop
def small_trainer(target, sched=LOGLIN, initial=None, **over):
    k = UniformKernel(sched, target.spec)
    cfg = TrainConfig(**{"stages": 1, "ctrl_steps": 30, "corr_steps": 10, "batch_size": 16,
                         "buffer_capacity": 64, "resample_period": 5, "rollout_steps": 20,
                         "lr": 3e-3, "ema_decay": 0.9, **over})
    ctrl = DenseMultiplier(target.spec, (16,), True, ema_decay=cfg.ema_decay)
    corr = DenseMultiplier(target.spec, (16,), False, ema_decay=cfg.ema_decay)
    return Trainer(k, target, initial or UniformInitial(target.spec), ctrl, corr, cfg)


def test_uniform_target_is_fixed_point():
    spec = SpaceSpec(2, 4)
    tr = small_trainer(TableTarget(spec, np.zeros(16)))
    tr.train()
    assert max(abs(r.loss) for r in tr.history) < 1e-12
    x = enumerate_states(spec)
    assert np.allclose(tr.controller.evaluate(0.5, x), 1.0)
    assert np.allclose(tr.corrector.evaluate(None, x), 1.0)


def test_buffer_detached_from_live_controller():
    tr = small_trainer(LatticeModel.ising(2, 0.6), resample_period=1000, ctrl_steps=1,
                       corr_steps=1)
    tr.resample(64)
    before = {k: getattr(tr.buffer, k).copy() for k in ("x0", "x1", "log_star_ref", "log_u_ref",
                                                         "snapshot")}
    snap_params = {k: v.copy() for k, v in tr.rollout_model.params.items()}
    for _ in range(20):
        tr.controller_step(1)
    for k, v in before.items():
        assert np.array_equal(getattr(tr.buffer, k), v)
    assert all(np.array_equal(tr.rollout_model.params[k], v) for k, v in snap_params.items())
    assert not all(np.array_equal(tr.controller.params[k], v) for k, v in snap_params.items())


def test_pair_buffer_ring():
    from dasbs.ctmc import rollout, unit_multiplier
    k = UniformKernel(CONST, SpaceSpec(2, 3))
    buf = PairBuffer(10, 3)
    b = rollout(k, unit_multiplier(2), TimeGrid.uniform(3), UniformInitial(k.spec), 7, seed=1)
    buf.push(b, 1)
    buf.push(b, 2)
    assert len(buf) == 10
    assert buf.snapshot.tolist().count(2) == 7
    buf.push(rollout(k, unit_multiplier(2), TimeGrid.uniform(3), UniformInitial(k.spec), 25), 3)
    assert len(buf) == 10 and set(buf.snapshot) == {3}


def test_zero_temperature_uses_dm_and_runs():
    tr = small_trainer(LatticeModel.ising(2, 0.6), initial=ZeroTemperatureInitial(SpaceSpec(2, 4)),
                       rollout_steps=50)
    assert tr.corr_loss == "DM"
    out = tr.train()
    assert np.isfinite(out[0]["ctrl_loss"]) and np.isfinite(out[0]["corr_loss"])


def test_reweighting_and_dm_controller_run():
    tr = small_trainer(LatticeModel.ising(2, 0.6), sched=MEMLESS, reweighting=True,
                       controller_loss="DM", time_weight="gamma")
    out = tr.train()
    assert 0 < out[0]["ess"] <= 1
    assert all(np.isfinite(r.loss) for r in tr.history)


def test_errors_carry_stage_context():
    tr = small_trainer(LatticeModel.ising(2, 0.6))
    tr.corrector.params["b1"][:] = np.nan
    with pytest.raises(FloatingPointError, match="stage 1, step"):
        tr.train()


@pytest.mark.parametrize("loss,tol", [("DM", 1e-12), ("AM", 1e-4)])
def test_memoryless_corrector_stays_one_exact(loss, tol):
    # DM targets are identically one at t = 0; AM inherits the controller's
    # residual at t = 0, which is only converged to the iteration tolerance
    target = LatticeModel.ising(2, 0.6)
    k = UniformKernel(MEMLESS, target.spec)
    fp = TabularFixedPoint(k, target, UniformInitial(target.spec), TimeGrid.clustered(40),
                           substeps=2, corrector_loss=loss)
    fp.train(stages=2, ctrl_iters=60, tol=1e-8)
    assert np.abs(fp.corrector.table() - 1.0).max() < tol


def test_memoryless_corrector_stays_one_sgd():
    # a 100-step controller is still noisy near t = 0, where memoryless steps
    # carry large accumulated noise; clamping is not what this test is about
    target = LatticeModel.ising(2, 0.3)
    tr = small_trainer(target, sched=MEMLESS, ctrl_steps=100, corr_steps=200, lr=5e-3,
                       corrector_loss="DM", rollout_steps=100, max_clamp_rate=0.05)
    tr.train()
    v = tr.corrector.evaluate(None, enumerate_states(target.spec))
    assert np.abs(np.log(v)).max() < 0.15


def test_exact_stage_path_kl_decreases():
    target = LatticeModel.ising(2, 0.4407)
    k = UniformKernel(LOGLIN, target.spec)
    init = UniformInitial(target.spec)
    orc = SBOracle(k, init.pmf_table(), target.exact_pmf())
    grid = TimeGrid.clustered(60)
    fp = TabularFixedPoint(k, target, init, grid, substeps=2)
    fine = np.interp(np.linspace(0, 60, 241), np.arange(61), grid.times)
    kls = []
    fp.train(stages=5, ctrl_iters=100, tol=1e-9,
             callback=lambda s, f: kls.append(path_kl(k, f.phi_fn, orc.controller, f.mu, fine)))
    for a, b in zip(kls[:-1], kls[1:]):
        assert b <= 1.1 * a
    assert kls[-1] < 1e-3
