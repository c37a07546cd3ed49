"""Alternating controller / corrector training.

Each stage first regresses the controller onto adjoint-matching (or
denoising-matching) targets built from the frozen corrector, then regresses
the corrector onto targets built from the frozen final controller.  Training
pairs (x0, x1) come from tau-leap rollouts of a published controller
snapshot, kept in a ring buffer and refreshed every ``resample_period``
updates.

For enumerable spaces ``TabularFixedPoint`` replaces the stochastic updates by
exact per-cell conditional means, with the endpoint coupling computed either
exactly (matrix exponentials) or from a histogram of rollout pairs.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
import logging
import math

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import logsumexp

from .approximators import (
    AdamW,
    BregmanDivergence,
    DenseMultiplier,
    Multiplier,
    TabularMultiplier,
)
from .ctmc import (
    InitialDistribution,
    TimeGrid,
    ZeroTemperatureInitial,
    ess,
    normalize_log_weights,
    rollout,
)
from .oracle import DENSE_CAP, transition_operator
from .schedule import UniformKernel
from .state_space import enumerate_states, neighbor_indices, state_to_index

log = logging.getLogger(__name__)

LOG_CLIP = (math.log(1e-30), math.log(1e30))


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config
@dataclass
class TrainConfig:
    stages: int = 5
    ctrl_steps: int = 500
    corr_steps: int = 250
    batch_size: int = 128
    times_per_pair: int = 8
    buffer_capacity: int = 512
    resample_period: int = 20
    resample_size: int = 0  # 0: batch_size
    rollout_steps: int = 100
    time_weight: str = "uniform"  # or "gamma": w_t = gamma_t / N
    divergence: str = "generalized-kl"
    corrector_loss: str = "auto"  # AM, DM or auto (AM iff mu fully supported)
    controller_loss: str = "AM"
    reweighting: bool = False
    initial: str = "uniform"
    lr: float = 1e-3
    weight_decay: float = 0.0
    ema_decay: float = 0.9999
    rollout_ema: bool = False
    max_clamp_rate: float = 0.01
    seed: int = 0

    def __post_init__(self):
        for name in ("stages", "ctrl_steps", "corr_steps", "batch_size", "times_per_pair",
                     "buffer_capacity", "resample_period", "rollout_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.buffer_capacity < self.batch_size:
            raise ConfigError("buffer capacity must be at least the batch size")
        if self.time_weight not in ("uniform", "gamma"):
            raise ConfigError(f"unknown time weight {self.time_weight!r}")
        if self.corrector_loss not in ("AM", "DM", "auto"):
            raise ConfigError(f"unknown corrector loss {self.corrector_loss!r}")
        if self.controller_loss not in ("AM", "DM"):
            raise ConfigError(f"unknown controller loss {self.controller_loss!r}")
        BregmanDivergence(self.divergence)

    @classmethod
    def from_dict(cls, cfg: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"unknown train options: {sorted(unknown)}")
        return cls(**cfg)

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved_corrector_loss(self, initial: InitialDistribution) -> str:
        if self.corrector_loss == "auto":
            return "AM" if initial.fully_supported else "DM"
        if self.corrector_loss == "AM" and not initial.fully_supported:
            raise ConfigError("corr-AM needs a fully supported initial distribution")
        return self.corrector_loss


# ---------------------------------------------------------- target builders
def shift_gather(table, anchor, query):
    """``out[b, d, n] = table[b, d, (anchor[b, d] + n - query[b, d]) mod N]``.

    ``table`` holds ratios anchored at ``anchor``; the result re-expresses an
    edit of ``query`` as the cyclically shifted edit of ``anchor``.
    """
    N = table.shape[-1]
    m = (np.asarray(anchor)[..., None] + np.arange(N) - np.asarray(query)[..., None]) % N
    return np.take_along_axis(table, m, axis=-1)


def _pin_self(log_t, x):
    return np.where(np.asarray(x)[..., None] == np.arange(log_t.shape[-1]), 0.0,
                    np.clip(log_t, *LOG_CLIP))


def ctrl_am_log_targets(x, x1, log_score_x1, log_corr_x1):
    """log of [nu(x1^{d<-m}) / nu(x1)] / Phi_hat(x1)[d, m], m = x1[d] + n - x[d]."""
    if np.any(~np.isfinite(log_corr_x1)):
        raise FloatingPointError("corrector entry is zero or non-finite")
    return _pin_self(shift_gather(log_score_x1 - log_corr_x1, x1, x), x)


def corr_am_log_targets(x0, x1, log_mu_ratio_x0, log_phi0_x0):
    """log of [mu(x0^{d<-m}) / mu(x0)] / Phi_0(x0)[d, m], m = x0[d] + n - x1[d]."""
    return _pin_self(shift_gather(log_mu_ratio_x0 - log_phi0_x0, x0, x1), x1)


def _site_log_factors(kernel: UniformKernel, t):
    log_a, log_b = kernel.log_ab(np.asarray(t, dtype=float), 1.0)
    return np.asarray(log_a)[..., None, None], np.asarray(log_b)[..., None, None]


def corr_dm_log_targets(kernel: UniformKernel, x, x1, t):
    """log p^r_{1|t}(x1^{d<-n} | x) - log p^r_{1|t}(x1 | x); rows with t = 1 are nan."""
    N = kernel.N
    x = np.asarray(x)
    x1 = np.asarray(x1)
    log_a, log_b = _site_log_factors(kernel, t)
    n = np.arange(N)
    with np.errstate(invalid="ignore"):
        new = np.where(n == x[..., None], log_b, log_a)
        old = np.where(x1 == x, log_b[..., 0], log_a[..., 0])[..., None]
        out = new - old
    out = np.where(n == x1[..., None], 0.0, out)
    return _mark_degenerate(out, t)


def ctrl_dm_log_targets(kernel: UniformKernel, x, x1, t):
    """log p^r_{1|t}(x1 | x^{d<-n}) - log p^r_{1|t}(x1 | x); rows with t = 1 are nan."""
    N = kernel.N
    x = np.asarray(x)
    x1 = np.asarray(x1)
    log_a, log_b = _site_log_factors(kernel, t)
    n = np.arange(N)
    with np.errstate(invalid="ignore"):
        new = np.where(n == x1[..., None], log_b, log_a)
        old = np.where(x1 == x, log_b[..., 0], log_a[..., 0])[..., None]
        out = new - old
    out = np.where(n == x[..., None], 0.0, out)
    return _mark_degenerate(out, t)


def _mark_degenerate(out, t):
    t = np.broadcast_to(np.asarray(t, dtype=float), out.shape[:-2])
    out = np.where((t >= 1.0)[..., None, None], np.nan, out)
    return np.where(np.isnan(out), np.nan, np.clip(out, *LOG_CLIP))


def time_weights(kernel: UniformKernel, t, kind: str) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if kind == "uniform":
        return np.ones_like(t)
    return np.asarray(kernel.gamma(t), dtype=float) / kernel.N


def log_reference_terminal(kernel: UniformKernel, initial: InitialDistribution):
    """x -> log p^r_1(x), the reference chain's terminal law started from mu."""
    N, D = kernel.N, kernel.D
    log_a, log_b = kernel.log_ab(0.0, 1.0)
    if initial.fully_supported and type(initial).__name__ == "UniformInitial":
        return lambda x: np.full(np.shape(x)[:-1], -D * math.log(N))
    if isinstance(initial, ZeroTemperatureInitial):
        def f(x):
            x = np.asarray(x)
            h = np.stack([np.sum(x != c, axis=-1) for c in range(N)], -1)
            with np.errstate(invalid="ignore"):
                terms = np.where(h > 0, h * log_a, 0.0) + (D - h) * log_b
            return logsumexp(terms, axis=-1) - math.log(N)
        return f
    p1 = initial.pmf_table() @ kernel.transition_matrix(0.0, 1.0, DENSE_CAP)
    with np.errstate(divide="ignore"):
        lp1 = np.log(p1)
    return lambda x: lp1[state_to_index(kernel.spec, x)]


# ------------------------------------------------------------------ buffer
class PairBuffer:
    """Ring buffer of rollout endpoints with their log path-ratio terms."""

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self.x0 = np.zeros((capacity, dim), dtype=np.int64)
        self.x1 = np.zeros((capacity, dim), dtype=np.int64)
        self.log_star_ref = np.zeros(capacity)
        self.log_u_ref = np.zeros(capacity)
        self.seed = np.zeros(capacity, dtype=np.int64)
        self.index = np.zeros(capacity, dtype=np.int64)
        self.snapshot = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self._head = 0

    def __len__(self):
        return self.size

    def push(self, batch, snapshot_id: int) -> None:
        n = len(batch)
        if n > self.capacity:
            batch_slice = slice(n - self.capacity, n)
            n = self.capacity
        else:
            batch_slice = slice(0, n)
        pos = (self._head + np.arange(n)) % self.capacity
        self.x0[pos] = batch.x0[batch_slice]
        self.x1[pos] = batch.x1[batch_slice]
        self.log_star_ref[pos] = batch.log_rnd_star_ref[batch_slice]
        self.log_u_ref[pos] = batch.log_rnd_u_ref[batch_slice]
        self.seed[pos] = batch.seed
        self.index[pos] = batch.indices[batch_slice]
        self.snapshot[pos] = snapshot_id
        self._head = (self._head + n) % self.capacity
        self.size = min(self.capacity, self.size + n)

    def draw(self, rng: np.random.Generator, count: int) -> np.ndarray:
        if self.size == 0:
            raise RuntimeError("buffer is empty")
        return rng.integers(0, self.size, size=count)


# ----------------------------------------------------------------- trainer
@dataclass
class StepLog:
    step: int
    stage: int
    phase: str
    loss: float
    ess: float
    clamp_rate: float
    rejected: int = 0


def multiplier_fn(model: Multiplier):
    return lambda t, x: model.evaluate(t, x)


class Trainer:
    """Stochastic-gradient training of a controller and a corrector."""

    def __init__(self, kernel: UniformKernel, target, initial: InitialDistribution,
                 controller: Multiplier, corrector: Multiplier, config: TrainConfig,
                 grid: TimeGrid | None = None):
        self.kernel = kernel
        self.target = target
        self.initial = initial
        self.controller = controller
        self.corrector = corrector
        self.config = config
        self.grid = grid or TimeGrid.uniform(config.rollout_steps)
        self.corr_loss = config.resolved_corrector_loss(initial)
        self.divergence = BregmanDivergence(config.divergence)
        self.rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([config.seed, 1])))
        self.ctrl_opt = AdamW(config.lr, weight_decay=config.weight_decay)
        self.corr_opt = AdamW(config.lr, weight_decay=config.weight_decay)
        self.buffer = PairBuffer(config.buffer_capacity, kernel.D)
        self.log_ref_terminal = log_reference_terminal(kernel, initial)
        self.memoryless = kernel.schedule.memoryless
        self.history: list[StepLog] = []
        self.step = 0
        self.snapshot_id = 0
        self.next_index = 0
        self.last_clamp = 0.0
        self.rollout_model = controller.snapshot()

    # -------------------------------------------------------------- rollouts
    def publish(self) -> None:
        self.rollout_model = self.controller.snapshot(use_ema=self.config.rollout_ema)
        self.snapshot_id += 1

    def resample(self, count: int | None = None) -> None:
        count = count or self.config.resample_size or self.config.batch_size
        batch = rollout(self.kernel, multiplier_fn(self.rollout_model), self.grid, self.initial,
                        count, seed=self.config.seed, start_index=self.next_index,
                        max_clamp_rate=self.config.max_clamp_rate)
        self.next_index += count
        self.last_clamp = batch.clamp_rate
        self.buffer.push(batch, self.snapshot_id)

    def _raw_log_weights(self, idx):
        b = self.buffer
        if self.memoryless:
            star = self.target.log_weight(b.x1[idx]) - self.log_ref_terminal(b.x1[idx])
        else:
            star = b.log_star_ref[idx]
        return star - b.log_u_ref[idx]

    def _draw_pairs(self, count):
        idx = self.buffer.draw(self.rng, count)
        if self.config.reweighting:
            w = normalize_log_weights(self._raw_log_weights(idx))
            e = ess(w)
            w = w * count
        else:
            w = np.ones(count)
            e = 1.0
        return self.buffer.x0[idx], self.buffer.x1[idx], w, e

    def sample_times(self, count):
        nodes = getattr(self.controller, "time_nodes", None)
        if nodes is not None:
            return nodes[self.rng.integers(0, nodes.size - 1, size=count)]
        return self.rng.random(count)

    # ---------------------------------------------------------------- phases
    def controller_step(self, stage: int) -> StepLog:
        cfg = self.config
        x0, x1, w, e = self._draw_pairs(cfg.batch_size)
        R = cfg.times_per_pair
        x0r, x1r, wr = np.repeat(x0, R, 0), np.repeat(x1, R, 0), np.repeat(w, R)
        t = self.sample_times(x0r.shape[0])
        x = self.kernel.bridge_sample(x0r, x1r, t, self.rng)
        if cfg.controller_loss == "AM":
            log_score = self.target.log_discrete_score(x1)
            log_corr = self.corrector.log_evaluate(None, x1)
            log_t = ctrl_am_log_targets(x, x1r, np.repeat(log_score, R, 0),
                                        np.repeat(log_corr, R, 0))
        else:
            log_t = ctrl_dm_log_targets(self.kernel, x, x1r, t)
        weights = wr * time_weights(self.kernel, t, cfg.time_weight)
        loss, rejected = self.controller.regression_step(
            self.ctrl_opt, t, x, np.exp(log_t), weights, self.divergence)
        self.controller.ema_update()
        return StepLog(self.step, stage, "controller", loss, e, self.last_clamp, rejected)

    def corrector_step(self, stage: int) -> StepLog:
        cfg = self.config
        x0, x1, w, e = self._draw_pairs(cfg.batch_size)
        if self.corr_loss == "AM":
            log_t = corr_am_log_targets(
                x0, x1, self.initial.log_ratio(x0),
                self.rollout_model.log_evaluate(np.zeros(x0.shape[0]), x0))
            targets = np.exp(log_t)
        else:
            # the loss is linear in the target, so averaging the per-time
            # targets of one pair gives the same gradient as separate rows
            R = cfg.times_per_pair
            x0r, x1r = np.repeat(x0, R, 0), np.repeat(x1, R, 0)
            t = self.rng.random(x0r.shape[0])
            x = self.kernel.bridge_sample(x0r, x1r, t, self.rng)
            wt = time_weights(self.kernel, t, cfg.time_weight).reshape(-1, R)
            a = np.exp(corr_dm_log_targets(self.kernel, x, x1r, t)).reshape(-1, R, *x.shape[1:],
                                                                             self.kernel.N)
            ok = np.all(np.isfinite(a), axis=(2, 3))
            wt = np.where(ok, wt, 0.0)
            a = np.where(ok[..., None, None], a, 0.0)
            tot = wt.sum(1)
            targets = np.einsum("br,brdn->bdn", wt, a) / np.maximum(tot, 1e-300)[:, None, None]
            targets = np.where((tot > 0)[:, None, None], targets, np.nan)
            w = w * tot / R
        loss, rejected = self.corrector.regression_step(
            self.corr_opt, None, x1, targets, w, self.divergence)
        self.corrector.ema_update()
        return StepLog(self.step, stage, "corrector", loss, e, self.last_clamp, rejected)

    def run_stage(self, stage: int) -> dict:
        cfg = self.config
        if len(self.buffer) == 0:
            self.resample(cfg.buffer_capacity)
        logs = []
        for i in range(cfg.ctrl_steps):
            if i and i % cfg.resample_period == 0:
                self.publish()
                self.resample()
            self.step += 1
            logs.append(self._guard(self.controller_step, stage))
        self.publish()
        for i in range(cfg.corr_steps):
            if i and i % cfg.resample_period == 0:
                self.resample()
            self.step += 1
            logs.append(self._guard(self.corrector_step, stage))
        self.resample()
        self.history.extend(logs)
        ctrl = [r.loss for r in logs if r.phase == "controller"]
        corr = [r.loss for r in logs if r.phase == "corrector"]
        summary = {
            "stage": stage,
            "ctrl_loss": float(np.mean(ctrl)),
            "corr_loss": float(np.mean(corr)),
            "ess": self.buffer_ess(),
            "clamp_rate": self.last_clamp,
            "rejected": int(sum(r.rejected for r in logs)),
        }
        log.info("stage %d: %s", stage, summary)
        return summary

    def _guard(self, fn, stage):
        try:
            return fn(stage)
        except (FloatingPointError, ValueError) as exc:
            raise type(exc)(f"stage {stage}, step {self.step}: {exc}") from exc

    def buffer_ess(self) -> float:
        idx = np.arange(len(self.buffer))
        return ess(normalize_log_weights(self._raw_log_weights(idx)))

    def train(self, callback=None) -> list[dict]:
        out = []
        for k in range(1, self.config.stages + 1):
            out.append(self.run_stage(k))
            if callback is not None:
                callback(k, self)
        return out

    def sampler(self, use_ema: bool = True) -> Multiplier:
        return self.controller.snapshot(use_ema=use_ema)


def build_models(kernel: UniformKernel, arch: dict, config: TrainConfig, grid: TimeGrid):
    """Controller and corrector from an architecture section."""
    spec = kernel.spec
    kind = arch.get("type", "dense")
    if kind == "tabular":
        ctrl = TabularMultiplier(spec, grid.times, ema_decay=config.ema_decay)
        corr = TabularMultiplier(spec, None, ema_decay=config.ema_decay)
    else:
        hidden = tuple(arch.get("hidden", (256, 256)))
        ctrl = DenseMultiplier(spec, hidden, True, arch.get("n_fourier", 16),
                               config.ema_decay, seed=config.seed)
        corr = DenseMultiplier(spec, hidden, False, ema_decay=config.ema_decay,
                               seed=config.seed + 1)
    return ctrl, corr


# ------------------------------------------------------ exact tabular mode
class TabularFixedPoint:
    """Stage iteration with exhaustive expectations on an enumerated space.

    The controller lives on the nodes of ``grid`` and is interpolated in
    time by a cubic spline of its log-values.  ``coupling="exact"`` integrates the controlled
    chain with matrix exponentials on a refined grid; ``"empirical"`` uses
    the endpoint histogram of tau-leap rollouts (Monte-Carlo pairs with
    everything else summed exactly).  Each empirical estimate draws
    ``rounds`` batches of ``rollouts`` pairs under the current controller and
    is blended into a running histogram discounted by ``memory`` per call.
    """

    def __init__(self, kernel: UniformKernel, target, initial: InitialDistribution,
                 grid: TimeGrid, coupling: str = "exact", substeps: int = 4,
                 corrector_loss: str = "auto", controller_loss: str = "AM",
                 rollouts: int = 128, rounds: int = 1, memory: float = 0.0,
                 seed: int = 0):
        if coupling not in ("exact", "empirical"):
            raise ConfigError(f"unknown coupling mode {coupling!r}")
        self.kernel = kernel
        self.target = target
        self.initial = initial
        self.grid = grid
        self.coupling_mode = coupling
        self.substeps = substeps
        self.controller_loss = controller_loss
        self.corrector_loss = (("AM" if initial.fully_supported else "DM")
                               if corrector_loss == "auto" else corrector_loss)
        self.rollouts = rollouts
        self.rounds = rounds
        self.memory = memory
        self._hist = None
        self.seed = seed
        self.next_index = 0
        spec = kernel.spec
        self.states = enumerate_states(spec, DENSE_CAP)
        self.nb = neighbor_indices(spec, DENSE_CAP)
        S = self.states.shape[0]
        self.S = S
        self.controller = TabularMultiplier(spec, grid.times)
        self.corrector = TabularMultiplier(spec, None)
        self.mu = initial.pmf_table()
        self.log_score = target.log_discrete_score(self.states)
        self.P10 = kernel.transition_matrix(0.0, 1.0, DENSE_CAP)
        # shift[a, q, d, n] = (a[d] + n - q[d]) mod N
        N = kernel.N
        self.shift = (self.states[:, None, :, None] + np.arange(N)
                      - self.states[None, :, :, None]) % N
        self._d = np.arange(spec.dim)[None, None, :, None]
        self._spline = None

    # ---------------------------------------------------------- helpers
    def _gather(self, table, anchor_first: bool = True):
        """``G[a, q, d, n] = table[a, d, shift[a, q, d, n]]``."""
        return table[np.arange(self.S)[:, None, None, None], self._d, self.shift]

    def phi_fn(self, t):
        """Controller between nodes: cubic spline of the node log-values in time."""
        if self._spline is None:
            theta = self.controller.params["theta"]
            self._spline = CubicSpline(self.grid.times, theta, axis=0)
        return np.exp(self._spline(t))

    def coupling(self) -> np.ndarray:
        self._spline = None
        if self.coupling_mode == "exact":
            fine = np.interp(np.linspace(0, self.grid.steps, self.grid.steps * self.substeps + 1),
                             np.arange(self.grid.steps + 1), self.grid.times)
            P = transition_operator(self.kernel, self.phi_fn, fine, self.nb, order=4)
            return self.mu[:, None] * P
        count = self.rollouts * self.rounds
        batch = rollout(self.kernel, multiplier_fn(self.controller), self.grid, self.initial,
                        count, seed=self.seed, start_index=self.next_index)
        self.next_index += count
        counts = np.zeros((self.S, self.S))
        np.add.at(counts, (state_to_index(self.kernel.spec, batch.x0),
                           state_to_index(self.kernel.spec, batch.x1)), 1.0)
        self._hist = counts if self._hist is None else self.memory * self._hist + counts
        return self._hist / self._hist.sum()

    def _bridge_joint(self, pi, t):
        """J[x, x1] = sum_x0 pi(x0, x1) p(x_t = x | x0, x1)."""
        W = np.divide(pi, self.P10, out=np.zeros_like(pi), where=self.P10 > 0)
        Pt0 = self.kernel.transition_matrix(0.0, t, DENSE_CAP)
        P1t = self.kernel.transition_matrix(t, 1.0, DENSE_CAP)
        return (Pt0.T @ W) * P1t, P1t

    # ---------------------------------------------------------- updates
    def controller_update(self, pi) -> None:
        theta = self.controller.params["theta"]
        if self.controller_loss == "AM":
            psi = self.log_score - np.log(self.corrector.table())
            G = np.exp(np.clip(self._gather(psi), *LOG_CLIP))  # [x1, x, d, n]
        for j, t in enumerate(self.grid.times):
            J, P1t = self._bridge_joint(pi, float(t))
            den = J.sum(1)
            if self.controller_loss == "AM":
                num = np.einsum("xy,yxdn->xdn", J, G)
            else:
                ratio = np.divide(P1t[self.nb], P1t[:, None, None, :],
                                  out=np.zeros((self.S,) + self.nb.shape[1:] + (self.S,)),
                                  where=P1t[:, None, None, :] > 0)
                num = np.einsum("xy,xdny->xdn", J, ratio)
            seen = den > 0
            with np.errstate(divide="ignore"):
                theta[j, seen] = np.log(num[seen] / den[seen, None, None])
        self.controller._pin()

    def corrector_update(self, pi) -> None:
        nu_phi = pi.sum(0)
        if self.corrector_loss == "AM":
            log_phi0 = np.log(self.controller.table(0.0))
            psi = self.initial.log_ratio(self.states) - log_phi0
            H = np.exp(np.clip(self._gather(psi), *LOG_CLIP))  # [x0, x1, d, n]
            num = np.einsum("ab,abdn->bdn", pi, H)
        else:
            W = np.divide(pi, self.P10, out=np.zeros_like(pi), where=self.P10 > 0)
            num = np.einsum("ab,abdn->bdn", W, self.P10[:, self.nb])
        seen = nu_phi > 0
        theta = self.corrector.params["theta"]
        theta[0, seen] = np.log(num[seen] / nu_phi[seen, None, None])
        self.corrector._pin()

    def run_stage(self, ctrl_iters: int = 200, damping: float = 0.5,
                  tol: float = 1e-10) -> int:
        """Damped controller iteration (log space) to ``tol``, then one corrector update.

        The undamped iteration can oscillate; a step of ``damping`` towards
        the conditional mean is the exact-expectation analogue of a small
        regression step.  Returns the number of controller iterations used.
        """
        theta = self.controller.params["theta"]
        for i in range(1, ctrl_iters + 1):
            old = theta.copy()
            self.controller_update(self.coupling())
            theta[:] = (1 - damping) * old + damping * theta
            if np.max(np.abs(theta - old)) < tol:
                break
        self.corrector_update(self.coupling())
        return i

    def train(self, stages: int = 5, ctrl_iters: int = 200, damping: float = 0.5,
              tol: float = 1e-10, callback=None) -> list[int]:
        used = []
        for k in range(1, stages + 1):
            used.append(self.run_stage(ctrl_iters, damping, tol))
            if callback is not None:
                callback(k, self)
        return used
