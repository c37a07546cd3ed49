"""tau-leaping simulation of controlled CTMCs, trajectory records and importance weights.

A rate multiplier is any callable ``phi(t, x) -> (B, D, N)`` array of positive
values with the self column ``phi[b, d, x[b, d]]`` equal to one.  The
controlled rate is ``gamma_t / N * phi[d, n]`` for a jump of site d to n.
"""
from __future__ import annotations

from dataclasses import dataclass
import math
import struct
from typing import Callable, Iterator

import numpy as np
from scipy.special import logsumexp, softmax

from .schedule import UniformKernel, categorical_from_uniform
from .state_space import SpaceSpec, check_enumerable

RateMultiplier = Callable[[float, np.ndarray], np.ndarray]


class StepSizeError(RuntimeError):
    """Too many sites needed their stay probability clamped."""


class DegenerateWeightsError(ValueError):
    """Importance weights are all zero (or all log-weights are -inf)."""


def unit_multiplier(n_states: int) -> RateMultiplier:
    def phi(t, x):
        return np.ones(np.shape(x) + (n_states,))

    return phi


# ---------------------------------------------------------------- time grids
@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("a time grid needs at least two points")
        if t[0] != 0.0 or t[-1] != 1.0:
            raise ValueError("time grid must start at 0 and end at 1")
        if np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be strictly increasing")
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, steps: int) -> "TimeGrid":
        if steps < 1:
            raise ValueError("need at least one step")
        t = np.linspace(0.0, 1.0, steps + 1)
        t[-1] = 1.0
        return cls(t)

    @classmethod
    def clustered(cls, steps: int, power: float = 2.0) -> "TimeGrid":
        """Nodes ``1 - (1 - s)^power`` on uniform s: finer towards t = 1."""
        if steps < 1 or power < 1:
            raise ValueError("need steps >= 1 and power >= 1")
        s = np.linspace(0.0, 1.0, steps + 1)
        t = 1.0 - (1.0 - s) ** power
        t[0], t[-1] = 0.0, 1.0
        return cls(t)

    @property
    def steps(self) -> int:
        return self.times.size - 1

    def grid_id(self) -> int:
        """Stable 32-bit id of the grid used to tag spilled trajectories."""
        import zlib

        return zlib.crc32(self.times.tobytes())


# ------------------------------------------------------- initial distributions
class InitialDistribution:
    """mu: sampled from per-site uniforms so each trajectory stream is self-contained."""

    spec: SpaceSpec
    fully_supported: bool = True

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def log_ratio(self, x) -> np.ndarray:
        """``out[..., d, n] = log mu(x^{d<-n}) - log mu(x)``."""
        raise NotImplementedError

    def pmf_table(self) -> np.ndarray:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return self.from_uniform(rng.random((count, self.spec.dim)))


@dataclass
class UniformInitial(InitialDistribution):
    spec: SpaceSpec
    fully_supported: bool = True

    def from_uniform(self, u):
        return np.minimum((u * self.spec.n_states).astype(np.int64), self.spec.n_states - 1)

    def log_ratio(self, x):
        return np.zeros(np.shape(x) + (self.spec.n_states,))

    def pmf_table(self):
        n = check_enumerable(self.spec)
        return np.full(n, 1.0 / n)


@dataclass
class ZeroTemperatureInitial(InitialDistribution):
    """Uniform mixture over the N constant configurations."""

    spec: SpaceSpec
    fully_supported: bool = False

    def from_uniform(self, u):
        sym = np.minimum((u[..., 0] * self.spec.n_states).astype(np.int64), self.spec.n_states - 1)
        return np.repeat(sym[..., None], self.spec.dim, axis=-1)

    def log_ratio(self, x):
        raise ValueError("zero-temperature initial distribution is not fully supported")

    def pmf_table(self):
        from .state_space import state_to_index

        p = np.zeros(check_enumerable(self.spec))
        for n in range(self.spec.n_states):
            p[state_to_index(self.spec, np.full(self.spec.dim, n))] = 1.0 / self.spec.n_states
        return p


class TableInitial(InitialDistribution):
    def __init__(self, spec: SpaceSpec, pmf):
        from .state_space import index_to_state, neighbor_indices

        pmf = np.asarray(pmf, dtype=float)
        if pmf.shape != (spec.size,) or np.any(pmf < 0):
            raise ValueError("pmf must be a non-negative vector over the enumerated space")
        self.spec = spec
        self.pmf = pmf / pmf.sum()
        self.fully_supported = bool(np.all(self.pmf > 0))
        self._cdf = np.cumsum(self.pmf)
        self._index_to_state = index_to_state
        self._nb = neighbor_indices(spec) if self.fully_supported else None

    def from_uniform(self, u):
        idx = np.searchsorted(self._cdf, u[..., 0] * self._cdf[-1], side="right")
        idx = np.minimum(idx, self.spec.size - 1)
        return self._index_to_state(self.spec, idx)

    def log_ratio(self, x):
        if not self.fully_supported:
            raise ValueError("initial pmf is not fully supported")
        from .state_space import state_to_index

        idx = state_to_index(self.spec, x)
        logp = np.log(self.pmf)
        return logp[self._nb[idx]] - logp[idx][..., None, None]

    def pmf_table(self):
        return self.pmf


def initial_from_config(name: str, spec: SpaceSpec, pmf=None) -> InitialDistribution:
    if name == "uniform":
        return UniformInitial(spec)
    if name in ("zero-temperature", "zero_temperature"):
        return ZeroTemperatureInitial(spec)
    if name == "table":
        return TableInitial(spec, pmf)
    raise ValueError(f"unknown initial distribution {name!r}")


# ------------------------------------------------------------- tau-leap step
@dataclass
class StepResult:
    x_next: np.ndarray
    survival: np.ndarray  # (B,)
    jump: np.ndarray  # (B,)
    log_step_ratio: np.ndarray  # (B,) log p^u_step / p^r_step
    clamped: int
    sites: int


def site_transition_probs(x, phi_val, gbar, n_states):
    """tau-leap per-site distribution (B, D, N) and clamp mask (B, D).

    ``gbar`` may be ``inf`` (memoryless first step): the site is then
    resampled from ``phi`` normalised over all N symbols, which is the exact
    reference kernel when ``phi`` is all ones.
    """
    onehot = x[..., None] == np.arange(n_states)
    off = np.where(onehot, 0.0, phi_val)
    if math.isinf(gbar):
        probs = np.where(onehot, 1.0, off)
        probs = probs / probs.sum(-1, keepdims=True)
        return probs, np.zeros(x.shape, dtype=bool)
    jump = gbar / n_states * off
    stay = 1.0 - jump.sum(-1)
    clamp = stay < 0
    if np.any(clamp):
        total = jump.sum(-1, keepdims=True)
        jump = np.where(clamp[..., None], jump / total, jump)
        stay = np.where(clamp, 0.0, stay)
    probs = np.where(onehot, stay[..., None], jump)
    return probs, clamp


def tau_leap_step(kernel: UniformKernel, x, t0: float, t1: float, phi: RateMultiplier,
                  u: np.ndarray | None = None, rng: np.random.Generator | None = None,
                  phi_val: np.ndarray | None = None) -> StepResult:
    """Advance ``x`` (B, D) from t0 to t1 with rates frozen at t0."""
    x = np.asarray(x)
    N = kernel.N
    gbar = float(kernel.gamma_bar(t0, t1))
    if phi_val is None:
        phi_val = phi(t0, x)
    if u is None:
        u = (rng or np.random.default_rng()).random(x.shape)
    probs, clamp = site_transition_probs(x, phi_val, gbar, N)
    x_next = categorical_from_uniform(probs, u).astype(np.int64)
    ref_probs, _ = site_transition_probs(x, np.ones_like(phi_val), gbar, N)

    moved = x_next != x
    with np.errstate(divide="ignore"):
        chosen = np.take_along_axis(phi_val, x_next[..., None], -1)[..., 0]
        p_u = np.take_along_axis(probs, x_next[..., None], -1)[..., 0]
        p_r = np.take_along_axis(ref_probs, x_next[..., None], -1)[..., 0]
        log_ratio = np.sum(np.log(p_u) - np.log(p_r), axis=-1)
    if math.isinf(gbar):
        # the path-RND increments are undefined over an infinite-noise step
        survival = np.zeros(x.shape[0])
        jump = np.zeros(x.shape[0])
    else:
        onehot = x[..., None] == np.arange(N)
        survival = gbar / N * np.sum(np.where(onehot, 0.0, 1.0 - phi_val), axis=(-1, -2))
        jump = np.sum(np.where(moved, np.log(chosen), 0.0), axis=-1)
    return StepResult(x_next, survival, jump, log_ratio, int(clamp.sum()), int(clamp.size))


# ------------------------------------------------------------------ rollout
@dataclass
class TrajectoryRecord:
    states: np.ndarray | None
    survival: np.ndarray
    jump: np.ndarray
    log_step_ratio: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    seed: int
    index: int

    @property
    def log_rnd_star_ref(self) -> float:
        return float(self.survival.sum() + self.jump.sum())


@dataclass
class TrajectoryBatch:
    x0: np.ndarray  # (B, D)
    x1: np.ndarray  # (B, D)
    survival: np.ndarray  # (B, M)
    jump: np.ndarray  # (B, M)
    log_step_ratio: np.ndarray  # (B, M)
    seed: int
    indices: np.ndarray  # (B,)
    states: np.ndarray | None = None  # (B, M + 1, D)
    clamped: int = 0
    sites: int = 0
    grid_id: int = 0
    jumps: np.ndarray | None = None  # (B,) site changes per trajectory

    def __len__(self):
        return self.x0.shape[0]

    @property
    def clamp_rate(self) -> float:
        return self.clamped / self.sites if self.sites else 0.0

    @property
    def log_rnd_star_ref(self) -> np.ndarray:
        """Approximate log p*/p^r per trajectory (survival + jump sums)."""
        return self.survival.sum(-1) + self.jump.sum(-1)

    @property
    def log_rnd_u_ref(self) -> np.ndarray:
        return self.log_step_ratio.sum(-1)

    def records(self) -> Iterator[TrajectoryRecord]:
        for b in range(len(self)):
            yield TrajectoryRecord(
                None if self.states is None else self.states[b],
                self.survival[b], self.jump[b], self.log_step_ratio[b],
                self.x0[b], self.x1[b], self.seed, int(self.indices[b]),
            )


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream owned by one trajectory."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def trajectory_uniforms(seed: int, indices, steps: int, dim: int) -> np.ndarray:
    """Uniforms (B, steps + 1, D); row 0 draws x0, row i + 1 drives step i."""
    out = np.empty((len(indices), steps + 1, dim))
    for b, i in enumerate(indices):
        out[b] = trajectory_rng(seed, int(i)).random((steps + 1, dim))
    return out


def rollout(kernel: UniformKernel, phi: RateMultiplier, grid: TimeGrid,
            initial: InitialDistribution, count: int, seed: int = 0,
            start_index: int = 0, record_states: bool = False,
            max_clamp_rate: float = 0.01, chunk: int = 4096) -> TrajectoryBatch:
    """Simulate ``count`` trajectories with tau-leaping on ``grid``."""
    M = grid.steps
    D = kernel.D
    parts = []
    for lo in range(0, count, chunk):
        idx = np.arange(start_index + lo, start_index + min(count, lo + chunk))
        u = trajectory_uniforms(seed, idx, M, D)
        x = initial.from_uniform(u[:, 0])
        x0 = x.copy()
        B = x.shape[0]
        surv = np.zeros((B, M))
        jump = np.zeros((B, M))
        lr = np.zeros((B, M))
        states = np.empty((B, M + 1, D), dtype=np.int64) if record_states else None
        if record_states:
            states[:, 0] = x
        clamped = sites = 0
        jumps = np.zeros(B, dtype=np.int64)
        for i in range(M):
            res = tau_leap_step(kernel, x, grid.times[i], grid.times[i + 1], phi, u=u[:, i + 1])
            jumps += np.count_nonzero(res.x_next != x, axis=-1)
            x = res.x_next
            surv[:, i], jump[:, i], lr[:, i] = res.survival, res.jump, res.log_step_ratio
            clamped += res.clamped
            sites += res.sites
            if record_states:
                states[:, i + 1] = x
        parts.append(TrajectoryBatch(x0, x, surv, jump, lr, seed, idx, states, clamped, sites,
                                     grid.grid_id(), jumps))
    batch = _concat(parts)
    if batch.clamp_rate > max_clamp_rate:
        raise StepSizeError(
            f"clamp rate {batch.clamp_rate:.3%} exceeds {max_clamp_rate:.3%}; refine the time grid"
        )
    return batch


def _concat(parts):
    if len(parts) == 1:
        return parts[0]
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    states = None if parts[0].states is None else cat("states")
    return TrajectoryBatch(cat("x0"), cat("x1"), cat("survival"), cat("jump"),
                           cat("log_step_ratio"), parts[0].seed, cat("indices"), states,
                           sum(p.clamped for p in parts), sum(p.sites for p in parts),
                           parts[0].grid_id, cat("jumps"))


# --------------------------------------------------------- importance weights
def raw_log_weights(batch: TrajectoryBatch, target=None, log_ref_terminal=None,
                    memoryless: bool = False) -> np.ndarray:
    """Unnormalised log p*/p^u per trajectory.

    memoryless: ``log nu~(x1) - log p^r_1(x1) - log p^u/p^r``; otherwise the
    accumulated survival + jump terms replace the terminal ratio.
    """
    log_u_ref = batch.log_rnd_u_ref
    if memoryless:
        if target is None:
            raise ValueError("memoryless weighting needs the target")
        log_star_ref = np.asarray(target.log_weight(batch.x1), dtype=float)
        if log_ref_terminal is not None:
            log_star_ref = log_star_ref - np.asarray(log_ref_terminal(batch.x1), dtype=float)
    else:
        log_star_ref = batch.log_rnd_star_ref
    return log_star_ref - log_u_ref


def normalize_log_weights(logw) -> np.ndarray:
    logw = np.asarray(logw, dtype=float)
    if logw.size == 0:
        raise DegenerateWeightsError("empty batch")
    if not np.any(np.isfinite(logw)) or np.any(np.isnan(logw)):
        raise DegenerateWeightsError("no finite log-weights in batch")
    return softmax(logw)


def log_importance_weights(batch: TrajectoryBatch, target=None, log_ref_terminal=None,
                           memoryless: bool = False) -> np.ndarray:
    """Softmax-normalised trajectory weights approximating p*/p^u over the batch."""
    return normalize_log_weights(raw_log_weights(batch, target, log_ref_terminal, memoryless))


def ess(weights) -> float:
    """Normalised effective sample size (sum w)^2 / (B sum w^2), in [1/B, 1]."""
    w = np.asarray(weights, dtype=float)
    if w.size == 0 or np.any(w < 0) or not np.any(w > 0):
        raise DegenerateWeightsError("weights must be non-negative and not all zero")
    w = w / w.max()
    val = w.sum() ** 2 / (w.size * np.sum(w * w))
    return float(min(1.0, max(1.0 / w.size, val)))


def ess_from_log(logw) -> float:
    logw = np.asarray(logw, dtype=float)
    return float(np.exp(2 * logsumexp(logw) - logsumexp(2 * logw) - math.log(logw.size)))


# ----------------------------------------------------------------- spilling
_REC_HEADER = struct.Struct("<IqqII")  # grid id, seed, index, M, D


def write_trajectories(path, batch: TrajectoryBatch) -> None:
    """Append length-prefixed binary records (grid id, seed, states, increments)."""
    if batch.states is None:
        raise ValueError("spilling needs recorded states")
    B, M1, D = batch.states.shape
    with open(path, "ab") as fh:
        for b in range(B):
            body = (
                _REC_HEADER.pack(batch.grid_id, batch.seed, int(batch.indices[b]), M1 - 1, D)
                + batch.states[b].astype("<u2").tobytes()
                + batch.survival[b].astype("<f8").tobytes()
                + batch.jump[b].astype("<f8").tobytes()
                + batch.log_step_ratio[b].astype("<f8").tobytes()
            )
            fh.write(struct.pack("<Q", len(body)))
            fh.write(body)


def read_trajectories(path) -> list[TrajectoryRecord]:
    out = []
    with open(path, "rb") as fh:
        while True:
            head = fh.read(8)
            if not head:
                break
            (length,) = struct.unpack("<Q", head)
            body = fh.read(length)
            grid_id, seed, index, M, D = _REC_HEADER.unpack_from(body)
            off = _REC_HEADER.size
            states = np.frombuffer(body, "<u2", (M + 1) * D, off).reshape(M + 1, D).astype(np.int64)
            off += 2 * (M + 1) * D
            surv = np.frombuffer(body, "<f8", M, off)
            jump = np.frombuffer(body, "<f8", M, off + 8 * M)
            lr = np.frombuffer(body, "<f8", M, off + 16 * M)
            out.append(TrajectoryRecord(states, surv.copy(), jump.copy(), lr.copy(),
                                        states[0], states[-1], seed, index))
    return out
