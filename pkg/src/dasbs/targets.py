"""Unnormalised targets nu(x) ∝ exp(-beta E(x)) with closed-form discrete scores."""
from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.special import logsumexp

from .state_space import (
    DEFAULT_ENUMERATION_CAP,
    SpaceSpec,
    enumerate_states,
    neighbor_indices,
    state_to_index,
)


def lattice_edges(side: int) -> np.ndarray:
    """(2 L^2, 2) array of (site, right neighbour) and (site, down neighbour) pairs.

    Periodic wrap; for L = 2 the right and left neighbour coincide, so the
    same pair of sites is bonded twice.
    """
    r, c = np.divmod(np.arange(side * side), side)
    right = r * side + (c + 1) % side
    down = ((r + 1) % side) * side + c
    site = r * side + c
    return np.concatenate([np.stack([site, right], 1), np.stack([site, down], 1)])


def lattice_neighbors(side: int) -> np.ndarray:
    """(L^2, 4) neighbour table: right, left, down, up (duplicates kept)."""
    r, c = np.divmod(np.arange(side * side), side)
    return np.stack(
        [
            r * side + (c + 1) % side,
            r * side + (c - 1) % side,
            ((r + 1) % side) * side + c,
            ((r - 1) % side) * side + c,
        ],
        axis=1,
    )


class Target:
    """Interface shared by lattice and table targets."""

    spec: SpaceSpec
    beta: float

    def energy(self, x) -> np.ndarray:
        raise NotImplementedError

    def log_weight(self, x) -> np.ndarray:
        return -self.beta * np.asarray(self.energy(x), dtype=float)

    def log_discrete_score(self, x) -> np.ndarray:
        raise NotImplementedError

    def discrete_score(self, x) -> np.ndarray:
        """``out[..., d, n] = nu(x^{d<-n}) / nu(x)``."""
        return np.exp(self.log_discrete_score(x))

    def log_pmf_table(self, cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
        lw = self.log_weight(enumerate_states(self.spec, cap))
        return lw - logsumexp(lw)

    def exact_pmf(self, cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
        p = np.exp(self.log_pmf_table(cap))
        return p / p.sum()


@dataclass(frozen=True)
class LatticeModel(Target):
    """Ising (N = 2, spins 0 -> -1, 1 -> +1) or Potts model on a periodic L x L torus."""

    kind: str
    side: int
    beta: float
    J: float = 1.0
    h: float = 0.0
    n_states: int = 2
    spec: SpaceSpec = field(init=False, repr=False)
    _nbrs: np.ndarray = field(init=False, repr=False, compare=False)
    _edges: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("ising", "potts"):
            raise ValueError(f"unknown lattice model {self.kind!r}")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.side < 2:
            raise ValueError("lattice side must be >= 2")
        if self.kind == "ising" and self.n_states != 2:
            raise ValueError("Ising model has N = 2")
        if self.kind == "potts" and self.h != 0.0:
            raise ValueError("Potts model has no external field")
        object.__setattr__(self, "spec", SpaceSpec.lattice(self.n_states, self.side))
        object.__setattr__(self, "_nbrs", lattice_neighbors(self.side))
        object.__setattr__(self, "_edges", lattice_edges(self.side))

    @classmethod
    def ising(cls, side, beta, J=1.0, h=0.0):
        return cls("ising", side, beta, J=J, h=h, n_states=2)

    @classmethod
    def potts(cls, side, beta, n_states, J=1.0):
        return cls("potts", side, beta, J=J, n_states=n_states)

    @classmethod
    def from_config(cls, cfg: dict) -> "LatticeModel":
        kind = cfg.get("kind", "ising")
        side = int(cfg["L"])
        beta = float(cfg["beta"])
        if kind == "ising":
            return cls.ising(side, beta, J=float(cfg.get("J", 1.0)), h=float(cfg.get("h", 0.0)))
        return cls.potts(side, beta, int(cfg.get("N", 4)), J=float(cfg.get("J", 1.0)))

    def to_config(self) -> dict:
        return {"kind": self.kind, "L": self.side, "N": self.n_states,
                "J": self.J, "h": self.h, "beta": self.beta}

    @property
    def critical_beta(self) -> float:
        # square-lattice self-dual point; Potts uses q = N
        if self.kind == "ising":
            return math.log(1 + math.sqrt(2)) / 2 / self.J
        return math.log(1 + math.sqrt(self.n_states)) / self.J

    def spins(self, x) -> np.ndarray:
        return 2.0 * np.asarray(x) - 1.0

    def energy(self, x) -> np.ndarray:
        x = self.spec.validate(x)
        i, j = self._edges[:, 0], self._edges[:, 1]
        if self.kind == "ising":
            s = self.spins(x)
            e = -self.J * np.sum(s[..., i] * s[..., j], axis=-1) - self.h * np.sum(s, axis=-1)
        else:
            e = -self.J * np.sum(x[..., i] == x[..., j], axis=-1).astype(float)
        return e

    def delta_energy(self, x) -> np.ndarray:
        """``out[..., d, n] = E(x^{d<-n}) - E(x)`` from the local neighbourhood only."""
        x = np.asarray(x)
        nb = x[..., self._nbrs]  # (..., D, 4)
        if self.kind == "ising":
            field_ = self.J * np.sum(2.0 * nb - 1.0, axis=-1) + self.h  # (..., D)
            sigma_n = 2.0 * np.arange(2) - 1.0
            sigma_x = 2.0 * x - 1.0
            return -(sigma_n - sigma_x[..., None]) * field_[..., None]
        counts = np.zeros(x.shape + (self.n_states,))
        for k in range(nb.shape[-1]):
            counts += nb[..., k, None] == np.arange(self.n_states)
        own = np.take_along_axis(counts, x[..., None], axis=-1)
        return -self.J * (counts - own)

    def log_discrete_score(self, x) -> np.ndarray:
        x = self.spec.validate(x)
        return -self.beta * self.delta_energy(x)

    def magnetization(self, x) -> np.ndarray:
        """Mean spin (Ising) or the largest single-symbol fraction (Potts)."""
        x = np.asarray(x)
        if self.kind == "ising":
            return np.mean(self.spins(x), axis=-1)
        frac = np.stack([np.mean(x == n, axis=-1) for n in range(self.n_states)], -1)
        return frac.max(axis=-1)


class TableTarget(Target):
    """Explicit log-weights on an enumerable space (beta = 1, E = -log weight)."""

    def __init__(self, spec: SpaceSpec, log_weights, cap: int = DEFAULT_ENUMERATION_CAP):
        log_weights = np.asarray(log_weights, dtype=float)
        if log_weights.shape != (spec.size,):
            raise ValueError("need one log-weight per enumerated state")
        if not np.all(np.isfinite(log_weights)):
            raise ValueError("log-weights must be finite")
        self.spec = spec
        self.beta = 1.0
        self.log_weights = log_weights
        self._nb = neighbor_indices(spec, cap)

    def energy(self, x):
        return -self.log_weights[state_to_index(self.spec, x)]

    def log_weight(self, x):
        return self.log_weights[state_to_index(self.spec, x)]

    def log_discrete_score(self, x):
        idx = state_to_index(self.spec, x)
        return self.log_weights[self._nb[idx]] - self.log_weights[idx][..., None, None]


def target_from_config(cfg: dict) -> Target:
    if cfg.get("kind") == "table":
        spec = SpaceSpec(int(cfg["N"]), int(cfg["D"]))
        return TableTarget(spec, np.asarray(cfg["log_weights"], dtype=float))
    return LatticeModel.from_config(cfg)
