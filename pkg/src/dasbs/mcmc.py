"""Reference samplers for lattice models: single-site Metropolis-Hastings and Swendsen-Wang.

Both operate on a batch of independent chains, shape (C, D).
"""
from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .targets import LatticeModel


class UnsupportedModelError(ValueError):
    pass


@dataclass
class ChainState:
    model: LatticeModel
    x: np.ndarray  # (C, D)
    rng: np.random.Generator
    sweeps: int = 0
    accepted: int = 0
    proposed: int = 0

    @classmethod
    def start(cls, model: LatticeModel, chains: int, seed: int = 0, init: str = "random"):
        rng = np.random.default_rng(seed)
        D, N = model.spec.dim, model.spec.n_states
        if init == "random":
            x = rng.integers(0, N, size=(chains, D))
        else:
            x = np.full((chains, D), int(init))
        return cls(model, x.astype(np.int64), rng)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0


def mh_acceptance(model: LatticeModel, x, d: int, n: int) -> float:
    """min(1, nu(x^{d<-n}) / nu(x)) for a single proposal."""
    ld = model.log_discrete_score(np.asarray(x)[None])[0, d, n]
    return float(min(1.0, math.exp(ld)))


def _local_delta(model: LatticeModel, x, d, new):
    """E(x^{d<-new}) - E(x) at site d[c] of every chain c."""
    rows = np.arange(x.shape[0])
    nb = x[rows[:, None], model._nbrs[d]]  # (C, 4)
    old = x[rows, d]
    if model.kind == "ising":
        field_ = model.J * np.sum(2.0 * nb - 1.0, axis=1) + model.h
        return -((2.0 * new - 1.0) - (2.0 * old - 1.0)) * field_
    same_new = np.sum(nb == new[:, None], axis=1)
    same_old = np.sum(nb == old[:, None], axis=1)
    return -model.J * (same_new - same_old)


def mh_sweep(chain: ChainState) -> ChainState:
    """D single-site proposals: uniform site, uniform other symbol.

    A fixed site order with N = 2 makes the proposals deterministic and the
    sweep kernel periodic on small tori, so sites are drawn at random.
    """
    model, x, rng = chain.model, chain.x, chain.rng
    C, D = x.shape
    N = model.spec.n_states
    rows = np.arange(C)
    sites = rng.integers(0, D, size=(D, C))
    shifts = rng.integers(1, N, size=(D, C))
    logu = np.log(rng.random((D, C)))
    for k in range(D):
        d = sites[k]
        new = (x[rows, d] + shifts[k]) % N
        dE = _local_delta(model, x, d, new)
        accept = logu[k] < -model.beta * dE
        x[rows, d] = np.where(accept, new, x[rows, d])
        chain.accepted += int(accept.sum())
    chain.proposed += C * D
    chain.sweeps += 1
    return chain


def sw_bond_probability(model: LatticeModel) -> float:
    """Ising uses the +-1 spin convention, Potts the indicator convention."""
    if model.kind == "ising":
        return 1.0 - math.exp(-2.0 * model.beta * model.J)
    return 1.0 - math.exp(-model.beta * model.J)


def sw_sweep(chain: ChainState) -> ChainState:
    """One cluster update for every chain at once (block-diagonal bond graph)."""
    model, x, rng = chain.model, chain.x, chain.rng
    if model.kind == "ising" and model.h != 0.0:
        raise UnsupportedModelError("Swendsen-Wang needs zero external field")
    if model.J < 0:
        raise UnsupportedModelError("Swendsen-Wang needs ferromagnetic coupling")
    C, D = x.shape
    N = model.spec.n_states
    edges = model._edges
    i, j = edges[:, 0], edges[:, 1]
    p = sw_bond_probability(model)
    active = (x[:, i] == x[:, j]) & (rng.random((C, edges.shape[0])) < p)
    cb, eb = np.nonzero(active)
    rows = cb * D + i[eb]
    cols = cb * D + j[eb]
    graph = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(C * D, C * D))
    n_comp, labels = connected_components(graph, directed=False)
    new_sym = rng.integers(0, N, size=n_comp)
    chain.x = new_sym[labels].reshape(C, D).astype(np.int64)
    chain.sweeps += 1
    return chain


SWEEPS = {"mh": mh_sweep, "sw": sw_sweep}
DEFAULTS = {"mh": (1000, 10), "sw": (100, 1)}  # burn-in, thinning


def run_chains(model: LatticeModel, method: str, samples: int, chains: int = 64,
               burn_in: int | None = None, thin: int | None = None, seed: int = 0) -> np.ndarray:
    """Collect ``samples`` states from ``chains`` parallel chains after burn-in."""
    if method not in SWEEPS:
        raise ValueError(f"unknown MCMC method {method!r}")
    sweep = SWEEPS[method]
    b0, t0 = DEFAULTS[method]
    burn_in = b0 if burn_in is None else burn_in
    thin = t0 if thin is None else thin
    chains = max(1, min(chains, samples))
    chain = ChainState.start(model, chains, seed)
    for _ in range(burn_in):
        sweep(chain)
    out = []
    got = 0
    while got < samples:
        for _ in range(thin):
            sweep(chain)
        out.append(chain.x.copy())
        got += chains
    return np.concatenate(out)[:samples]


def state_histogram(model: LatticeModel, x) -> np.ndarray:
    from .state_space import state_to_index

    idx = state_to_index(model.spec, x)
    return np.bincount(idx, minlength=model.spec.size) / len(idx)


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
