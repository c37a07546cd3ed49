"""The state space Z_N^D: cyclic arithmetic, single-site edits, enumeration.

States are integer numpy arrays whose last axis has length D and whose
entries lie in ``0..N-1``.  Every function here accepts a single state of
shape ``(D,)`` or a batch of shape ``(..., D)``.
"""
from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

DEFAULT_ENUMERATION_CAP = 2**20

STATE_DTYPE = np.int64


class CapacityError(ValueError):
    """Raised when an enumeration would exceed the configured state cap."""


@dataclass(frozen=True)
class SpaceSpec:
    n_states: int
    dim: int
    side: int | None = None

    def __post_init__(self):
        if self.n_states < 2:
            raise ValueError(f"n_states must be >= 2, got {self.n_states}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.side is not None and self.side * self.side != self.dim:
            raise ValueError(f"side {self.side} incompatible with dim {self.dim}")

    @classmethod
    def lattice(cls, n_states: int, side: int) -> "SpaceSpec":
        return cls(n_states=n_states, dim=side * side, side=side)

    @property
    def size(self) -> int:
        """Number of states N**D (a Python int, exact)."""
        return self.n_states**self.dim

    def validate(self, x) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[-1:] != (self.dim,):
            raise ValueError(f"state length {x.shape[-1:]} != D={self.dim}")
        if not np.issubdtype(x.dtype, np.integer):
            raise ValueError("states must be integer arrays")
        if x.size and (x.min() < 0 or x.max() >= self.n_states):
            raise ValueError(f"state entries must lie in [0, {self.n_states})")
        return x

    def zeros(self) -> np.ndarray:
        return np.zeros(self.dim, dtype=STATE_DTYPE)


def edit(spec: SpaceSpec, x, d: int, n: int) -> np.ndarray:
    """Return a copy of ``x`` with site ``d`` replaced by symbol ``n``."""
    x = spec.validate(x)
    if not 0 <= d < spec.dim:
        raise IndexError(f"site {d} out of range for D={spec.dim}")
    if not 0 <= n < spec.n_states:
        raise ValueError(f"symbol {n} out of range for N={spec.n_states}")
    y = np.array(x, dtype=STATE_DTYPE, copy=True)
    y[..., d] = n
    return y


def _check_pair(spec: SpaceSpec, x, y):
    x = spec.validate(x)
    y = spec.validate(y)
    return x, y


def group_add(spec: SpaceSpec, x, y) -> np.ndarray:
    x, y = _check_pair(spec, x, y)
    return np.mod(x + y, spec.n_states).astype(STATE_DTYPE)


def group_sub(spec: SpaceSpec, x, y) -> np.ndarray:
    x, y = _check_pair(spec, x, y)
    return np.mod(x - y, spec.n_states).astype(STATE_DTYPE)


def hamming(spec: SpaceSpec, x, y):
    """Number of differing sites; an int for single states, an array for batches."""
    x, y = _check_pair(spec, x, y)
    h = np.count_nonzero(x != y, axis=-1)
    return int(h) if np.ndim(h) == 0 else h


def _radix(spec: SpaceSpec) -> np.ndarray:
    # most significant site first, so index order is lexicographic
    return spec.n_states ** np.arange(spec.dim - 1, -1, -1, dtype=np.int64)


def check_enumerable(spec: SpaceSpec, cap: int = DEFAULT_ENUMERATION_CAP) -> int:
    # compare in log space first so huge D never materialises N**D
    if spec.dim * math.log2(spec.n_states) > math.log2(cap) + 1e-9 or spec.size > cap:
        raise CapacityError(
            f"N^D = {spec.n_states}^{spec.dim} exceeds the enumeration cap {cap}"
        )
    return spec.size


def enumerate_states(spec: SpaceSpec, cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
    """All N**D states in lexicographic order, shape (N**D, D)."""
    size = check_enumerable(spec, cap)
    idx = np.arange(size, dtype=np.int64)
    return index_to_state(spec, idx)


def state_to_index(spec: SpaceSpec, x) -> np.ndarray:
    x = spec.validate(x)
    out = x.astype(np.int64) @ _radix(spec)
    return out


def index_to_state(spec: SpaceSpec, idx) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    radix = _radix(spec)
    return ((idx[..., None] // radix) % spec.n_states).astype(STATE_DTYPE)


def neighbor_indices(spec: SpaceSpec, cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
    """Index table ``nb[i, d, n]`` of ``state(i)`` with site d set to n."""
    states = enumerate_states(spec, cap)
    radix = _radix(spec)
    base = np.arange(states.shape[0], dtype=np.int64)
    n = np.arange(spec.n_states, dtype=np.int64)
    return base[:, None, None] + (n[None, None, :] - states[:, :, None]) * radix[None, :, None]


def hamming_matrix(spec: SpaceSpec, cap: int = 4096) -> np.ndarray:
    """Pairwise Hamming distances over the enumerated space (dense, small spaces)."""
    states = enumerate_states(spec, cap)
    h = np.zeros((states.shape[0], states.shape[0]), dtype=np.int64)
    for d in range(spec.dim):
        h += states[:, None, d] != states[None, :, d]
    return h
