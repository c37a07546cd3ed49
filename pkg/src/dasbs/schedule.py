"""Noise schedules and closed-form quantities of the uniform reference CTMC.

The reference process moves each site independently: at rate ``gamma_t / N``
a site jumps to each of the other N-1 symbols.  Over ``[s, t]`` the per-site
kernel keeps its symbol with probability ``B(s, t)`` and moves to any given
other symbol with probability ``A(s, t)``; both depend on time only through
the accumulated noise ``gamma_bar(s, t)``.

Matrix conventions on enumerated spaces: transition matrices are row
stochastic, ``P[x, y] = p(y | x)``, and generators store ``G[x, y] = r(y, x)``
so that every row sums to zero.
"""
from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from .state_space import SpaceSpec, enumerate_states, hamming_matrix

INF = math.inf

KINDS = ("constant", "loglinear", "memoryless")


class DegenerateBridgeError(ValueError):
    """Bridge requested between distinct endpoints with zero accumulated noise."""


@dataclass(frozen=True)
class NoiseSchedule:
    """``gamma_t`` with a closed-form integral.

    ``constant``: gamma_t = gamma.  ``loglinear``: gamma_t = gamma / (t + alpha)
    with alpha > 0.  ``memoryless``: the alpha = 0 limit, whose integral from
    zero diverges.
    """

    kind: str = "loglinear"
    gamma: float = 1.0
    alpha: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.kind == "memoryless" and self.alpha != 0:
            raise ValueError("memoryless schedule requires alpha = 0")
        if self.kind == "loglinear" and self.alpha == 0:
            raise ValueError("loglinear schedule requires alpha > 0 (use memoryless)")

    @classmethod
    def from_config(cls, cfg: dict) -> "NoiseSchedule":
        kind = cfg.get("kind", "loglinear")
        gamma = float(cfg.get("gamma", 1.0))
        alpha = float(cfg.get("alpha", 0.0 if kind != "loglinear" else 0.5))
        if kind == "loglinear" and alpha == 0:
            kind = "memoryless"
        if kind == "constant":
            alpha = 0.0
        return cls(kind=kind, gamma=gamma, alpha=alpha)

    def to_config(self) -> dict:
        return {"kind": self.kind, "gamma": self.gamma, "alpha": self.alpha}

    @property
    def memoryless(self) -> bool:
        return self.kind == "memoryless"

    def gamma_at(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            out = np.full_like(t, self.gamma)
        else:
            with np.errstate(divide="ignore"):
                out = self.gamma / (t + self.alpha)
        return out if out.ndim else float(out)

    def gamma_bar(self, s, t):
        """Accumulated noise over [s, t]; ``INF`` for memoryless with s = 0 < t."""
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        if np.any(s > t):
            raise ValueError("gamma_bar requires s <= t")
        if self.kind == "constant":
            out = self.gamma * (t - s)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                out = self.gamma * (np.log(t + self.alpha) - np.log(s + self.alpha))
            # memoryless: [0, 0] has zero length, log(0) - log(0) is nan
            out = np.where(t == s, 0.0, out)
        out = np.asarray(out, dtype=float)
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class KernelCoefficients:
    a: float
    b: float
    gamma_bar: float


def _coefs(gbar, n_states: int):
    """(a, b, log a, log b) for accumulated noise ``gbar`` (array or scalar)."""
    gbar = np.asarray(gbar, dtype=float)
    e = np.where(np.isinf(gbar), 0.0, np.exp(-np.where(np.isinf(gbar), 0.0, gbar)))
    a = (1.0 - e) / n_states
    b = (1.0 + (n_states - 1) * e) / n_states
    with np.errstate(divide="ignore"):
        one_minus_e = np.where(np.isinf(gbar), 1.0, -np.expm1(-np.where(np.isinf(gbar), 1.0, gbar)))
        log_a = np.log(one_minus_e) - math.log(n_states)
    log_b = np.log1p((n_states - 1) * e) - math.log(n_states)
    return a, b, log_a, log_b


def categorical_from_uniform(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling along the last axis of ``probs`` with uniforms ``u``."""
    cdf = np.cumsum(probs, axis=-1)
    cdf /= cdf[..., -1:]
    idx = np.sum(cdf < u[..., None], axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


class UniformKernel:
    """Closed-form kernels of the uniform reference rate on a given space."""

    def __init__(self, schedule: NoiseSchedule, spec: SpaceSpec):
        self.schedule = schedule
        self.spec = spec

    @property
    def N(self) -> int:
        return self.spec.n_states

    @property
    def D(self) -> int:
        return self.spec.dim

    # ------------------------------------------------------------------ scalars
    def gamma(self, t):
        return self.schedule.gamma_at(t)

    def gamma_bar(self, s, t):
        return self.schedule.gamma_bar(s, t)

    def coefficients(self, s: float, t: float) -> KernelCoefficients:
        if s > t:
            raise ValueError("coefficients require s <= t")
        gbar = self.gamma_bar(s, t)
        a, b, _, _ = _coefs(gbar, self.N)
        return KernelCoefficients(a=float(a), b=float(b), gamma_bar=float(gbar))

    def ab(self, s, t):
        """Vectorised (A, B) arrays for broadcastable s, t."""
        a, b, _, _ = _coefs(self.gamma_bar(s, t), self.N)
        return a, b

    def log_ab(self, s, t):
        _, _, log_a, log_b = _coefs(self.gamma_bar(s, t), self.N)
        return log_a, log_b

    # ------------------------------------------------------------- state level
    def log_transition_prob(self, x, y, s, t):
        x = self.spec.validate(x)
        y = self.spec.validate(y)
        h = np.count_nonzero(x != y, axis=-1)
        log_a, log_b = self.log_ab(s, t)
        with np.errstate(invalid="ignore"):
            # 0 * log(0) must be 0, not nan
            out = np.where(h > 0, h * log_a, 0.0) + (self.D - h) * log_b
        return out if np.ndim(out) else float(out)

    def transition_prob(self, x, y, s, t):
        return np.exp(self.log_transition_prob(x, y, s, t))

    def terminal_noise_pmf(self, eps, t):
        """q_t(eps) such that p_{1|t}(y | x) = q_t(y - x)."""
        eps = self.spec.validate(eps)
        return self.transition_prob(np.zeros_like(eps), eps, t, 1.0)

    def rate(self, x, y, t):
        x = self.spec.validate(x)
        y = self.spec.validate(y)
        g = self.gamma(t)
        h = np.count_nonzero(x != y, axis=-1)
        off = np.where(h == 1, g / self.N, 0.0)
        out = np.where(h == 0, -g * self.D * (1.0 - 1.0 / self.N), off)
        return out if np.ndim(out) else float(out)

    # ----------------------------------------------------------------- bridges
    def bridge_site_probs(self, x0, x1, t):
        """Per-site bridge distribution, shape (..., D, N).

        ``t`` broadcasts against the batch shape of ``x0``.  Endpoints pin to
        ``x0`` / ``x1`` exactly.
        """
        x0 = np.asarray(x0)
        x1 = np.asarray(x1)
        t = np.asarray(t, dtype=float)
        t_b = t[..., None]  # broadcast over sites
        a0t, b0t = self.ab(0.0 * t_b, t_b)
        at1, bt1 = self.ab(t_b, 0.0 * t_b + 1.0)
        a01, b01 = self.ab(0.0, 1.0)
        same = x0 == x1
        if a01 == 0.0 and np.any(~same):
            raise DegenerateBridgeError("zero accumulated noise with x0 != x1")
        n = np.arange(self.N)
        is0 = x0[..., None] == n
        is1 = x1[..., None] == n
        a0t, b0t, at1, bt1 = (np.asarray(v)[..., None] for v in (a0t, b0t, at1, bt1))
        with np.errstate(divide="ignore", invalid="ignore"):
            diff = np.where(
                is0, b0t * at1, np.where(is1, a0t * bt1, a0t * at1)
            ) / a01
            eq = np.where(is0, b0t * bt1, a0t * at1) / b01
        probs = np.where(same[..., None], eq, diff)
        probs = np.broadcast_to(probs, np.broadcast_shapes(probs.shape, x0.shape + (self.N,)))
        probs = np.array(probs)
        # exact endpoints
        at_zero = np.broadcast_to(t_b == 0.0, probs.shape[:-1])
        at_one = np.broadcast_to(t_b == 1.0, probs.shape[:-1])
        if np.any(at_zero):
            probs[at_zero] = np.broadcast_to(is0, probs.shape)[at_zero]
        if np.any(at_one):
            probs[at_one] = np.broadcast_to(is1, probs.shape)[at_one]
        return probs

    def bridge_prob(self, x, x0, x1, t):
        probs = self.bridge_site_probs(x0, x1, t)
        x = np.asarray(x)
        p = np.take_along_axis(probs, x[..., None], axis=-1)[..., 0]
        return np.prod(p, axis=-1)

    def bridge_sample(self, x0, x1, t, rng: np.random.Generator) -> np.ndarray:
        probs = self.bridge_site_probs(x0, x1, t)
        u = rng.random(probs.shape[:-1])
        return categorical_from_uniform(probs, u).astype(np.int64)

    # ------------------------------------------------- dense enumerated tables
    def log_transition_matrix(self, s, t, cap: int = 4096) -> np.ndarray:
        h = hamming_matrix(self.spec, cap)
        log_a, log_b = self.log_ab(s, t)
        with np.errstate(invalid="ignore"):
            return np.where(h > 0, h * log_a, 0.0) + (self.D - h) * log_b

    def transition_matrix(self, s, t, cap: int = 4096) -> np.ndarray:
        return np.exp(self.log_transition_matrix(s, t, cap))

    def rate_matrix(self, t, cap: int = 4096) -> np.ndarray:
        """Generator ``G[x, y] = r_t(y, x)``; rows sum to zero."""
        states = enumerate_states(self.spec, cap)
        return self.rate(states[:, None, :], states[None, :, :], t)
