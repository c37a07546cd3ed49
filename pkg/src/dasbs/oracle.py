"""Exact Schrödinger-bridge ground truth on enumerated spaces.

All tables are indexed by the lexicographic enumeration of Z_N^D.  Potentials
are kept in log space; ``log_phi1`` is gauge-fixed to sum to zero and
``log_phi_hat0`` absorbs the constant.
"""
from __future__ import annotations

from dataclasses import dataclass
import json
import math
from typing import Callable

import numpy as np
from scipy.linalg import expm
from scipy.special import logsumexp

from .schedule import UniformKernel
from .state_space import enumerate_states, neighbor_indices

ORACLE_FORMAT_VERSION = 1
DENSE_CAP = 4096


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


def _log(p):
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(p, dtype=float))


@dataclass
class SBSolution:
    log_phi_hat0: np.ndarray
    log_phi1: np.ndarray
    log_coupling: np.ndarray  # (S, S) over (x0, x1)
    residual: float
    sweeps: int

    @property
    def coupling(self) -> np.ndarray:
        return np.exp(self.log_coupling)


def ipf_solve(mu, nu, kernel: UniformKernel, tol: float = 1e-10,
              max_sweeps: int = 10_000) -> SBSolution:
    """Static bridge coupling by alternating row/column scaling of mu(x) p^r_{1|0}(y|x)."""
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    log_k = kernel.log_transition_matrix(0.0, 1.0, DENSE_CAP)
    log_mu, log_nu = _log(mu), _log(nu)
    log_phi1 = np.zeros_like(log_nu)
    residual = math.inf
    for sweep in range(1, max_sweeps + 1):
        log_row = -logsumexp(log_k + log_phi1[None, :], axis=1)
        log_phi1 = log_nu - logsumexp(log_mu[:, None] + log_row[:, None] + log_k, axis=0)
        log_pi = log_mu[:, None] + log_row[:, None] + log_k + log_phi1[None, :]
        row = np.exp(logsumexp(log_pi, axis=1))
        residual = 0.5 * np.abs(row - mu).sum()
        if residual < tol:
            break
    else:
        raise ConvergenceError(f"IPF did not converge in {max_sweeps} sweeps", residual)
    shift = log_phi1.mean()
    log_phi1 = log_phi1 - shift
    log_row = log_row + shift
    return SBSolution(log_mu + log_row, log_phi1, log_pi, float(residual), sweep)


class SBOracle:
    """Potentials, optimal multipliers and path-measure quantities of one bridge."""

    def __init__(self, kernel: UniformKernel, mu, nu, tol: float = 1e-10,
                 max_sweeps: int = 10_000, solution: SBSolution | None = None):
        self.kernel = kernel
        self.spec = kernel.spec
        self.mu = np.asarray(mu, dtype=float)
        self.nu = np.asarray(nu, dtype=float)
        self.states = enumerate_states(self.spec, DENSE_CAP)
        self.nb = neighbor_indices(self.spec, DENSE_CAP)
        self.solution = solution or ipf_solve(self.mu, self.nu, kernel, tol, max_sweeps)

    @property
    def S(self) -> int:
        return self.states.shape[0]

    # ------------------------------------------------------------ potentials
    def log_phi(self, t: float) -> np.ndarray:
        if t == 1.0:
            return self.solution.log_phi1.copy()
        log_p = self.kernel.log_transition_matrix(t, 1.0, DENSE_CAP)
        return logsumexp(log_p + self.solution.log_phi1[None, :], axis=1)

    def log_phi_hat(self, t: float) -> np.ndarray:
        if t == 0.0:
            return self.solution.log_phi_hat0.copy()
        log_p = self.kernel.log_transition_matrix(0.0, t, DENSE_CAP)
        return logsumexp(log_p + self.solution.log_phi_hat0[:, None], axis=0)

    def potentials_at(self, t: float):
        return np.exp(self.log_phi(t)), np.exp(self.log_phi_hat(t))

    def marginal(self, t: float) -> np.ndarray:
        return np.exp(self.log_phi(t) + self.log_phi_hat(t))

    # ----------------------------------------------------------- multipliers
    def _ratio_table(self, log_pot) -> np.ndarray:
        return np.exp(log_pot[self.nb] - log_pot[:, None, None])

    def controller(self, t: float) -> np.ndarray:
        """Optimal controller table (S, D, N): phi_t(x^{d<-n}) / phi_t(x)."""
        return self._ratio_table(self.log_phi(t))

    def corrector(self) -> np.ndarray:
        """Optimal corrector table (S, D, N): phi_hat_1(x^{d<-n}) / phi_hat_1(x)."""
        return self._ratio_table(self.log_phi_hat(1.0))

    def optimal_rate(self, t: float) -> np.ndarray:
        """Dense generator ``G[x, y] = u*_t(y, x)``."""
        return controlled_generator(self.kernel, self.controller(t), self.nb, self.kernel.gamma(t))

    # ---------------------------------------------------------- path measure
    def log_static_kl(self) -> float:
        """KL(p*_{0,1} || p^r_{0,1})."""
        log_ref = _log(self.mu)[:, None] + self.kernel.log_transition_matrix(0.0, 1.0, DENSE_CAP)
        lp = self.solution.log_coupling
        p = np.exp(lp)
        mask = p > 0
        return float(np.sum(p[mask] * (lp[mask] - log_ref[mask])))

    def joint(self, s: float, t: float) -> np.ndarray:
        """p*_{s,t}(x, y) from the potentials."""
        log_p = self.kernel.log_transition_matrix(s, t, DENSE_CAP)
        return np.exp(self.log_phi_hat(s)[:, None] + log_p + self.log_phi(t)[None, :])

    def tables(self, t_grid) -> dict:
        return {
            "log_phi": np.stack([self.log_phi(float(t)) for t in t_grid]),
            "log_phi_hat": np.stack([self.log_phi_hat(float(t)) for t in t_grid]),
        }

    # ------------------------------------------------------------ persistence
    def dump(self, path, t_grid=(0.0, 0.5, 1.0), meta: dict | None = None) -> None:
        tabs = self.tables(t_grid)
        header = {
            "version": ORACLE_FORMAT_VERSION,
            "N": self.spec.n_states,
            "D": self.spec.dim,
            "schedule": self.kernel.schedule.to_config(),
            "residual": self.solution.residual,
            "sweeps": self.solution.sweeps,
            **(meta or {}),
        }
        np.savez(
            path,
            header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
            t_grid=np.asarray(t_grid, dtype=float),
            mu=self.mu,
            nu=self.nu,
            log_coupling=self.solution.log_coupling,
            log_phi1=self.solution.log_phi1,
            log_phi_hat0=self.solution.log_phi_hat0,
            **tabs,
        )

    @classmethod
    def load(cls, path) -> "SBOracle":
        from .schedule import NoiseSchedule
        from .state_space import SpaceSpec

        with np.load(path) as z:
            header = json.loads(bytes(z["header"]).decode())
            if header.get("version") != ORACLE_FORMAT_VERSION:
                raise ValueError(f"unsupported oracle dump version {header.get('version')}")
            kernel = UniformKernel(NoiseSchedule(**header["schedule"]),
                                   SpaceSpec(header["N"], header["D"]))
            sol = SBSolution(z["log_phi_hat0"], z["log_phi1"], z["log_coupling"],
                             header["residual"], header["sweeps"])
            return cls(kernel, z["mu"], z["nu"], solution=sol)


# ------------------------------------------------------------ free functions
def reference_terminal(kernel: UniformKernel, mu) -> np.ndarray:
    """p^r_1 = mu pushed through the reference kernel."""
    return np.asarray(mu, dtype=float) @ kernel.transition_matrix(0.0, 1.0, DENSE_CAP)


def soc_terminal_to_target(g, mu, kernel: UniformKernel) -> np.ndarray:
    """Terminal distribution whose bridge problem matches the control problem with cost g."""
    g = np.asarray(g, dtype=float)
    mu = np.asarray(mu, dtype=float)
    log_p = kernel.log_transition_matrix(0.0, 1.0, DENSE_CAP)  # [y, x] = log p(x | y)
    log_z = logsumexp(log_p - g[None, :], axis=1)
    log_nu = -g + logsumexp(log_p + (_log(mu) - log_z)[:, None], axis=0)
    return np.exp(log_nu - logsumexp(log_nu))


def controlled_generator(kernel: UniformKernel, phi_table, nb, rate_scale) -> np.ndarray:
    """Dense generator ``G[x, y]`` of the rate ``rate_scale / N * phi[x, d, n]``.

    ``rate_scale`` is gamma_t for an instantaneous rate or an accumulated
    noise for an integrated (interval) generator.
    """
    S, D, N = phi_table.shape
    G = np.zeros((S, S))
    rows = np.repeat(np.arange(S), D * N)
    cols = nb.reshape(-1)
    vals = (rate_scale / N * phi_table).reshape(-1)
    off = cols != rows
    np.add.at(G, (rows[off], cols[off]), vals[off])
    G[np.arange(S), np.arange(S)] = -G.sum(axis=1)
    return G


PhiTable = Callable[[float], np.ndarray]


def _interval_generators(kernel, phi_fn: PhiTable, nb, times):
    for t0, t1 in zip(times[:-1], times[1:]):
        tm = 0.5 * (t0 + t1)
        gbar = float(kernel.gamma_bar(t0, t1))
        yield t0, t1, tm, gbar, controlled_generator(kernel, phi_fn(tm), nb, gbar)


def propagate(kernel: UniformKernel, phi_fn: PhiTable, p0, times, nb=None) -> np.ndarray:
    """Marginals (len(times), S) of the controlled chain, midpoint exponential integrator."""
    nb = neighbor_indices(kernel.spec, DENSE_CAP) if nb is None else nb
    p = np.asarray(p0, dtype=float)
    out = [p]
    for _, _, _, gbar, G in _interval_generators(kernel, phi_fn, nb, np.asarray(times)):
        if math.isinf(gbar):
            raise ValueError("propagate needs finite accumulated noise per interval")
        p = p @ expm(G)
        out.append(p)
    return np.stack(out)


def _magnus4_steps(kernel, phi_fn: PhiTable, nb, times):
    """Fourth-order Magnus exponents on each interval (two Gauss points).

    For the row-vector equation p' = p G(t) the commutator term is
    ``sqrt(3) / 12 * h^2 [G1, G2]``.
    """
    c = math.sqrt(3) / 6
    for t0, t1 in zip(times[:-1], times[1:]):
        h = t1 - t0
        tm = 0.5 * (t0 + t1)
        g1, g2 = tm - c * h, tm + c * h
        A1 = controlled_generator(kernel, phi_fn(g1), nb, float(kernel.gamma(g1)))
        A2 = controlled_generator(kernel, phi_fn(g2), nb, float(kernel.gamma(g2)))
        yield 0.5 * h * (A1 + A2) + (math.sqrt(3) / 12) * h * h * (A1 @ A2 - A2 @ A1)


def transition_operator(kernel: UniformKernel, phi_fn: PhiTable, times, nb=None,
                        order: int = 2) -> np.ndarray:
    """Controlled P_{1|0} as a dense (S, S) row-stochastic matrix.

    ``order=2``: midpoint exponential integrator weighted by the exact
    accumulated noise.  ``order=4``: Magnus integrator at Gauss points (needs
    finite gamma on the open intervals).
    """
    nb = neighbor_indices(kernel.spec, DENSE_CAP) if nb is None else nb
    S = nb.shape[0]
    P = np.eye(S)
    times = np.asarray(times)
    if order == 4:
        for omega in _magnus4_steps(kernel, phi_fn, nb, times):
            P = P @ expm(omega)
        return P
    if order != 2:
        raise ValueError("order must be 2 or 4")
    for _, _, _, gbar, G in _interval_generators(kernel, phi_fn, nb, times):
        P = P @ expm(G)
    return P


def path_kl(kernel: UniformKernel, phi_a: PhiTable, phi_b: PhiTable, mu, times,
            nb=None) -> float:
    """KL(p^a || p^b) between two controlled chains sharing the initial law ``mu``.

    Midpoint quadrature in time; each interval is weighted by its exact
    accumulated noise, so schedules with unbounded gamma_t near 0 are fine as
    long as every interval has finite noise.
    """
    nb = neighbor_indices(kernel.spec, DENSE_CAP) if nb is None else nb
    N = kernel.N
    p = np.asarray(mu, dtype=float)
    states = enumerate_states(kernel.spec, DENSE_CAP)
    off = states[..., None] != np.arange(N)
    total = 0.0
    for _, _, tm, gbar, G in _interval_generators(kernel, phi_a, nb, np.asarray(times)):
        if math.isinf(gbar):
            raise ValueError("path_kl needs finite accumulated noise per interval")
        p_mid = p @ expm(0.5 * G)
        a, b = phi_a(tm), phi_b(tm)
        integrand = np.where(off, a * (np.log(a) - np.log(b)) + b - a, 0.0).sum(axis=(1, 2))
        total += gbar / N * float(p_mid @ integrand)
        p = p @ expm(G)
    return total


def bridge_joint(coupling, kernel: UniformKernel, s: float, t: float) -> np.ndarray:
    """p_{s,t}(x, y) of the reciprocal measure ``coupling`` x reference bridge.

    Independent of the potentials: only the static coupling and reference
    kernels enter.  For s = t the diagonal carries the marginal.
    """
    P10 = kernel.transition_matrix(0.0, 1.0, DENSE_CAP)
    W = np.divide(coupling, P10, out=np.zeros_like(coupling), where=P10 > 0)
    Ps0 = kernel.transition_matrix(0.0, s, DENSE_CAP)
    Pts = kernel.transition_matrix(s, t, DENSE_CAP)
    P1t = kernel.transition_matrix(t, 1.0, DENSE_CAP)
    return Pts * (Ps0.T @ W @ P1t.T)


def bridge_marginal(coupling, kernel: UniformKernel, t: float) -> np.ndarray:
    P10 = kernel.transition_matrix(0.0, 1.0, DENSE_CAP)
    W = np.divide(coupling, P10, out=np.zeros_like(coupling), where=P10 > 0)
    Pt0 = kernel.transition_matrix(0.0, t, DENSE_CAP)
    P1t = kernel.transition_matrix(t, 1.0, DENSE_CAP)
    return np.einsum("ax,ab,xb->x", Pt0, W, P1t)


# ---------------------------------------------------------- certification
def _shifted(table, anchor_states, query_states):
    """``G[a, q, d, n] = table[a, d, (anchor[a, d] + n - query[q, d]) mod N]``."""
    S, D, N = table.shape
    shift = (anchor_states[:, None, :, None] + np.arange(N)
             - query_states[None, :, :, None]) % N
    return table[np.arange(S)[:, None, None, None], np.arange(D)[None, None, :, None], shift]


def _rel(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


def certify(orc: SBOracle, times=(0.0, 0.3, 0.7)) -> dict[str, float]:
    """Residuals of the bridge identities under exhaustive summation.

    Conditionals of the optimal path measure are built from the static
    coupling and reference bridges (``bridge_joint``), independently of the
    potentials they are compared against.  Every value is a max relative
    (or absolute, for probability tables) error.
    """
    k = orc.kernel
    X, nb = orc.states, orc.nb
    pi = orc.solution.coupling
    out: dict[str, float] = {}
    out["ipf_marginal_mu"] = float(np.abs(pi.sum(1) - orc.mu).max())
    out["ipf_marginal_nu"] = float(np.abs(pi.sum(0) - orc.nu).max())
    log_row = orc.solution.log_coupling - _log(orc.mu)[:, None] - k.log_transition_matrix(0, 1, DENSE_CAP)
    out["coupling_factorizes"] = float(np.abs(
        log_row - log_row[:, :1] - log_row[:1, :] + log_row[0, 0]).max())
    log_mu = _log(orc.mu)
    corr = orc.corrector()
    nu_ratio = np.exp(_log(orc.nu)[nb] - _log(orc.nu)[:, None, None])
    mu_ratio = np.exp(log_mu[nb] - log_mu[:, None, None])
    P10 = k.transition_matrix(0.0, 1.0, DENSE_CAP)
    W = np.divide(pi, P10, out=np.zeros_like(pi), where=P10 > 0)
    worst = {key: 0.0 for key in ("forward_equation", "bridge_marginal", "bridge_normalisation",
                                  "bridge_conditional", "am_identity", "ctrl_am",
                                  "corr_dm", "ctrl_dm")}
    for t in times:
        t = float(t)
        phi, phi_hat = orc.potentials_at(t)
        p_t = bridge_marginal(pi, k, t)
        worst["bridge_marginal"] = max(worst["bridge_marginal"], float(np.abs(phi * phi_hat - p_t).max()))
        worst["bridge_normalisation"] = max(worst["bridge_normalisation"], abs(float(phi @ phi_hat) - 1))
        # forward equation: d/dt (phi phi_hat) = p_t G*_t with G* from the Doob transform
        G = k.rate_matrix(t, DENSE_CAP)
        lhs = phi_hat * (-(G @ phi)) + phi * (G.T @ phi_hat)
        rhs = p_t @ orc.optimal_rate(t)
        worst["forward_equation"] = max(worst["forward_equation"],
                                            float(np.abs(lhs - rhs).max()))
        # conditional transition ratio p*_{u|t} / p^r_{u|t} = phi_u(y) / phi_t(x)
        u = 0.5 * (t + 1.0)
        joint = bridge_joint(pi, k, t, u)
        cond = joint / p_t[:, None]
        ratio = cond / k.transition_matrix(t, u, DENSE_CAP)
        phi_u = np.exp(orc.log_phi(u))
        worst["bridge_conditional"] = max(worst["bridge_conditional"],
                                        _rel(ratio, phi_u[None, :] / phi[:, None]))
        # x_t -> x_1 conditionals
        J = (k.transition_matrix(0.0, t, DENSE_CAP).T @ W) * k.transition_matrix(t, 1.0, DENSE_CAP)
        c1 = J / J.sum(1, keepdims=True)  # p*(x1 | x_t = x)
        ctrl = orc.controller(t)
        phi1 = np.exp(orc.solution.log_phi1)
        ratio1 = phi1[nb] / phi1[:, None, None]
        am = np.einsum("xy,yxdn->xdn", c1, _shifted(ratio1, X, X))
        worst["am_identity"] = max(worst["am_identity"], _rel(am, ctrl))
        psi = nu_ratio / corr
        am_ctrl = np.einsum("xy,yxdn->xdn", c1, _shifted(psi, X, X))
        worst["ctrl_am"] = max(worst["ctrl_am"], _rel(am_ctrl, ctrl))
        P1t = k.transition_matrix(t, 1.0, DENSE_CAP)
        dm_ctrl = np.einsum("xy,xdny->xdn", c1, P1t[nb] / P1t[:, None, None, :])
        worst["ctrl_dm"] = max(worst["ctrl_dm"], _rel(dm_ctrl, ctrl))
        # x_1 -> x_t conditionals for the corrector
        c_t = J / J.sum(0, keepdims=True)  # p*(x_t = x | x1)
        dm = np.einsum("xy,xydn->ydn", c_t, P1t[:, nb] / P1t[:, :, None, None])
        worst["corr_dm"] = max(worst["corr_dm"], _rel(dm, corr))
    out.update(worst)
    # corrector adjoint matching from x0: eq (16) with the mu-ratio form of eq (17)
    c0 = pi / pi.sum(0, keepdims=True)  # p*(x0 | x1)
    phi0_ratio = orc.controller(0.0)
    out["initial_ratio"] = _rel(
        np.exp(orc.log_phi_hat(0.0))[nb] / np.exp(orc.log_phi_hat(0.0))[:, None, None],
        mu_ratio / phi0_ratio)
    if np.all(orc.mu > 0):
        h = _shifted(mu_ratio / phi0_ratio, X, X)  # [x0, x1, d, n]
        out["corr_am"] = _rel(np.einsum("ab,abdn->bdn", c0, h), corr)
    out["boundary_mu"] = float(np.abs(np.exp(orc.log_phi(0.0) + orc.log_phi_hat(0.0)) - orc.mu).max())
    out["boundary_nu"] = float(np.abs(np.exp(orc.log_phi(1.0) + orc.log_phi_hat(1.0)) - orc.nu).max())
    return out


def one_shot_corrector(kernel: UniformKernel, mu, loss: str = "AM") -> np.ndarray:
    """Exact corrector update from the all-one controller (S, D, N)."""
    X = enumerate_states(kernel.spec, DENSE_CAP)
    nb = neighbor_indices(kernel.spec, DENSE_CAP)
    mu = np.asarray(mu, dtype=float)
    P10 = kernel.transition_matrix(0.0, 1.0, DENSE_CAP)
    pi = mu[:, None] * P10
    nu_u = pi.sum(0)
    if loss == "AM":
        log_mu = _log(mu)
        h = _shifted(np.exp(log_mu[nb] - log_mu[:, None, None]), X, X)
        num = np.einsum("ab,abdn->bdn", pi, h)
    else:
        num = np.einsum("a,abdn->bdn", mu, P10[:, nb])
    return num / nu_u[:, None, None]
