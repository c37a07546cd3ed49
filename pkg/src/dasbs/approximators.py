"""Trainable positive multiplier matrices and their Bregman regression.

Both parameterisations output ``log Phi`` of shape (B, D, N) with the self
column ``(d, x[d])`` pinned to zero, so ``Phi = exp(out)`` is positive and
equals one on the current symbol.
"""
from __future__ import annotations

from dataclasses import dataclass
import copy
import json
import math

import numpy as np

from .state_space import SpaceSpec, enumerate_states, state_to_index

TARGET_CLIP = (1e-30, 1e30)
CHECKPOINT_VERSION = 1


class NumericError(FloatingPointError):
    pass


# ------------------------------------------------------------------ Bregman
@dataclass(frozen=True)
class BregmanDivergence:
    """``generalized-kl``: a log(a/b) - a + b.  ``squared-error``: (a - b)^2."""

    kind: str = "generalized-kl"

    def __post_init__(self):
        if self.kind not in ("generalized-kl", "squared-error"):
            raise ValueError(f"unknown divergence {self.kind!r}")

    def value(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if self.kind == "generalized-kl":
            with np.errstate(divide="ignore", invalid="ignore"):
                return np.where(a > 0, a * (np.log(a) - np.log(b)), 0.0) - a + b
        return (a - b) ** 2

    def grad_log_pred(self, a, b):
        """d/d(log b) of D(a || b)."""
        if self.kind == "generalized-kl":
            return b - a
        return 2.0 * (b - a) * b


def off_self_mask(x, n_states: int) -> np.ndarray:
    return np.asarray(x)[..., None] != np.arange(n_states)


def prepare_targets(x, targets, weights, n_states):
    """Clip targets and zero the weight of rows with non-finite entries.

    Returns (targets, weights, mask, rejected_rows).
    """
    mask = off_self_mask(x, n_states)
    targets = np.asarray(targets, dtype=float)
    B = targets.shape[0]
    weights = np.ones(B) if weights is None else np.asarray(weights, dtype=float).copy()
    bad = ~np.all(np.isfinite(targets) | ~mask, axis=(1, 2))
    weights[bad] = 0.0
    targets = np.where(mask & np.isfinite(targets), np.clip(targets, *TARGET_CLIP), 1.0)
    return targets, weights, mask, int(bad.sum())


# -------------------------------------------------------------- optimisers
class AdamW:
    """Adam with decoupled weight decay on a dict of parameter arrays."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.step_count
        c2 = 1 - b2**self.step_count
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] *= b1
            self.m[k] += (1 - b1) * g
            self.v[k] *= b2
            self.v[k] += (1 - b2) * g * g
            p = params[k]
            if self.weight_decay:
                p *= 1 - self.lr * self.weight_decay
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state_dict(self):
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.step_count}

    def load_state(self, meta, m, v):
        self.lr, self.eps = meta["lr"], meta["eps"]
        self.betas = tuple(meta["betas"])
        self.weight_decay = meta["weight_decay"]
        self.step_count = meta["step"]
        self.m, self.v = m, v


class SGD:
    def __init__(self, lr=0.1):
        self.lr = lr
        self.step_count = 0

    def step(self, params, grads):
        self.step_count += 1
        for k, g in grads.items():
            params[k] -= self.lr * g


# --------------------------------------------------------------- base class
class Multiplier:
    """Common evaluation, regression and EMA machinery."""

    spec: SpaceSpec
    time_conditioned: bool
    params: dict

    def __init__(self, ema_decay: float = 0.9999):
        if not 0.0 <= ema_decay <= 1.0:
            raise ValueError("EMA decay must lie in [0, 1]")
        self.ema_decay = ema_decay
        self.shadow: dict | None = None
        self._swapped = False

    # subclasses provide _forward(t, x) -> (out, cache) and _backward(cache, g) -> grads
    def log_evaluate(self, t, x) -> np.ndarray:
        x = np.asarray(x)
        single = x.ndim == 1
        xb = x[None] if single else x
        out, _ = self._forward(self._times(t, xb.shape[0]), xb)
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite multiplier output")
        return out[0] if single else out

    def evaluate(self, t, x) -> np.ndarray:
        return np.exp(self.log_evaluate(t, x))

    __call__ = evaluate

    def _times(self, t, B):
        if not self.time_conditioned:
            return None
        if t is None:
            raise ValueError("controller evaluation needs a time")
        return np.broadcast_to(np.asarray(t, dtype=float), (B,))

    def loss_and_grad(self, t, x, targets, weights=None,
                      divergence: BregmanDivergence = BregmanDivergence()):
        x = np.asarray(x)
        targets, weights, mask, rejected = prepare_targets(x, targets, weights, self.spec.n_states)
        wsum = weights.sum()
        if wsum <= 0:
            return 0.0, {k: np.zeros_like(v) for k, v in self.params.items()}, rejected
        out, cache = self._forward(self._times(t, x.shape[0]), x)
        pred = np.exp(out)
        scale = weights[:, None, None] / (wsum * self.spec.dim * (self.spec.n_states - 1))
        div = np.where(mask, divergence.value(targets, pred), 0.0)
        loss = float(np.sum(scale * div))
        g_out = np.where(mask, divergence.grad_log_pred(targets, pred), 0.0) * scale
        return loss, self._backward(cache, g_out), rejected

    def regression_step(self, optimizer, t, x, targets, weights=None,
                        divergence: BregmanDivergence = BregmanDivergence()):
        """One first-order update on the weighted mean Bregman loss.

        Returns (loss, rejected_rows).
        """
        loss, grads, rejected = self.loss_and_grad(t, x, targets, weights, divergence)
        optimizer.step(self.params, grads)
        self._after_update()
        if not all(np.all(np.isfinite(p)) for p in self.params.values()):
            raise NumericError("non-finite parameters after update")
        return loss, rejected

    def _after_update(self):
        pass

    # ------------------------------------------------------------------ EMA
    def ema_update(self) -> None:
        if self.shadow is None:
            self.shadow = {k: v.copy() for k, v in self.params.items()}
            return
        d = self.ema_decay
        for k, v in self.params.items():
            self.shadow[k] *= d
            self.shadow[k] += (1 - d) * v

    def ema_swap(self) -> None:
        """Exchange live parameters and the EMA shadow (call again to undo)."""
        if self.shadow is None:
            self.shadow = {k: v.copy() for k, v in self.params.items()}
        self.params, self.shadow = self.shadow, self.params
        self._swapped = not self._swapped

    def snapshot(self, use_ema: bool = False) -> "Multiplier":
        """Frozen copy for rollouts; never aliases the live parameters."""
        snap = copy.copy(self)
        source = self.shadow if (use_ema and self.shadow is not None) else self.params
        snap.params = {k: v.copy() for k, v in source.items()}
        snap.shadow = None
        return snap

    # ---------------------------------------------------------- persistence
    def architecture(self) -> dict:
        raise NotImplementedError

    def save(self, path, optimizer: AdamW | None = None, rng=None, config=None) -> None:
        header = {
            "version": CHECKPOINT_VERSION,
            "architecture": self.architecture(),
            "ema_decay": self.ema_decay,
            "optimizer": optimizer.state_dict() if isinstance(optimizer, AdamW) else None,
            "rng": rng.bit_generator.state if rng is not None else None,
            "config": config or {},
        }
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        if self.shadow is not None:
            arrays.update({f"ema/{k}": v for k, v in self.shadow.items()})
        if isinstance(optimizer, AdamW):
            arrays.update({f"adam_m/{k}": v for k, v in optimizer.m.items()})
            arrays.update({f"adam_v/{k}": v for k, v in optimizer.v.items()})
        blob = np.frombuffer(json.dumps(header, default=_json_default).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, header=blob, **arrays)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def load_checkpoint(path):
    """Returns (model, optimizer or None, rng or None, config)."""
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        arch = header["architecture"]
        group = lambda prefix: {k.split("/", 1)[1]: z[k].copy() for k in z.files
                                if k.startswith(prefix + "/")}
        params, shadow = group("param"), group("ema")
        m, v = group("adam_m"), group("adam_v")
    model = build_multiplier(arch, ema_decay=header["ema_decay"])
    model.params = params
    model.shadow = shadow or None
    opt = None
    if header.get("optimizer"):
        opt = AdamW()
        opt.load_state(header["optimizer"], m, v)
    rng = None
    if header.get("rng"):
        bg = getattr(np.random, header["rng"]["bit_generator"])()
        bg.state = header["rng"]
        rng = np.random.Generator(bg)
    return model, opt, rng, header.get("config", {})


def build_multiplier(arch: dict, ema_decay: float = 0.9999, seed: int = 0) -> Multiplier:
    spec = SpaceSpec(arch["N"], arch["D"], arch.get("L"))
    if arch["type"] == "tabular":
        return TabularMultiplier(spec, arch.get("time_nodes"), ema_decay=ema_decay)
    return DenseMultiplier(spec, hidden=tuple(arch["hidden"]),
                           time_conditioned=arch["time_conditioned"],
                           n_fourier=arch.get("n_fourier", 16), ema_decay=ema_decay, seed=seed)


# ------------------------------------------------------------------ tabular
class TabularMultiplier(Multiplier):
    """One free log-value per (time node, state, site, symbol).

    ``time_nodes=None`` gives a time-independent table (the corrector).  A
    controller evaluated at time t uses the last node at or before t.
    """

    def __init__(self, spec: SpaceSpec, time_nodes=None, ema_decay: float = 0.9999):
        super().__init__(ema_decay)
        self.spec = spec
        self.time_conditioned = time_nodes is not None
        self.time_nodes = None if time_nodes is None else np.asarray(time_nodes, dtype=float)
        T = 1 if time_nodes is None else self.time_nodes.size
        self.params = {"theta": np.zeros((T, spec.size, spec.dim, spec.n_states))}
        self._self_cells = ~off_self_mask(enumerate_states(spec), spec.n_states)

    def architecture(self):
        return {"type": "tabular", "N": self.spec.n_states, "D": self.spec.dim,
                "L": self.spec.side,
                "time_nodes": None if self.time_nodes is None else self.time_nodes.tolist()}

    def bucket(self, t) -> np.ndarray:
        if self.time_nodes is None:
            return np.zeros(np.shape(t) if t is not None else (), dtype=np.int64)
        idx = np.searchsorted(self.time_nodes, np.asarray(t) + 1e-12, side="right") - 1
        return np.clip(idx, 0, self.time_nodes.size - 1)

    def _cells(self, t, x):
        B = x.shape[0]
        tb = self.bucket(t) if t is not None else np.zeros(B, dtype=np.int64)
        return np.broadcast_to(tb, (B,)), state_to_index(self.spec, x)

    def _forward(self, t, x):
        tb, si = self._cells(t, x)
        out = self.params["theta"][tb, si]
        out = np.where(off_self_mask(x, self.spec.n_states), out, 0.0)
        return out, (tb, si)

    def _backward(self, cache, g_out):
        tb, si = cache
        g = np.zeros_like(self.params["theta"])
        np.add.at(g, (tb, si), g_out)
        return {"theta": g}

    def _after_update(self):
        self._pin()

    def _pin(self):
        self.params["theta"][:, self._self_cells] = 0.0

    def table(self, t=None) -> np.ndarray:
        """Full multiplier table (S, D, N) at time t."""
        b = int(self.bucket(t)) if self.time_conditioned else 0
        return np.exp(self.params["theta"][b])

    def set_table(self, values, t_index: int = 0) -> None:
        with np.errstate(divide="ignore"):
            self.params["theta"][t_index] = np.log(np.asarray(values, dtype=float))
        self._pin()

    def fit_exact(self, t, x, targets, weights=None) -> int:
        """Replace each visited cell by its weighted mean target.

        This is the exact minimiser of the empirical Bregman loss for a
        tabular model.  Returns the number of rejected rows.
        """
        x = np.asarray(x)
        targets, weights, mask, rejected = prepare_targets(x, targets, weights, self.spec.n_states)
        tb, si = self._cells(self._times(t, x.shape[0]), x)
        num = np.zeros_like(self.params["theta"])
        den = np.zeros(self.params["theta"].shape[:2])
        np.add.at(num, (tb, si), weights[:, None, None] * targets)
        np.add.at(den, (tb, si), weights)
        seen = den > 0
        self.params["theta"][seen] = np.log(num[seen] / den[seen][:, None, None])
        self._pin()
        return rejected


# -------------------------------------------------------------------- dense
def _silu(z):
    s = 0.5 * (1.0 + np.tanh(0.5 * z))  # stable logistic
    return z * s, s


def fourier_features(t, n_features: int = 16) -> np.ndarray:
    k = np.arange(1, n_features // 2 + 1)
    arg = math.pi * np.asarray(t, dtype=float)[:, None] * k[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class DenseMultiplier(Multiplier):
    """MLP on one-hot sites (+ Fourier features of t) with an exponential head.

    The output layer starts at zero so a fresh model is the all-one multiplier.
    """

    def __init__(self, spec: SpaceSpec, hidden=(256, 256), time_conditioned: bool = True,
                 n_fourier: int = 16, ema_decay: float = 0.9999, seed: int = 0):
        super().__init__(ema_decay)
        self.spec = spec
        self.hidden = tuple(int(h) for h in hidden)
        self.time_conditioned = time_conditioned
        self.n_fourier = n_fourier if time_conditioned else 0
        rng = np.random.default_rng(seed)
        sizes = [spec.dim * spec.n_states + self.n_fourier, *self.hidden]
        self.params = {}
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"W{i}"] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out))
            self.params[f"b{i}"] = np.zeros(fan_out)
        last = len(self.hidden)
        self.params[f"W{last}"] = np.zeros((sizes[-1], spec.dim * spec.n_states))
        self.params[f"b{last}"] = np.zeros(spec.dim * spec.n_states)

    def architecture(self):
        return {"type": "dense", "N": self.spec.n_states, "D": self.spec.dim,
                "L": self.spec.side, "hidden": list(self.hidden),
                "time_conditioned": self.time_conditioned, "n_fourier": self.n_fourier or 16}

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def _inputs(self, t, x):
        B = x.shape[0]
        N = self.spec.n_states
        h = (x[..., None] == np.arange(N)).reshape(B, -1).astype(float)
        if self.time_conditioned:
            h = np.concatenate([h, fourier_features(t, self.n_fourier)], axis=1)
        return h

    def _forward(self, t, x):
        h = self._inputs(t, x)
        acts, gates = [h], []
        for i in range(len(self.hidden)):
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            h, s = _silu(z)
            acts.append(h)
            gates.append((z, s))
        last = len(self.hidden)
        out = (h @ self.params[f"W{last}"] + self.params[f"b{last}"]).reshape(
            x.shape[0], self.spec.dim, self.spec.n_states)
        mask = off_self_mask(x, self.spec.n_states)
        return np.where(mask, out, 0.0), (acts, gates, mask)

    def _backward(self, cache, g_out):
        acts, gates, mask = cache
        B = g_out.shape[0]
        g = np.where(mask, g_out, 0.0).reshape(B, -1)
        grads = {}
        last = len(self.hidden)
        grads[f"W{last}"] = acts[last].T @ g
        grads[f"b{last}"] = g.sum(0)
        gh = g @ self.params[f"W{last}"].T
        for i in range(last - 1, -1, -1):
            z, s = gates[i]
            gz = gh * (s * (1.0 + z * (1.0 - s)))  # d silu / dz
            grads[f"W{i}"] = acts[i].T @ gz
            grads[f"b{i}"] = gz.sum(0)
            if i:
                gh = gz @ self.params[f"W{i}"].T
        return grads
