"""Sample-set metrics (magnetization, 2-point correlation, energy W2) and sample files."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
import hashlib
import json
import struct

import numpy as np

from .state_space import SpaceSpec
from .targets import LatticeModel

SAMPLE_MAGIC = b"DSMP"
SAMPLE_VERSION = 1
QUANTILE_POINTS = 1024


class SpecMismatchError(ValueError):
    pass


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SampleSet:
    states: np.ndarray  # (B, D)
    spec: SpaceSpec
    sampler: str = "unknown"
    seed: int = 0
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = self.spec.validate(self.states)
        if self.states.ndim != 2 or self.states.shape[0] == 0:
            raise ValueError("a sample set needs at least one state")

    def __len__(self):
        return self.states.shape[0]

    def header(self) -> dict:
        return {"version": SAMPLE_VERSION, "N": self.spec.n_states, "D": self.spec.dim,
                "L": self.spec.side, "count": len(self), "sampler": self.sampler,
                "seed": self.seed, "config_hash": self.config_hash, **self.extra}


def write_samples(path, samples: SampleSet) -> None:
    """Magic, u32 header length, JSON header, then little-endian u16 rows."""
    head = json.dumps(samples.header(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(samples.states.astype("<u2").tobytes())


def read_samples(path) -> SampleSet:
    with open(path, "rb") as fh:
        if fh.read(4) != SAMPLE_MAGIC:
            raise ValueError(f"{path}: not a sample file")
        (n,) = struct.unpack("<I", fh.read(4))
        head = json.loads(fh.read(n).decode())
        if head.get("version") != SAMPLE_VERSION:
            raise ValueError(f"{path}: unsupported sample file version {head.get('version')}")
        body = np.frombuffer(fh.read(), dtype="<u2")
    D = head["D"]
    states = body.reshape(-1, D).astype(np.int64)
    spec = SpaceSpec(head["N"], D, head.get("L"))
    known = {"version", "N", "D", "L", "count", "sampler", "seed", "config_hash"}
    return SampleSet(states, spec, head.get("sampler", "unknown"), head.get("seed", 0),
                     head.get("config_hash", ""), {k: v for k, v in head.items() if k not in known})


def _states(s):
    return s.states if isinstance(s, SampleSet) else np.asarray(s)


def _check(a, b):
    if a.shape[1:] != b.shape[1:]:
        raise SpecMismatchError(f"sample shapes differ: {a.shape[1:]} vs {b.shape[1:]}")


# ------------------------------------------------------------------ metrics
def magnetization_error(test, ref, model: LatticeModel) -> float:
    a, b = _states(test), _states(ref)
    _check(a, b)
    return float(abs(model.magnetization(a).mean() - model.magnetization(b).mean()))


def correlation_function(x, model: LatticeModel) -> np.ndarray:
    """Translation-averaged 2-point function C(r), shape (L, L), averaged over samples.

    Ising: <s_i s_{i+r}>.  Potts: <(N 1[x_i = x_{i+r}] - 1) / (N - 1)>.
    """
    x = np.asarray(x)
    L = model.side
    grid = x.reshape(-1, L, L)
    if model.kind == "ising":
        s = 2.0 * grid - 1.0
        f = np.fft.fft2(s)
        c = np.fft.ifft2(np.conj(f) * f).real / (L * L)
        return c.mean(0)
    N = model.n_states
    eq = np.zeros((grid.shape[0], L, L))
    for n in range(N):
        f = np.fft.fft2((grid == n).astype(float))
        eq += np.fft.ifft2(np.conj(f) * f).real
    eq /= L * L
    return ((N * eq - 1.0) / (N - 1)).mean(0)


def correlation_error(test, ref, model: LatticeModel) -> float:
    """Mean absolute gap between the two correlation functions over all displacements."""
    a, b = _states(test), _states(ref)
    _check(a, b)
    return float(np.mean(np.abs(correlation_function(a, model) - correlation_function(b, model))))


def wasserstein2_1d(a, b) -> float:
    """W2 between empirical 1-D distributions.

    Equal sizes: RMS of sorted differences.  Otherwise both quantile
    functions are read off at 1024 midpoints (inverted-CDF convention).
    """
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("W2 needs non-empty samples")
    if a.size != b.size:
        q = (np.arange(QUANTILE_POINTS) + 0.5) / QUANTILE_POINTS
        a = np.quantile(a, q, method="inverted_cdf")
        b = np.quantile(b, q, method="inverted_cdf")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def energy_w2(test, ref, model: LatticeModel) -> float:
    a, b = _states(test), _states(ref)
    _check(a, b)
    return wasserstein2_1d(model.energy(a), model.energy(b))


@dataclass
class MetricReport:
    delta_mag: float
    delta_corr: float
    ew2: float
    n_test: int
    n_ref: int
    ess: float | None = None
    config_hash: str = ""

    def __post_init__(self):
        vals = [self.delta_mag, self.delta_corr, self.ew2]
        if not all(np.isfinite(vals)) or self.ew2 < 0:
            raise FloatingPointError("metrics must be finite and ew2 non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(test, ref, model: LatticeModel, ess: float | None = None,
             cfg_hash: str = "") -> MetricReport:
    a, b = _states(test), _states(ref)
    if isinstance(test, SampleSet) and isinstance(ref, SampleSet) and test.spec != ref.spec:
        raise SpecMismatchError("sample sets come from different spaces")
    return MetricReport(magnetization_error(a, b, model), correlation_error(a, b, model),
                        energy_w2(a, b, model), len(a), len(b), ess, cfg_hash)
