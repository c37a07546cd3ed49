"""Discrete Schrodinger-bridge samplers on Z_N^D with a uniform reference CTMC."""
from .state_space import SpaceSpec, CapacityError
from .schedule import NoiseSchedule, UniformKernel, INF
from .targets import LatticeModel, TableTarget, target_from_config
from .ctmc import TimeGrid, rollout, tau_leap_step, ess
from .oracle import SBOracle, ipf_solve, certify
from .approximators import TabularMultiplier, DenseMultiplier, BregmanDivergence
from .trainer import TrainConfig, Trainer, TabularFixedPoint

__all__ = [
    "SpaceSpec", "CapacityError", "NoiseSchedule", "UniformKernel", "INF",
    "LatticeModel", "TableTarget", "target_from_config", "TimeGrid", "rollout",
    "tau_leap_step", "ess", "SBOracle", "ipf_solve", "certify", "TabularMultiplier",
    "DenseMultiplier", "BregmanDivergence", "TrainConfig", "Trainer", "TabularFixedPoint",
]
__version__ = "0.1.0"
