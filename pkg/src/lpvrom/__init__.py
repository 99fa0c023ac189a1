"""Data-driven reduced-order LPV modeling toolkit.

Fits low-order linear parameter-varying models from state/input/output
trajectories of a high-order system (DMDc, algebraic DMDc, IOROM, and
balanced mode decomposition with oblique projections) and evaluates them by
prediction error and closed-loop MPC cost against a synthetic benchmark plant.
"""

from .bmd import ObliqueProjector, bmd_fit, bmd_spaces, select_order_from_hankel
from .dmdc import admdc_fit, admdc_lpv_predict, dmdc_fit
from .gramians import (
    GramianPair,
    default_horizon,
    empirical_controllability,
    empirical_observability,
    gramian_pair,
)
from .iorom import build_shared_pod_basis, iorom_fit
from .lpv import GridROM, exact_grid_rom, interpolate_at, simulate_lpv
from .mpc import MpcConfig, Scenario, closed_loop_run, solve_horizon
from .plant import (
    HighOrderPlant,
    PlantConfig,
    balanced_truncation_oracle,
    make_benchmark_plant,
)
from .reduced import ReducedModel
from .signals import SignalSpec, generate, gust_one_cosine, relative_error
from .snapshots import SnapshotSet, TrajectorySet, Trim, build_snapshots, compute_trim

__version__ = "0.1.0"

__all__ = [
    "GramianPair",
    "GridROM",
    "HighOrderPlant",
    "MpcConfig",
    "ObliqueProjector",
    "PlantConfig",
    "ReducedModel",
    "Scenario",
    "SignalSpec",
    "SnapshotSet",
    "TrajectorySet",
    "Trim",
    "admdc_fit",
    "admdc_lpv_predict",
    "balanced_truncation_oracle",
    "bmd_fit",
    "bmd_spaces",
    "build_shared_pod_basis",
    "build_snapshots",
    "closed_loop_run",
    "compute_trim",
    "default_horizon",
    "dmdc_fit",
    "empirical_controllability",
    "empirical_observability",
    "exact_grid_rom",
    "generate",
    "gramian_pair",
    "gust_one_cosine",
    "interpolate_at",
    "iorom_fit",
    "make_benchmark_plant",
    "relative_error",
    "select_order_from_hankel",
    "simulate_lpv",
    "solve_horizon",
]
