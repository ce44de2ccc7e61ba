"""Proton transport simulation and dose-based treatment-plan optimization.

The package couples a track-length Monte Carlo engine for protons with a
1D deterministic continuous-slowing-down solver and its discrete adjoint,
and uses both to optimize pencil-beam weights against a prescribed
depth-dose profile.
"""

__version__ = "0.1.0"

from protonplan.materials import (
    BUILTIN_MEDIA,
    Medium,
    Phantom,
    ScenarioParams,
    energy_at_depth,
    perturb_medium,
    range_,
    stopping_power,
)
from protonplan.phase_space import (
    BoundaryClass,
    EnergyWindow,
    PhaseState,
    SpatialDomain,
    classify,
    exit_test,
)
from protonplan.scattering import CrossSections, KernelParams, kernel_mass, sample_transition, total_rate
from protonplan.sde_engine import Beam, SimConfig, Source, TransportModel, run_batch, simulate_track
from protonplan.tally import DoseMap, FluenceMap, Grid, dose_from_fluence, estimate_resolvent
from protonplan.pde_1d import Mesh1D, assemble_operator, monotonicity_check, solve_adjoint, solve_forward
from protonplan.optimizer import BeamBank, OptConfig, PlanProblem, Prescription, optimize

__all__ = [
    "BUILTIN_MEDIA",
    "Beam",
    "BeamBank",
    "BoundaryClass",
    "CrossSections",
    "DoseMap",
    "EnergyWindow",
    "FluenceMap",
    "Grid",
    "KernelParams",
    "Medium",
    "Mesh1D",
    "OptConfig",
    "Phantom",
    "PhaseState",
    "PlanProblem",
    "Prescription",
    "ScenarioParams",
    "SimConfig",
    "Source",
    "SpatialDomain",
    "TransportModel",
    "assemble_operator",
    "classify",
    "dose_from_fluence",
    "energy_at_depth",
    "estimate_resolvent",
    "exit_test",
    "kernel_mass",
    "monotonicity_check",
    "optimize",
    "perturb_medium",
    "range_",
    "run_batch",
    "sample_transition",
    "simulate_track",
    "solve_adjoint",
    "solve_forward",
    "stopping_power",
    "total_rate",
]
