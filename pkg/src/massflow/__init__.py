"""massflow: infer mass flow fields from density snapshots.

Fits a low-rank linear surrogate (exact DMD) to a sequence of density
rasters, interpolates the density at a CFL-compatible fine time step, and
solves transportation LPs between consecutive frames to recover the
minimum-cost mass flow and a per-node velocity estimate.
"""

from .grid import GridSpec, GraphTopology, build_topology, movement_count
from .dmd import DmdModel, SnapshotSet, fit, evaluate, interpolate_series
from .transport import (
    make_cost,
    balance_mass,
    assemble_global,
    assemble_local,
    solve_transport,
    TransportProblem,
    TransportPlan,
)
from .pipeline import CouplingConfig, select_dt, run_coupling, plans_to_flowfield

__version__ = "0.1.0"

__all__ = [
    "GridSpec",
    "GraphTopology",
    "build_topology",
    "movement_count",
    "DmdModel",
    "SnapshotSet",
    "fit",
    "evaluate",
    "interpolate_series",
    "make_cost",
    "balance_mass",
    "assemble_global",
    "assemble_local",
    "solve_transport",
    "TransportProblem",
    "TransportPlan",
    "CouplingConfig",
    "select_dt",
    "run_coupling",
    "plans_to_flowfield",
    "__version__",
]
