"""Couples the DMD surrogate to per-step transport solves.

select_dt picks the fine step from the speed bound; run_coupling fits the
model, interpolates the density, and solves one adjacent-only transport
problem per fine step; chain_transport is the shared chain runner also used
for the all-pairs comparison runs, so an exact-data chain and a DMD chain
always go through identical solver configuration.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import dmd as dmd_mod
from .dmd import SnapshotSet
from .grid import build_topology
from .transport import (
    assemble_global,
    assemble_local,
    balance_mass,
    make_cost,
    solve_transport,
)


@dataclass(frozen=True)
class CouplingConfig:
    v_max: float
    dt_data: float
    rank: int | None = None
    energy: float | None = None
    cost_kind: str = "euclidean"
    cost_params: dict = field(default_factory=dict)
    aggregation_window: int = 1
    workers: int = 1
    dt_fine: float | None = None  # explicit override; must divide dt_data
    on_infeasible: str = "raise"
    solver_options: dict = field(default_factory=dict)
    warm_chain: bool = False

    def __post_init__(self):
        if self.v_max <= 0 or self.dt_data <= 0:
            raise ValueError("v_max and dt_data must be positive")
        if self.aggregation_window < 1:
            raise ValueError("aggregation window must be >= 1")


@dataclass(frozen=True, eq=False)
class FlowField:
    """Aggregated arrows and velocity estimates per reporting window."""

    window_steps: int
    dt_fine: float
    from_node: list = field(repr=False)  # one array per window
    to_node: list = field(repr=False)
    mass: list = field(repr=False)
    mass_rank: list = field(repr=False)  # 1 = heaviest arrow in its window
    velocities: list = field(repr=False)  # (N, 2) per window

    @property
    def n_windows(self):
        return len(self.mass)


def select_dt(v_max, grid, dt_data):
    """Largest fine step dt_data/kappa with integer kappa satisfying the
    one-hop bound v_max * dt <= min(cell_width, cell_height)."""
    if v_max <= 0:
        raise ValueError("v_max must be positive")
    dx = min(grid.cell_width, grid.cell_height)
    kappa = max(1, math.ceil(v_max * dt_data / dx - 1e-12))
    return dt_data / kappa, kappa


# worker-process context for parallel chain solves
_CTX = {}


def _init_worker(payload):
    _CTX.update(payload)


def _solve_pair(task):
    idx, supply, demand = task
    if abs(supply.sum() - demand.sum()) > 1e-12 * max(supply.sum(), demand.sum(), 1e-300):
        supply, demand = balance_mass(supply, demand)
    if _CTX["kind"] == "local":
        problem = assemble_local(supply, demand, _CTX["cost"], _CTX["topology"])
    else:
        problem = assemble_global(
            supply, demand, _CTX["cost"], _CTX["grid"],
            memory_budget=_CTX.get("memory_budget") or 2 << 30,
        )
    plan = solve_transport(
        problem,
        on_infeasible=_CTX["on_infeasible"],
        t_index=idx,
        **_CTX["solver_options"],
    )
    return idx, plan


def chain_transport(frames, kind, cost, grid=None, topology=None, workers=1,
                    on_infeasible="raise", solver_options=None, memory_budget=None,
                    warm_chain=False):
    """Solve one transport problem per consecutive frame pair.

    frames: SnapshotSet (or bare matrix) whose columns are the density
    states.  Returns (plans, bookkeeping): bookkeeping rows record the raw
    pair totals and the mass injected by balancing, closing to 1e-9.

    warm_chain reuses each solve's final basis tree to start the next one
    (the frames of a fine chain barely differ, so most pivots vanish); the
    chain then runs sequentially and ignores the worker count.
    """
    data = frames.data if isinstance(frames, SnapshotSet) else np.asarray(frames)
    if kind == "local" and topology is None:
        raise ValueError("local chains need a topology")
    if kind == "global" and grid is None:
        raise ValueError("global chains need a grid")
    payload = {
        "kind": kind,
        "cost": cost,
        "grid": grid,
        "topology": topology,
        "on_infeasible": on_infeasible,
        "solver_options": solver_options or {},
        "memory_budget": memory_budget,
    }
    n_pairs = data.shape[1] - 1
    tasks = [(j, data[:, j].copy(), data[:, j + 1].copy()) for j in range(n_pairs)]

    if warm_chain:
        _init_worker(payload)
        base_options = dict(payload["solver_options"])
        plans = []
        for t in tasks:
            opts = dict(base_options)
            if plans and plans[-1].basis_arcs is not None:
                opts["warm_tree"] = plans[-1].basis_arcs
            _CTX["solver_options"] = opts
            plans.append(_solve_pair(t)[1])
        _CTX["solver_options"] = base_options
    elif workers > 1 and n_pairs > 1:
        import multiprocessing as mp

        ctx = mp.get_context("fork")
        with ctx.Pool(processes=min(workers, n_pairs),
                      initializer=_init_worker, initargs=(payload,)) as pool:
            results = pool.map(_solve_pair, tasks, chunksize=1)
        results.sort(key=lambda r: r[0])
        plans = [plan for _, plan in results]
    else:
        _init_worker(payload)
        plans = [_solve_pair(t)[1] for t in tasks]

    bookkeeping = []
    for j in range(n_pairs):
        s_raw = float(data[:, j].sum())
        d_raw = float(data[:, j + 1].sum())
        injected = float(plans[j].supply.sum() - s_raw + plans[j].demand.sum() - d_raw)
        bookkeeping.append(
            {"t_index": j, "supply_total": s_raw, "demand_total": d_raw,
             "injected": injected, "imbalance": d_raw - s_raw}
        )
    return plans, bookkeeping


def run_coupling(source, config: CouplingConfig, return_details=False):
    """Fit, interpolate at the fine step, and solve the per-step local LPs.

    source is a SnapshotSet (fitted here) or an already fitted DmdModel
    carrying grid geometry.  Every returned plan moves mass at most one
    cell (guaranteed by the adjacency restriction, asserted on output
    anyway).
    """
    if isinstance(source, dmd_mod.DmdModel):
        model = source
        grid = model.grid
        if grid is None:
            raise ValueError("model carries no grid geometry")
        if abs(config.dt_data - model.dt_fit) > 1e-12 * model.dt_fit:
            raise ValueError("config dt_data disagrees with the model's fitted spacing")
        t0 = model.t0
        n_frames = model.n_fit_frames
    else:
        snapshots = source
        grid = snapshots.grid
        if grid is None:
            raise ValueError("snapshots need an attached grid")
        model = dmd_mod.fit(snapshots, rank=config.rank, energy=config.energy)
        t0 = snapshots.t0
        n_frames = snapshots.n_frames

    if config.dt_fine is not None:
        dt_fine = config.dt_fine
        kappa = config.dt_data / dt_fine
        if abs(kappa - round(kappa)) > 1e-9:
            raise ValueError("dt_fine must divide dt_data evenly")
        kappa = int(round(kappa))
        if config.v_max * dt_fine > min(grid.cell_width, grid.cell_height) * (1 + 1e-12):
            raise ValueError("dt_fine violates the one-hop speed bound")
    else:
        dt_fine, kappa = select_dt(config.v_max, grid, config.dt_data)

    t_end = t0 + config.dt_data * (n_frames - 1)
    fine = dmd_mod.interpolate_series(model, t0, t_end, dt_fine, grid=grid)

    topology = build_topology(grid)
    cost = make_cost(config.cost_kind, topology, **config.cost_params)
    plans, bookkeeping = chain_transport(
        fine, "local", cost, topology=topology, workers=config.workers,
        on_infeasible=config.on_infeasible, solver_options=config.solver_options,
        warm_chain=config.warm_chain,
    )

    for rec in bookkeeping:  # balancing must account for the raw imbalance exactly
        if abs(abs(rec["imbalance"]) - rec["injected"]) > 1e-9 * max(rec["supply_total"], 1.0):
            raise AssertionError(f"mass bookkeeping fails at step {rec['t_index']}")
    ncols = grid.n_cols
    for j, plan in enumerate(plans):
        dr = np.abs(plan.from_node // ncols - plan.to_node // ncols)
        dc = np.abs(plan.from_node % ncols - plan.to_node % ncols)
        if dr.max(initial=0) > 1 or dc.max(initial=0) > 1:
            raise AssertionError(f"plan {j} moves mass farther than one cell")

    if return_details:
        return plans, {
            "model": model,
            "fine": fine,
            "dt_fine": dt_fine,
            "kappa": kappa,
            "topology": topology,
            "cost": cost,
            "bookkeeping": bookkeeping,
            "solve_seconds": float(sum(p.solve_seconds for p in plans)),
        }
    return plans


def plans_to_flowfield(plans, topology, window, dt_fine=None):
    """Aggregate plan chains into per-window arrows and node velocities.

    Arrows sum the non-self-loop flows over each window.  The velocity at
    node j is the mass-weighted mean displacement per unit time,
    sum_k x_jk (xi_k - xi_j) / (m_j dt), averaged over the window's steps;
    nodes without mass get velocity zero.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if dt_fine is None:
        dt_fine = 1.0
    spec = topology.spec
    coords = spec.node_coords()
    n = spec.node_count()
    # one-hop speed cap only binds adjacent-move plans; all-pairs plans may
    # legitimately carry mass across many cells in one step
    local_only = all(p.problem_kind == "local" for p in plans)
    v_cap = np.hypot(spec.cell_width, spec.cell_height) / dt_fine

    w_from, w_to, w_mass, w_rank, w_vel = [], [], [], [], []
    for start in range(0, len(plans), window):
        group = plans[start : start + window]
        acc = {}
        vel = np.zeros((n, 2))
        for plan in group:
            off = plan.from_node != plan.to_node
            for f, t, m in zip(plan.from_node[off], plan.to_node[off], plan.mass[off]):
                acc[(f, t)] = acc.get((f, t), 0.0) + m
            # per-step node velocity, averaged below
            disp = np.zeros((n, 2))
            np.add.at(disp, plan.from_node[off],
                      plan.mass[off, None] * (coords[plan.to_node[off]] - coords[plan.from_node[off]]))
            m_node = plan.supply
            has = m_node > 0
            step_v = np.zeros((n, 2))
            step_v[has] = disp[has] / (m_node[has, None] * dt_fine)
            vel += step_v
        vel /= len(group)
        speed = np.hypot(vel[:, 0], vel[:, 1])
        if local_only and speed.max(initial=0.0) > v_cap * (1 + 1e-9):
            raise AssertionError("velocity estimate exceeds the one-hop bound")
        if acc:
            pairs = sorted(acc)
            fr = np.array([p[0] for p in pairs], dtype=np.int64)
            to = np.array([p[1] for p in pairs], dtype=np.int64)
            ms = np.array([acc[p] for p in pairs])
        else:
            fr = np.zeros(0, dtype=np.int64)
            to = np.zeros(0, dtype=np.int64)
            ms = np.zeros(0)
        order = np.argsort(-ms, kind="stable")
        rank = np.empty(len(ms), dtype=np.int64)
        rank[order] = 1 + np.arange(len(ms))
        w_from.append(fr)
        w_to.append(to)
        w_mass.append(ms)
        w_rank.append(rank)
        w_vel.append(vel)
    return FlowField(
        window_steps=window, dt_fine=dt_fine, from_node=w_from, to_node=w_to,
        mass=w_mass, mass_rank=w_rank, velocities=w_vel,
    )


def error_matrices(plans_exact, plans_dmd, problem):
    """Relative Frobenius distance between two stacked plan sequences."""
    if len(plans_exact) != len(plans_dmd):
        raise ValueError("plan sequences must cover the same time indices")
    Xe = np.column_stack([p.flow_vector(problem) for p in plans_exact])
    Xd = np.column_stack([p.flow_vector(problem) for p in plans_dmd])
    denom = np.linalg.norm(Xe, "fro")
    if denom == 0:
        raise ValueError("empty reference plans")
    return float(np.linalg.norm(Xe - Xd, "fro") / denom)


def error_presence(p_data, p_reconstructed):
    """Relative Frobenius error between a presence matrix and its
    reconstruction subsampled back to the raw time grid."""
    a = np.asarray(p_data, dtype=float)
    b = np.asarray(p_reconstructed, dtype=float)
    if a.shape != b.shape:
        raise ValueError("presence matrices must have equal shapes")
    denom = np.linalg.norm(a, "fro")
    if denom == 0:
        raise ValueError("zero reference presence matrix")
    return float(np.linalg.norm(a - b, "fro") / denom)


def error_dmd_reference(y_ref, y_dmd):
    """Matrix-level relative error plus the per-time relative 2-norm series."""
    a = np.asarray(y_ref, dtype=float)
    b = np.asarray(y_dmd, dtype=float)
    if a.shape != b.shape:
        raise ValueError("reference and reconstruction must have equal shapes")
    denom = np.linalg.norm(a, "fro")
    if denom == 0:
        raise ValueError("zero reference trajectory")
    col = np.linalg.norm(a, axis=0)
    if np.any(col == 0):
        raise ValueError("zero reference column")
    series = np.linalg.norm(a - b, axis=0) / col
    return float(np.linalg.norm(a - b, "fro") / denom), series
