"""Transportation problem assembly and solution between two density frames.

Global problems couple every node pair (N^2 variables, variable order
x_11..x_1N, x_21..); local problems only allow moves to the <= 8 adjacent
cells or staying put, which is what makes long snapshot chains tractable.
Marginals must be balanced first (balance_mass); solve_transport wraps the
LP engines and verifies optimality on every solve.
"""

from dataclasses import dataclass, field

import numpy as np

from . import lp
from .grid import GridSpec, GraphTopology

DEFAULT_MEMORY_BUDGET = 2 << 30  # bytes allowed for one global problem
_BYTES_PER_VARIABLE = 24  # cost f8 + flow f8 + two i4 index arrays


class TransportInfeasible(Exception):
    """Local problem cannot route all mass; carries the unmet constraints."""

    def __init__(self, message, unmet_supply=None, unmet_demand=None, t_index=None):
        super().__init__(message)
        self.unmet_supply = unmet_supply if unmet_supply is not None else []
        self.unmet_demand = unmet_demand if unmet_demand is not None else []
        self.t_index = t_index


@dataclass(frozen=True, eq=False)
class TransportProblem:
    kind: str  # global | local
    cost: np.ndarray = field(repr=False)
    supply: np.ndarray = field(repr=False)
    demand: np.ndarray = field(repr=False)
    # index map: variable p moves mass from_node[p] -> to_node[p]
    from_node: np.ndarray = field(repr=False)
    to_node: np.ndarray = field(repr=False)
    n_nodes: int = 0
    topology: GraphTopology | None = None

    def variable_count(self):
        return len(self.cost)


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """Optimal flows as parallel arrays (from_node, to_node, mass > 0)."""

    from_node: np.ndarray = field(repr=False)
    to_node: np.ndarray = field(repr=False)
    mass: np.ndarray = field(repr=False)
    objective: float = 0.0
    problem_kind: str = "local"
    residuals: float = 0.0
    supply: np.ndarray = field(default=None, repr=False)
    demand: np.ndarray = field(default=None, repr=False)
    duals: np.ndarray = field(default=None, repr=False)
    iterations: int = 0
    solve_seconds: float = 0.0
    parked_supply: np.ndarray = field(default=None, repr=False)
    parked_demand: np.ndarray = field(default=None, repr=False)
    basis_arcs: np.ndarray = field(default=None, repr=False)  # warm-start handle

    def moved_mass(self):
        off = self.from_node != self.to_node
        return float(self.mass[off].sum())

    def flow_vector(self, problem: TransportProblem):
        """Scatter the sparse plan back onto the problem's variable layout."""
        x = np.zeros(problem.variable_count())
        if self.problem_kind == "global":
            pos = self.from_node * problem.n_nodes + self.to_node
        else:
            offs = problem.topology.offsets
            nbrs = problem.topology.neighbors
            pos = np.empty(len(self.from_node), dtype=np.int64)
            for i, (j, k) in enumerate(zip(self.from_node, self.to_node)):
                lo, hi = offs[j], offs[j + 1]
                pos[i] = lo + np.searchsorted(nbrs[lo:hi], k)
        x[pos] = self.mass
        return x


def _pair_distances(coords, from_node, to_node):
    d = coords[from_node] - coords[to_node]
    return np.hypot(d[:, 0], d[:, 1])


def make_cost(kind, target, epsilon=0.1, lx=None, ly=None):
    """Materialize the cost vector for a global (GridSpec target) or local
    (GraphTopology target) problem, ordered exactly like the variable vector.

    kinds: euclidean distance; penalized distance^(1+epsilon), which breaks
    the tie between one long move and several short ones; anisotropic cell
    steps (0, lx, ly, hypot(lx, ly)), defined only on adjacencies.
    """
    if isinstance(target, GraphTopology):
        spec = target.spec
        from_node = np.repeat(
            np.arange(spec.node_count()), np.diff(target.offsets)
        )
        to_node = target.neighbors
        local = True
    elif isinstance(target, GridSpec):
        n = target.node_count()
        from_node = np.repeat(np.arange(n), n)
        to_node = np.tile(np.arange(n), n)
        spec = target
        local = False
    else:
        raise TypeError("target must be a GridSpec (global) or GraphTopology (local)")

    if kind == "euclidean":
        return _pair_distances(spec.node_coords(), from_node, to_node)
    if kind == "penalized":
        if epsilon <= 0:
            raise ValueError("penalized cost needs epsilon > 0")
        return _pair_distances(spec.node_coords(), from_node, to_node) ** (1.0 + epsilon)
    if kind == "anisotropic":
        if not local:
            raise ValueError("anisotropic cost is defined only on adjacent pairs; use a local problem")
        lx = spec.cell_width if lx is None else lx
        ly = spec.cell_height if ly is None else ly
        if lx <= 0 or ly <= 0:
            raise ValueError("anisotropic cost needs positive cell steps")
        fr, fc = np.divmod(from_node, spec.n_cols)
        tr, tc = np.divmod(to_node, spec.n_cols)
        dx = np.abs(tc - fc) * lx
        dy = np.abs(tr - fr) * ly
        return np.hypot(dx, dy)
    raise ValueError(f"unknown cost kind {kind!r}")


def balance_mass(supply, demand):
    """Equalize totals by spreading the deficit uniformly over every node of
    the lighter side; the heavier side is returned unchanged."""
    supply = np.asarray(supply, dtype=float).copy()
    demand = np.asarray(demand, dtype=float).copy()
    if len(supply) != len(demand):
        raise ValueError("supply and demand must have equal length")
    if np.any(supply < 0) or np.any(demand < 0):
        raise ValueError("marginals must be nonnegative")
    excess = supply.sum() - demand.sum()
    if excess > 0:
        demand += excess / len(demand)
    elif excess < 0:
        supply += (-excess) / len(supply)
    return supply, demand


def _check_marginals(supply, demand):
    supply = np.asarray(supply, dtype=float)
    demand = np.asarray(demand, dtype=float)
    if np.any(supply < 0) or np.any(demand < 0):
        raise ValueError("marginals must be nonnegative")
    total = max(supply.sum(), demand.sum(), 1e-300)
    if abs(supply.sum() - demand.sum()) > 1e-9 * total:
        raise ValueError("unbalanced marginals; run balance_mass first")
    return supply, demand


def assemble_global(supply, demand, cost, grid: GridSpec, memory_budget=DEFAULT_MEMORY_BUDGET):
    """All-pairs problem with N^2 variables in row-major pair order."""
    supply, demand = _check_marginals(supply, demand)
    n = grid.node_count()
    if len(supply) != n or len(demand) != n:
        raise ValueError("marginal length does not match the grid")
    need = _BYTES_PER_VARIABLE * n * n
    if need > memory_budget:
        raise MemoryError(
            f"global problem needs {n * n:,} variables (~{need / 2**30:.1f} GiB, "
            f"budget {memory_budget / 2**30:.1f} GiB); use local (adjacent-only) "
            f"assembly for grids this large"
        )
    cost = np.asarray(cost, dtype=float)
    if len(cost) != n * n:
        raise ValueError("cost vector length must be N^2")
    from_node = np.repeat(np.arange(n, dtype=np.int32), n)
    to_node = np.tile(np.arange(n, dtype=np.int32), n)
    return TransportProblem(
        kind="global",
        cost=cost,
        supply=supply,
        demand=demand,
        from_node=from_node,
        to_node=to_node,
        n_nodes=n,
    )


def assemble_local(supply, demand, cost, topology: GraphTopology):
    """Adjacent-only problem; variable p moves along the p-th flattened arc."""
    supply, demand = _check_marginals(supply, demand)
    n = topology.spec.node_count()
    if len(supply) != n or len(demand) != n:
        raise ValueError("marginal length does not match the topology")
    cost = np.asarray(cost, dtype=float)
    if len(cost) != topology.arc_count():
        raise ValueError("cost vector length must equal the adjacency arc count")
    from_node = np.repeat(
        np.arange(n, dtype=np.int32), np.diff(topology.offsets)
    ).astype(np.int32)
    return TransportProblem(
        kind="local",
        cost=cost,
        supply=supply,
        demand=demand,
        from_node=from_node,
        to_node=topology.neighbors.astype(np.int32),
        n_nodes=n,
        topology=topology,
    )


def _certify(problem, x, duals, tol=1e-8):
    """Complementary slackness self-check against the solver duals."""
    scale = 1.0 + float(np.abs(problem.cost).max())
    u = duals[: problem.n_nodes][problem.from_node]
    v = duals[problem.n_nodes :][problem.to_node]
    rc = problem.cost - u - v
    if rc.min() < -tol * scale:
        raise ArithmeticError(f"dual infeasibility {rc.min():.3e} fails the optimality check")
    active = x > 1e-12 * max(1.0, x.max())
    if active.any():
        worst = float(np.abs(rc[active] * x[active]).max())
        if worst > tol * scale * max(1.0, float(x.max())):
            raise ArithmeticError(f"complementary slackness residual {worst:.3e}")


def solve_transport(problem: TransportProblem, engine="network", on_infeasible="raise",
                    t_index=None, **solver_options):
    """Solve an assembled problem and package the optimal plan.

    engine "network" is the production path; "dense" routes through the
    reference simplex on the explicit constraint matrix (small instances).
    Local problems can be genuinely infeasible when mass must cross more
    than one cell in a step: "raise" reports the unmet constraints,
    "park" keeps the unroutable mass in place (extra self-loop flow) and
    records it on the plan.
    """
    if engine == "dense":
        sol = _solve_via_dense(problem, **solver_options)
        parked_s = np.zeros(problem.n_nodes)
        parked_d = np.zeros(problem.n_nodes)
        if sol.status == "infeasible":
            raise TransportInfeasible("dense solve reports infeasible marginals", t_index=t_index)
    else:
        sol = lp.solve_network(problem, **solver_options)
        parked_s = sol.parked_supply
        parked_d = sol.parked_demand
    if sol.status != "optimal":
        raise ArithmeticError(f"solver stopped with status {sol.status!r}")

    total = max(problem.supply.sum(), 1.0)
    parked = float(parked_s.sum() + parked_d.sum())
    x = sol.x
    supply_eff = problem.supply
    demand_eff = problem.demand
    if parked > 1e-9 * total:
        nz_s = np.flatnonzero(parked_s > 1e-12 * total)
        nz_d = np.flatnonzero(parked_d > 1e-12 * total)
        if on_infeasible == "raise":
            lines = [f"local step cannot route all mass ({parked:.3e} stranded)"]
            if t_index is not None:
                lines[0] += f" at time index {t_index}"
            ncols = problem.topology.spec.n_cols if problem.topology else None
            for j in nz_s[:20]:
                where = f" (row {j // ncols}, col {j % ncols})" if ncols else ""
                lines.append(f"  supply node {j}{where}: {parked_s[j]:.3e} undeliverable")
            for k in nz_d[:20]:
                where = f" (row {k // ncols}, col {k % ncols})" if ncols else ""
                lines.append(f"  demand node {k}{where}: {parked_d[k]:.3e} unmet")
            raise TransportInfeasible(
                "\n".join(lines), unmet_supply=nz_s, unmet_demand=nz_d, t_index=t_index
            )
        # park mode: stranded supply stays put as self-loop mass, the plan's
        # demand side is restated accordingly (original demand is infeasible)
        x = x.copy()
        self_pos = _self_loop_positions(problem)
        x[self_pos] += parked_s
        supply_eff = problem.supply.copy()
        demand_eff = problem.demand - parked_d + parked_s
    else:
        parked_s = None
        parked_d = None

    _certify(problem, sol.x, sol.duals if engine == "network" else _pad_duals(problem, sol.duals))

    keep = x > 0
    rows = np.bincount(problem.from_node, weights=x, minlength=problem.n_nodes)
    cols = np.bincount(problem.to_node, weights=x, minlength=problem.n_nodes)
    resid = max(
        float(np.abs(rows - supply_eff).max()), float(np.abs(cols - demand_eff).max())
    )
    return TransportPlan(
        from_node=problem.from_node[keep].astype(np.int64),
        to_node=problem.to_node[keep].astype(np.int64),
        mass=x[keep],
        objective=float(problem.cost @ x),
        problem_kind=problem.kind,
        residuals=resid,
        supply=supply_eff,
        demand=demand_eff,
        duals=sol.duals,
        iterations=sol.iterations,
        solve_seconds=sol.solve_seconds,
        parked_supply=parked_s,
        parked_demand=parked_d,
        basis_arcs=sol.tree_arcs,
    )


def _self_loop_positions(problem):
    pos = np.flatnonzero(problem.from_node == problem.to_node)
    if len(pos) != problem.n_nodes:
        raise ValueError("problem lacks a self arc per node")
    return pos[np.argsort(problem.from_node[pos])]


def _pad_duals(problem, dense_duals):
    """Dense solve drops the last demand row; reinsert its zero multiplier."""
    return np.concatenate([dense_duals, [0.0]])


def _solve_via_dense(problem, **options):
    n = problem.n_nodes
    m_vars = problem.variable_count()
    rows = np.zeros((2 * n - 1, m_vars))
    rows[problem.from_node, np.arange(m_vars)] = 1.0
    dem_row = n + problem.to_node
    keep = problem.to_node < n - 1  # redundant last demand row dropped
    rows[dem_row[keep], np.flatnonzero(keep)] = 1.0
    b = np.concatenate([problem.supply, problem.demand[:-1]])
    return lp.solve_dense(problem.cost, rows, b, **options)
