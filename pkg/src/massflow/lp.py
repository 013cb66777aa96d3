"""Exact LP solvers for balanced transportation problems.

solve_network is a primal network simplex on the bipartite supply/demand
graph (all pairs, or an adjacency-restricted arc set).  Every instance gets
an artificial root node with big-M arcs, so the solver never fails on an
infeasible restricted instance: leftover artificial flow at optimality is
exactly the mass that cannot be routed, reported per node.  The pivot loop
runs as a compiled kernel over a flat array spanning tree; that is what
keeps the dense all-pairs instances (millions of arcs) tractable.

solve_dense is a two-phase revised simplex on the explicit constraint
matrix, kept as an independent reference implementation for cross-checking
the network code on small instances.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit

# consecutive degenerate pivots tolerated before switching to Bland's rule
STALL_LIMIT = 48


@dataclass(frozen=True, eq=False)
class LpSolution:
    x: np.ndarray = field(repr=False)
    duals: np.ndarray = field(repr=False)
    objective: float = 0.0
    status: str = "optimal"  # optimal | infeasible | iteration_limit
    iterations: int = 0
    # network extras: mass the big-M arcs still carry at optimality
    parked_supply: np.ndarray | None = field(default=None, repr=False)
    parked_demand: np.ndarray | None = field(default=None, repr=False)
    solve_seconds: float = 0.0
    # final basis (arc indices incl. artificials), reusable as a warm start
    tree_arcs: np.ndarray | None = field(default=None, repr=False)


class _Tree:
    """Spanning-tree basis as flat arrays.

    parent/pred_arc/depth plus doubly linked sibling lists
    (first_child/next_sib/prev_sib) so subtree walks need no Python
    containers and the compiled core can mutate the structure in place.
    """

    __slots__ = ("parent", "pred_arc", "depth", "pot",
                 "first_child", "next_sib", "prev_sib")

    def __init__(self, n_nodes):
        self.parent = np.full(n_nodes, -1, dtype=np.int64)
        self.pred_arc = np.full(n_nodes, -1, dtype=np.int64)
        self.depth = np.zeros(n_nodes, dtype=np.int64)
        self.pot = np.zeros(n_nodes)
        self.first_child = np.full(n_nodes, -1, dtype=np.int64)
        self.next_sib = np.full(n_nodes, -1, dtype=np.int64)
        self.prev_sib = np.full(n_nodes, -1, dtype=np.int64)

    def attach(self, child, par, arc, arc_cost, forward):
        self.parent[child] = par
        self.pred_arc[child] = arc
        self.depth[child] = self.depth[par] + 1
        self.pot[child] = self.pot[par] + arc_cost if forward else self.pot[par] - arc_cost
        c = self.first_child[par]
        self.next_sib[child] = c
        self.prev_sib[child] = -1
        if c != -1:
            self.prev_sib[c] = child
        self.first_child[par] = child


def _rebuild_basis(tree, flow, in_tree, arcs, a_tail, a_head, a_cost,
                   supply, demand, root):
    """Re-adopt a previous spanning tree under new marginals.

    Rebuilds parent/potential structure by search from the root, then
    assigns the (unique) tree flows bottom-up.  Returns False when the arc
    set does not span or any tree flow comes out negative beyond rounding.
    """
    ns, nd = len(supply), len(demand)
    n_nodes = ns + nd + 1
    if len(arcs) != n_nodes - 1:
        return False
    incident = [[] for _ in range(n_nodes)]
    for a in arcs:
        incident[a_tail[a]].append(a)
        incident[a_head[a]].append(a)
    order = [root]
    seen = np.zeros(n_nodes, dtype=bool)
    seen[root] = True
    qi = 0
    while qi < len(order):
        x = order[qi]
        qi += 1
        for a in incident[x]:
            y = a_head[a] if a_tail[a] == x else a_tail[a]
            if not seen[y]:
                seen[y] = True
                tree.attach(y, x, a, a_cost[a], forward=a_head[a] == y)
                order.append(y)
    if len(order) != n_nodes:
        return False

    b = np.concatenate([supply, -demand, [0.0]])
    tol = 1e-9 * max(1.0, float(supply.sum()))
    net = b.copy()
    for x in reversed(order[1:]):  # deepest first
        a = tree.pred_arc[x]
        f = net[x] if a_tail[a] == x else -net[x]
        if f < -tol:
            return False
        flow[a] = max(f, 0.0)
        net[tree.parent[x]] += net[x]
    in_tree[arcs] = True
    return True


def _northwest_staircase(supply, demand):
    """Northwest-corner starting flows: greedy staircase over (i, j)."""
    ns, nd = len(supply), len(demand)
    s = supply.astype(float).copy()
    d = demand.astype(float).copy()
    arcs = []
    i = j = 0
    while i < ns and j < nd:
        t = min(s[i], d[j])
        arcs.append((i, j, t))
        s[i] -= t
        d[j] -= t
        if i == ns - 1 and j == nd - 1:
            break
        if s[i] <= d[j] and i < ns - 1:
            i += 1
        else:
            j += 1
    return arcs


@njit(cache=True, inline="always")
def _unlink(x, parent, first_child, next_sib, prev_sib):
    p = parent[x]
    pv = prev_sib[x]
    nx = next_sib[x]
    if pv != -1:
        next_sib[pv] = nx
    else:
        first_child[p] = nx
    if nx != -1:
        prev_sib[nx] = pv


@njit(cache=True, inline="always")
def _link(x, p, first_child, next_sib, prev_sib):
    c = first_child[p]
    next_sib[x] = c
    prev_sib[x] = -1
    if c != -1:
        prev_sib[c] = x
    first_child[p] = x


@njit(cache=True)
def _simplex_core(a_tail, a_head, ac, flow, in_tree,
                  parent, pred_arc, depth, first_child, next_sib, prev_sib,
                  pot, root, n_art, tol, feas_tol, phase_one,
                  pricing, block_size, iters, max_iter, stall_limit):
    """One simplex phase under costs ac; mutates the basis in place.

    Returns (status, iterations) with status 0 = priced out (optimal for
    this phase), 1 = phase-1 flow routed, 2 = iteration limit,
    3 = unbounded.  pricing: 0 = Dantzig full scan, 1 = blockwise Dantzig.
    """
    n = parent.shape[0]
    m = a_tail.shape[0]
    m_real = m - n_art
    stack = np.empty(n, np.int64)
    stamp = np.zeros(n, np.int64)
    mark = 0
    cyc_a = np.empty(2 * n + 1, np.int64)
    cyc_s = np.empty(2 * n + 1, np.float64)
    bu = np.empty(n, np.int64)
    bv = np.empty(n, np.int64)
    path = np.empty(n, np.int64)
    arcs_up = np.empty(n, np.int64)

    # node potentials from scratch under this phase's costs
    pot[root] = 0.0
    top = 0
    c = first_child[root]
    while c != -1:
        stack[top] = c
        top += 1
        c = next_sib[c]
    while top > 0:
        top -= 1
        x = stack[top]
        a = pred_arc[x]
        p = parent[x]
        if a_tail[a] == p:
            pot[x] = pot[p] + ac[a]
        else:
            pot[x] = pot[p] - ac[a]
        c = first_child[x]
        while c != -1:
            stack[top] = c
            top += 1
            c = next_sib[c]

    status = 0
    stall = 0
    scan_pos = 0
    while True:
        if iters >= max_iter:
            status = 2
            break
        # the phase-1 objective cannot drop below zero: stop the moment
        # every root arc is empty instead of pricing out the leftovers
        if phase_one and (iters & 31) == 0:
            tot = 0.0
            for a in range(m_real, m):
                tot += flow[a]
            if tot <= feas_tol:
                status = 1
                break

        enter = -1
        if stall > stall_limit:
            # Bland: lowest-index arc with negative reduced cost
            for a in range(m):
                if not in_tree[a]:
                    r = ac[a] - pot[a_head[a]] + pot[a_tail[a]]
                    if r < -tol:
                        enter = a
                        break
        elif pricing == 0:
            best = -tol
            for a in range(m):
                if not in_tree[a]:
                    r = ac[a] - pot[a_head[a]] + pot[a_tail[a]]
                    if r < best:
                        best = r
                        enter = a
        else:
            # blockwise Dantzig: best arc of the first violating block,
            # resuming where the previous scan stopped
            scanned = 0
            best = -tol
            pos = scan_pos
            while scanned < m:
                lim = pos + block_size
                if lim > m:
                    lim = m
                for a in range(pos, lim):
                    if not in_tree[a]:
                        r = ac[a] - pot[a_head[a]] + pot[a_tail[a]]
                        if r < best:
                            best = r
                            enter = a
                scanned += lim - pos
                pos = 0 if lim >= m else lim
                if enter >= 0:
                    break
            scan_pos = pos
        if enter < 0:
            break

        # cycle closed by the entering arc: equalize depths, walk to the apex
        u = a_tail[enter]
        v = a_head[enter]
        pu = u
        pv = v
        ku = 0
        kv = 0
        while depth[pu] > depth[pv]:
            bu[ku] = pred_arc[pu]
            ku += 1
            pu = parent[pu]
        while depth[pv] > depth[pu]:
            bv[kv] = pred_arc[pv]
            kv += 1
            pv = parent[pv]
        while pu != pv:
            bu[ku] = pred_arc[pu]
            ku += 1
            pu = parent[pu]
            bv[kv] = pred_arc[pv]
            kv += 1
            pv = parent[pv]
        nc = 0
        cyc_a[nc] = enter
        cyc_s[nc] = 1.0
        nc += 1
        cn = u
        for k in range(ku):  # u-side arcs run against the push direction
            a = bu[k]
            cyc_s[nc] = -1.0 if a_tail[a] == cn else 1.0
            cyc_a[nc] = a
            nc += 1
            cn = parent[cn]
        cn = v
        for k in range(kv):  # v-side arcs run with it
            a = bv[k]
            cyc_s[nc] = 1.0 if a_tail[a] == cn else -1.0
            cyc_a[nc] = a
            nc += 1
            cn = parent[cn]

        # ratio test: tightest arc whose flow the push would drain
        theta = np.inf
        leave = -1
        for k in range(nc):
            if cyc_s[k] < 0.0:
                a = cyc_a[k]
                if flow[a] < theta:
                    theta = flow[a]
                    leave = a
        if leave < 0:
            status = 3
            break
        iters += 1
        stall = stall + 1 if theta <= tol else 0
        if theta > 0.0:
            for k in range(nc):
                flow[cyc_a[k]] += theta * cyc_s[k]
        flow[leave] = 0.0

        # basis exchange: cut below the leaving arc, re-hang along the path
        in_tree[leave] = False
        in_tree[enter] = True
        lt = a_tail[leave]
        q = lt if pred_arc[lt] == leave else a_head[leave]
        _unlink(q, parent, first_child, next_sib, prev_sib)
        mark += 1
        top = 0
        stack[top] = q
        top += 1
        while top > 0:
            top -= 1
            x = stack[top]
            stamp[x] = mark
            c = first_child[x]
            while c != -1:
                stack[top] = c
                top += 1
                c = next_sib[c]
        if stamp[u] == mark:
            w_in = u
            w_out = v
        else:
            w_in = v
            w_out = u
        plen = 0
        x = w_in
        while True:
            path[plen] = x
            arcs_up[plen] = pred_arc[x]
            plen += 1
            if x == q:
                break
            x = parent[x]
        for k in range(plen - 1):
            _unlink(path[k], parent, first_child, next_sib, prev_sib)
        parent[w_in] = w_out
        pred_arc[w_in] = enter
        _link(w_in, w_out, first_child, next_sib, prev_sib)
        for k in range(plen - 1):
            b = path[k + 1]
            a2 = path[k]
            parent[b] = a2
            pred_arc[b] = arcs_up[k]
            _link(b, a2, first_child, next_sib, prev_sib)

        # depth and potential over the whole reattached subtree
        top = 0
        stack[top] = w_in
        top += 1
        while top > 0:
            top -= 1
            x = stack[top]
            p = parent[x]
            a = pred_arc[x]
            depth[x] = depth[p] + 1
            if a_tail[a] == p:
                pot[x] = pot[p] + ac[a]
            else:
                pot[x] = pot[p] - ac[a]
            c = first_child[x]
            while c != -1:
                stack[top] = c
                top += 1
                c = next_sib[c]

    return status, iters


def solve_network_arrays(
    cost,
    tail,
    head,
    supply,
    demand,
    pricing="dantzig",
    init="paired",
    big_m_scale=1e4,
    block_size=None,
    max_iter=None,
    warm_tree=None,
):
    """Two-phase primal network simplex on bipartite nodes 0..ns-1 (supply)
    and ns..ns+nd-1 (demand), plus an artificial root node.

    Phase 1 minimizes total flow on the root arcs under 0/1 surrogate costs
    (its optimum is exactly the mass that cannot be routed); phase 2
    restarts from that feasible tree with the real costs.  Splitting the
    phases keeps big-M prices out of the arithmetic until the artificial
    flow is already settled.

    tail/head index arcs as supply-node -> demand-node (head already offset
    by ns).  Pricing rules, both deterministic:
      dantzig  full scan every pivot, most negative reduced cost, lowest
               index on ties
      block    blockwise Dantzig (partial pricing): scan fixed blocks
               cyclically from where the last scan stopped and take the
               best arc of the first violating block; a full wrap with no
               find certifies optimality
    Bland's rule takes over after STALL_LIMIT consecutive degenerate pivots
    and stays until a pivot moves mass again.

    init: "paired" puts every self arc (i -> demand i) plus one root arc
    per node pair into the starting tree (requires a full diagonal);
    "northwest" uses the classic staircase (requires the complete bipartite
    arc set); "artificial" starts from the all-root-arc tree.

    warm_tree: tree_arcs from a previous solution on the SAME arc layout;
    the spanning tree is rebuilt and its flows recomputed for the new
    marginals.  Falls back to the cold init when those flows go negative
    (the old basis is not primal feasible any more).  A warm start that is
    already fully routed skips phase 1.
    """
    t_begin = time.perf_counter()
    cost = np.asarray(cost, dtype=float)
    tail = np.asarray(tail, dtype=np.int64)
    head = np.asarray(head, dtype=np.int64)
    supply = np.asarray(supply, dtype=float)
    demand = np.asarray(demand, dtype=float)
    ns, nd = len(supply), len(demand)
    root = ns + nd
    n_nodes = ns + nd + 1
    m_real = len(cost)

    c_max = float(cost.max()) if m_real else 1.0
    big_m = big_m_scale * (1.0 + c_max)
    # artificial arcs: i -> root for each supply, root -> k for each demand
    a_tail = np.concatenate([tail, np.arange(ns), np.full(nd, root)])
    a_head = np.concatenate([head, np.full(ns, root), ns + np.arange(nd)])
    a_cost = np.concatenate([cost, np.full(ns + nd, big_m)])
    m = len(a_cost)
    art_s = m_real + np.arange(ns)  # supply -> root
    art_d = m_real + ns + np.arange(nd)  # root -> demand

    if pricing not in ("dantzig", "block"):
        raise ValueError(f"unknown pricing {pricing!r}")
    pricing_code = 0 if pricing == "dantzig" else 1
    if block_size is None:
        block_size = max(64, 8 * int(np.sqrt(m)))
    if max_iter is None:
        max_iter = 200 * n_nodes + 20 * m

    flow = np.zeros(m)
    in_tree = np.zeros(m, dtype=bool)
    tree = _Tree(n_nodes)

    warmed = False
    if warm_tree is not None:
        warmed = _rebuild_basis(
            tree, flow, in_tree, np.asarray(warm_tree, dtype=np.int64),
            a_tail, a_head, a_cost, supply, demand, root,
        )
        if not warmed:  # stale basis: reset and fall through to the cold init
            flow[:] = 0.0
            in_tree[:] = False
            tree = _Tree(n_nodes)

    if warmed:
        pass
    elif init == "paired":
        self_arc = np.flatnonzero((a_head[:m_real] - a_tail[:m_real]) == ns)
        if len(self_arc) != ns or ns != nd:
            raise ValueError("paired init needs one self arc per node pair")
        order = np.argsort(a_tail[self_arc])
        self_arc = self_arc[order]
        diag = np.minimum(supply, demand)
        flow[self_arc] = diag
        in_tree[self_arc] = True
        res_s = supply - diag
        res_d = demand - diag
        use_d = res_d > res_s  # route the leftover through whichever side has it
        for i in range(ns):
            if use_d[i]:
                arc = art_d[i]
                flow[arc] = res_d[i]
                in_tree[arc] = True
                tree.attach(ns + i, root, arc, big_m, forward=True)
                tree.attach(i, ns + i, self_arc[i], cost[self_arc[i]], forward=False)
            else:
                arc = art_s[i]
                flow[arc] = res_s[i]
                in_tree[arc] = True
                tree.attach(i, root, arc, big_m, forward=False)
                tree.attach(ns + i, i, self_arc[i], cost[self_arc[i]], forward=True)
    elif init == "northwest":
        if m_real != ns * nd or not (
            np.array_equal(tail, np.repeat(np.arange(ns), nd))
            and np.array_equal(head, ns + np.tile(np.arange(nd), ns))
        ):
            raise ValueError("northwest init needs the complete bipartite arc set")
        stair = _northwest_staircase(supply, demand)
        anchor = art_s[0]
        in_tree[anchor] = True
        tree.attach(0, root, anchor, big_m, forward=False)
        seen = {0}
        for i, j, t in stair:
            arc = i * nd + j
            flow[arc] = t
            in_tree[arc] = True
            if i in seen:
                tree.attach(ns + j, i, arc, cost[arc], forward=True)
            else:
                tree.attach(i, ns + j, arc, cost[arc], forward=False)
                seen.add(i)
    elif init == "artificial":
        flow[art_s] = supply
        flow[art_d] = demand
        in_tree[art_s] = True
        in_tree[art_d] = True
        for i in range(ns):
            tree.attach(i, root, art_s[i], big_m, forward=False)
        for k in range(nd):
            tree.attach(ns + k, root, art_d[k], big_m, forward=True)
    else:
        raise ValueError(f"unknown init {init!r}")

    c_feas = np.concatenate([np.zeros(m_real), np.ones(ns + nd)])
    feas_tol = 1e-12 * max(1.0, float(supply.sum()))

    phases = []
    if float(flow[m_real:].sum()) > feas_tol:
        phases.append(c_feas)
    phases.append(a_cost)

    status = "optimal"
    iters = 0
    for ac in phases:
        code, iters = _simplex_core(
            a_tail, a_head, ac, flow, in_tree,
            tree.parent, tree.pred_arc, tree.depth,
            tree.first_child, tree.next_sib, tree.prev_sib, tree.pot,
            root, ns + nd, 1e-11 * (1.0 + float(ac.max())), feas_tol,
            ac is c_feas, pricing_code, block_size, iters, max_iter,
            STALL_LIMIT,
        )
        if code == 2:
            status = "iteration_limit"
            break
        if code == 3:
            raise ArithmeticError("unbounded pivot in a transportation problem")

    pot = tree.pot
    x = flow[:m_real].copy()
    parked_s = flow[art_s].copy()
    parked_d = flow[art_d].copy()
    # report duals as if the last demand constraint had been dropped
    shift = pot[ns + nd - 1] if nd else 0.0
    duals = np.concatenate([shift - pot[:ns], pot[ns : ns + nd] - shift])
    return LpSolution(
        x=x,
        duals=duals,
        objective=float(cost @ x),
        status=status,
        iterations=iters,
        parked_supply=parked_s,
        parked_demand=parked_d,
        solve_seconds=time.perf_counter() - t_begin,
        tree_arcs=np.flatnonzero(in_tree),
    )


def solve_network(problem, **kwargs):
    """Network simplex entry point for an assembled TransportProblem."""
    ns = len(problem.supply)
    kwargs.setdefault("init", "northwest" if problem.kind == "global" else "paired")
    kwargs.setdefault("pricing", "block" if problem.kind == "global" else "dantzig")
    return solve_network_arrays(
        problem.cost,
        problem.from_node,
        ns + problem.to_node,
        problem.supply,
        problem.demand,
        **kwargs,
    )


# ---------------------------------------------------------------------------
# dense reference solver


def _dense_simplex_phase(c, A, b, basis, B_inv, tol, max_iter, phase_one_count=0):
    """Revised simplex core; mutates basis/B_inv, returns (status, iters).

    Dantzig pricing with a Bland fallback after a degenerate stall; the
    basis inverse is eta-updated and refreshed periodically.
    """
    m, n = A.shape
    iters = 0
    stall = 0
    while iters < max_iter:
        xb = B_inv @ b
        y = c[basis] @ B_inv
        rc = c - y @ A
        rc[basis] = 0.0
        if stall > STALL_LIMIT:
            neg = rc < -tol
            if not neg.any():
                return "optimal", iters
            e = int(np.argmax(neg))
        else:
            e = int(np.argmin(rc))
            if rc[e] >= -tol:
                return "optimal", iters
        u = B_inv @ A[:, e]
        pos = u > tol
        if not pos.any():
            return "unbounded", iters
        ratios = np.full(m, np.inf)
        ratios[pos] = xb[pos] / u[pos]
        # prefer kicking out phase-1 artificials on ties
        t = ratios.min()
        ties = np.flatnonzero(ratios <= t + 1e-13)
        leave_pos = ties[np.argmax(basis[ties])] if phase_one_count else ties[0]
        stall = stall + 1 if t <= tol else 0
        basis[leave_pos] = e
        # eta update of the inverse
        piv = u[leave_pos]
        eta = -u / piv
        eta[leave_pos] = 1.0 / piv
        row = B_inv[leave_pos].copy()
        B_inv += np.outer(eta, row)
        B_inv[leave_pos] = row / piv
        iters += 1
        if iters % 200 == 0:  # periodic refactorization for stability
            B_inv[:] = np.linalg.inv(A[:, basis])
    return "iteration_limit", iters


def solve_dense(c, M, b, max_iter=200_000):
    """Two-phase revised simplex for min c.x s.t. Mx = b, x >= 0.

    Expects M with full row rank (redundant transportation rows already
    dropped by the caller).  Returns primal solution, duals for the given
    rows, and a status of optimal / infeasible / iteration_limit.
    """
    t_begin = time.perf_counter()
    c = np.asarray(c, dtype=float)
    M = np.asarray(M, dtype=float)
    b = np.asarray(b, dtype=float).copy()
    m, n = M.shape
    sign = np.where(b < 0, -1.0, 1.0)
    A1 = M * sign[:, None]
    b1 = b * sign
    tol = 1e-10 * (1.0 + float(np.abs(b).max() if m else 0.0))

    # phase 1: artificial identity basis
    A_ext = np.hstack([A1, np.eye(m)])
    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    basis = np.arange(n, n + m)
    B_inv = np.eye(m)
    status, it1 = _dense_simplex_phase(
        c1, A_ext, b1, basis, B_inv, tol, max_iter, phase_one_count=m
    )
    B_inv = np.linalg.inv(A_ext[:, basis])
    if status == "iteration_limit":
        x = np.zeros(n)
        return LpSolution(
            x=x, duals=np.zeros(m), objective=0.0, status=status, iterations=it1
        )
    resid = float(c1[basis] @ (B_inv @ b1))
    if resid > 1e-7 * (1.0 + abs(b1).sum()):
        return LpSolution(
            x=np.zeros(n),
            duals=np.zeros(m),
            objective=0.0,
            status="infeasible",
            iterations=it1,
            solve_seconds=time.perf_counter() - t_begin,
        )
    # pivot any zero-flow artificials out of the basis where possible
    for pos in np.flatnonzero(basis >= n):
        row = B_inv[pos] @ A1
        pivot_col = -1
        for j in range(n):
            if j not in basis and abs(row[j]) > 1e-9:
                pivot_col = j
                break
        if pivot_col >= 0:
            u = B_inv @ A1[:, pivot_col]
            piv = u[pos]
            r = B_inv[pos].copy()
            B_inv -= np.outer(u, r) / piv
            B_inv[pos] = r / piv
            basis[pos] = pivot_col

    if np.any(basis >= n):
        raise ArithmeticError("rank-deficient constraints: drop redundant rows first")

    # phase 2 on the original costs
    tol2 = 1e-10 * (1.0 + float(np.abs(c).max() if n else 0.0))
    status, it2 = _dense_simplex_phase(c, A1, b1, basis, B_inv, tol2, max_iter)
    B_inv = np.linalg.inv(A1[:, basis])
    xb = B_inv @ b1
    x = np.zeros(n)
    x[basis] = xb
    x[np.abs(x) < 1e-13] = 0.0
    duals = (c[basis] @ B_inv) * sign
    return LpSolution(
        x=x,
        duals=duals,
        objective=float(c @ x),
        status="optimal" if status == "optimal" else status,
        iterations=it1 + it2,
        solve_seconds=time.perf_counter() - t_begin,
    )
