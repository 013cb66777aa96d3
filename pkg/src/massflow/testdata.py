"""Reference dataset generators: analytic advection, a finite-difference
viscous Burgers solver, and synthetic mobility-style presence rasters.

All generators are pure functions of their arguments (and a seed where one
applies), so regenerating a dataset is always bit-reproducible.
"""

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .dmd import SnapshotSet
from .grid import GridSpec

BUMP_RADIUS = np.sqrt(0.5)  # support radius of the advection initial bump


@dataclass(frozen=True)
class AdvectionSpec:
    """Translating bump on [-2, 2]^2: u(x, t) = u0(x - v t)."""

    grid: GridSpec
    velocity: tuple = (0.5, 0.5)
    horizon: float = 2.0


def advection_grid(n, lo=-2.0, hi=2.0):
    """Square n x n grid of cell centers covering [lo, hi]^2."""
    h = (hi - lo) / n
    return GridSpec(
        n_rows=n, n_cols=n, cell_width=h, cell_height=h,
        origin=(lo + h / 2, hi - h / 2),
    )


def advection_exact(spec: AdvectionSpec, t):
    """Cell-center samples of the translated bump at time t.

    The closed form is only the solution while the support stays strictly
    inside the domain, so a boundary-active time is rejected.
    """
    v = np.asarray(spec.velocity, dtype=float)
    g = spec.grid
    lo_x = g.origin[0] - g.cell_width / 2
    hi_x = lo_x + g.n_cols * g.cell_width
    hi_y = g.origin[1] + g.cell_height / 2
    lo_y = hi_y - g.n_rows * g.cell_height
    cx, cy = v * t  # bump center
    if (cx - BUMP_RADIUS < lo_x or cx + BUMP_RADIUS > hi_x
            or cy - BUMP_RADIUS < lo_y or cy + BUMP_RADIUS > hi_y):
        raise ValueError(f"bump support leaves the domain at t={t}; shorten the horizon")
    xy = g.node_coords() - v * t
    return np.maximum(0.5 - xy[:, 0] ** 2 - xy[:, 1] ** 2, 0.0)


def advection_snapshots(spec: AdvectionSpec, dt):
    """SnapshotSet of exact advection frames at spacing dt over the horizon."""
    n_steps = int(round(spec.horizon / dt))
    cols = [advection_exact(spec, j * dt) for j in range(n_steps + 1)]
    return SnapshotSet(data=np.column_stack(cols), t0=0.0, dt=dt, grid=spec.grid)


@dataclass(frozen=True)
class BurgersSpec:
    """Viscous Burgers on [0,1]^2, zero boundary, u0 = sin(pi x) sin(pi y)."""

    n: int = 40  # interior nodes per side
    viscosity: float = 0.01
    horizon: float = 1.0


def _burgers_rhs(spec: BurgersSpec, h):
    n, eps = spec.n, spec.viscosity

    def rhs(_t, y):
        u = np.zeros((n + 2, n + 2))
        u[1:-1, 1:-1] = y.reshape(n, n)
        ux = (u[1:-1, 2:] - u[1:-1, :-2]) / (2 * h)
        uy = (u[2:, 1:-1] - u[:-2, 1:-1]) / (2 * h)
        lap = (
            u[1:-1, 2:] + u[1:-1, :-2] + u[2:, 1:-1] + u[:-2, 1:-1]
            - 4 * u[1:-1, 1:-1]
        ) / h**2
        core = u[1:-1, 1:-1]
        return (eps * lap - core * (ux + uy)).ravel()

    return rhs


def burgers_grid(n):
    h = 1.0 / (n + 1)
    return GridSpec(n_rows=n, n_cols=n, cell_width=h, cell_height=h, origin=(h, 1.0 - h))


def burgers_solve(spec: BurgersSpec, output_dt, rtol=1e-6, atol=1e-8):
    """Integrate with an adaptive embedded Runge-Kutta pair; snapshots come
    from the integrator's dense output at the requested spacing.

    Spatial part: second-order central differences for both the diffusion
    and the convective term u (u_x + u_y) on the interior nodes, zero
    Dirichlet boundary.
    """
    n = spec.n
    h = 1.0 / (n + 1)
    x = h * np.arange(1, n + 1)
    xx, yy = np.meshgrid(x, x, indexing="ij")
    y0 = (np.sin(np.pi * xx) * np.sin(np.pi * yy)).ravel()

    n_out = int(round(spec.horizon / output_dt))
    times = output_dt * np.arange(n_out + 1)
    sol = solve_ivp(
        _burgers_rhs(spec, h),
        (0.0, spec.horizon),
        y0,
        method="RK45",
        t_eval=times,
        rtol=rtol,
        atol=atol,
    )
    if not sol.success or not np.all(np.isfinite(sol.y)):
        t_bad = sol.t[-1] if len(sol.t) else 0.0
        raise ArithmeticError(f"integration unstable near t={t_bad}: {sol.message}")
    sup0 = np.abs(y0).max()
    worst = np.abs(sol.y).max()
    if worst > sup0 + 1e-6:  # discrete maximum principle
        raise ArithmeticError(f"maximum principle violated: {worst} > {sup0}")
    return SnapshotSet(data=sol.y, t0=0.0, dt=output_dt, grid=burgers_grid(n))


def synth_presence(grid: GridSpec, days=1, seed=0, total_mass=1.3e6, noise=0.01):
    """Synthetic people-presence rasters: 96 frames per day (15-minute
    spacing), smooth daily profile with a night trough, a daytime plateau
    and an evening decline, modulated per cell, plus seeded relative noise.
    """
    rng = np.random.default_rng(seed)
    n = grid.node_count()
    frames = 96 * days
    tau = (np.arange(frames) % 96) / 96.0  # fraction of the day

    # daily profile: trough around 4am, plateau 9h-17h, evening decline
    day = (
        0.55
        + 0.45 / (1 + np.exp(-(tau - 0.33) * 28))
        - 0.35 / (1 + np.exp(-(tau - 0.74) * 22))
        - 0.12 * np.exp(-((tau - 0.17) ** 2) / 0.004)
    )

    # smooth positive spatial field from a few low-frequency modes
    rows, cols = np.divmod(np.arange(n), grid.n_cols)
    r = rows / max(grid.n_rows - 1, 1)
    c = cols / max(grid.n_cols - 1, 1)
    base = np.ones(n)
    for _ in range(4):
        kr, kc = rng.integers(1, 4, size=2)
        phase_r, phase_c = rng.uniform(0, 2 * np.pi, size=2)
        base += 0.5 * np.cos(np.pi * kr * r + phase_r) * np.cos(np.pi * kc * c + phase_c)
    base = np.abs(base) + 0.2

    # cells differ in how strongly they follow the commuting cycle
    response = 0.3 + 0.7 * rng.uniform(size=n)
    data = base[:, None] * (1.0 + response[:, None] * (day[None, :] - day.mean()))
    data *= 1.0 + noise * rng.standard_normal((n, frames))
    np.maximum(data, 0.0, out=data)
    data *= total_mass / data[:, 0].sum()
    return SnapshotSet(data=data, t0=0.0, dt=900.0, grid=grid, value_unit="persons")
