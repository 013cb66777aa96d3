"""Command-line driver: fit, reconstruct, flows, errors, bench.

Thin sequential plumbing over the library; parallelism lives in the
pipeline's --workers knob.  Every command puts its outputs under one run
directory together with an echoed configuration manifest, and exits
nonzero on any error.
"""

import argparse
import datetime
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import dmd as dmd_mod
from . import io as io_mod
from .dmd import SnapshotSet, interpolate_series, load_model, save_model
from .grid import build_topology, movement_count
from .linalg import economy_svd
from .pipeline import (
    CouplingConfig,
    chain_transport,
    error_dmd_reference,
    error_matrices,
    error_presence,
    plans_to_flowfield,
    run_coupling,
)
from .testdata import (
    AdvectionSpec,
    BurgersSpec,
    advection_exact,
    advection_grid,
    advection_snapshots,
    burgers_solve,
)
from .transport import assemble_global, assemble_local, make_cost


def _parse_cost(text):
    """'euclidean' | 'penalized:eps' | 'anisotropic:lx,ly' -> (kind, params)."""
    kind, _, arg = text.partition(":")
    if kind == "euclidean":
        if arg:
            raise ValueError("euclidean cost takes no parameters")
        return kind, {}
    if kind == "penalized":
        return kind, ({"epsilon": float(arg)} if arg else {})
    if kind == "anisotropic":
        if not arg:
            return kind, {}
        lx, ly = (float(v) for v in arg.split(","))
        return kind, {"lx": lx, "ly": ly}
    raise ValueError(f"unknown cost {text!r}")


def _cost_label(kind, params):
    if not params:
        return kind
    inner = ",".join(f"{k}={v!r}" for k, v in sorted(params.items()))
    return f"{kind}({inner})"


def _open_run_dir(out):
    run = Path(out)
    run.mkdir(parents=True, exist_ok=True)
    return run


def _write_manifest(run_dir, entries):
    stamped = {"timestamp": datetime.datetime.now().isoformat()}
    stamped.update(entries)
    io_mod.write_manifest(stamped, run_dir / "manifest.txt")


def _load_source(path):
    """Sniff a model file vs a raster file by its magic bytes."""
    with open(path, "rb") as fh:
        head = fh.read(16)
    if head.startswith(b"MASSFLOW-DMD"):
        return "model", load_model(path)
    return "rasters", io_mod.read_rasters(path)


def _print_table(headers, rows, stream=None):
    stream = stream or sys.stdout
    cells = [headers] + [[str(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    for r in cells:
        stream.write("  ".join(v.rjust(w) for v, w in zip(r, widths)) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_fit(a):
    t_begin = time.time()
    snaps = io_mod.read_rasters(a.rasters)
    run = _open_run_dir(a.out)
    model = dmd_mod.fit(snaps, rank=a.rank, energy=a.energy)
    save_model(model, run / "model.bin")

    spectrum = economy_svd(snaps.data[:, :-1], energy=1.0)
    residual = dmd_mod.fit_residual(model, snaps)
    with open(run / "fit_report.txt", "w") as fh:
        fh.write(f"rank_used {model.rank}\n")
        fh.write(f"fitting_residual {residual:.17g}\n")
        for i, s in enumerate(spectrum.sigma):
            fh.write(f"sigma {i} {s:.17g}\n")
    _write_manifest(run, {
        "command": "fit",
        "input": a.rasters,
        "rank": a.rank if a.rank is not None else "auto",
        "energy": a.energy if a.energy is not None else "default",
        "dt_data": snaps.dt,
        "value_unit": snaps.value_unit,
        "wall_seconds": f"{time.time() - t_begin:.3f}",
    })
    print(f"fitted rank {model.rank} model; fitting residual {residual:.6g}")
    print(f"outputs in {run}")
    return 0


def cmd_reconstruct(a):
    t_begin = time.time()
    model = load_model(a.model)
    run = _open_run_dir(a.out)
    dt_fine = a.dt_fine if a.dt_fine is not None else model.dt_fit
    t_end_fit = model.t0 + model.dt_fit * (model.n_fit_frames - 1)
    t0, t1 = a.window if a.window is not None else (model.t0, t_end_fit)
    series = interpolate_series(model, t0, t1, dt_fine, grid=model.grid)
    io_mod.write_rasters(series, run / "rasters.bin")
    _write_manifest(run, {
        "command": "reconstruct",
        "input": a.model,
        "dt_fine": dt_fine,
        "window": f"{t0} {t1}",
        "frames": series.n_frames,
        "clamped_mass": f"{series.clamped_mass:.17g}",
        "wall_seconds": f"{time.time() - t_begin:.3f}",
    })
    print(f"wrote {series.n_frames} frames at dt={dt_fine} to {run / 'rasters.bin'}")
    return 0


def cmd_flows(a):
    t_begin = time.time()
    kind, params = _parse_cost(a.cost)
    source_kind, source = _load_source(a.input)
    if source_kind == "model" and (a.rank is not None or a.energy is not None):
        raise ValueError("model input is already fitted; drop --rank/--energy")
    grid = source.grid
    if grid is None:
        raise ValueError("input carries no grid geometry")
    dt_data = source.dt if source_kind == "rasters" else source.dt_fit
    run = _open_run_dir(a.out)
    topology = build_topology(grid)

    if a.mode == "local":
        if a.vmax is None:
            raise ValueError("--vmax is required in local mode (speed bound)")
        config = CouplingConfig(
            v_max=a.vmax, dt_data=dt_data, rank=a.rank, energy=a.energy,
            cost_kind=kind, cost_params=params, aggregation_window=a.aggregate,
            workers=a.workers, on_infeasible="park" if a.park else "raise",
        )
        plans, details = run_coupling(source, config, return_details=True)
        dt_step = details["dt_fine"]
        clamped = details["fine"].clamped_mass
        solve_seconds = details["solve_seconds"]
    else:
        if source_kind == "rasters":
            frames = source
        else:
            t_end = source.t0 + source.dt_fit * (source.n_fit_frames - 1)
            frames = interpolate_series(source, source.t0, t_end, dt_data, grid=grid)
        cost = make_cost(kind, grid, **params)
        plans, _ = chain_transport(
            frames, "global", cost, grid=grid, workers=a.workers,
        )
        dt_step = dt_data
        clamped = frames.clamped_mass if source_kind == "model" else 0.0
        solve_seconds = float(sum(p.solve_seconds for p in plans))

    field = plans_to_flowfield(plans, topology, a.aggregate, dt_fine=dt_step)
    io_mod.write_plan_table(plans, grid, run / "plans.txt")
    io_mod.write_flowfield(field, grid, run / "arrows.txt", run / "velocities.txt")

    moved = float(sum(p.moved_mass() for p in plans))
    objective = float(sum(p.objective for p in plans))
    parked = float(sum(
        p.parked_supply.sum() for p in plans if p.parked_supply is not None
    ))
    with open(run / "metrics.txt", "w") as fh:
        fh.write(f"steps {len(plans)}\n")
        fh.write(f"moved_mass_total {moved:.17g}\n")
        fh.write(f"objective_total {objective:.17g}\n")
        fh.write(f"parked_mass_total {parked:.17g}\n")
        fh.write(f"clamped_mass_total {clamped:.17g}\n")
    _write_manifest(run, {
        "command": "flows",
        "input": a.input,
        "v_max": a.vmax,
        "dt_data": dt_data,
        "dt_step": dt_step,
        "rank": a.rank if a.rank is not None else "auto",
        "cost": _cost_label(kind, params),
        "mode": a.mode,
        "aggregation_window": a.aggregate,
        "workers": a.workers,
        "cell_width": grid.cell_width,
        "cell_height": grid.cell_height,
        "value_unit": getattr(source, "value_unit", "mass"),
        "wall_seconds": f"{time.time() - t_begin:.3f}",
    })
    print(f"{len(plans)} transport steps; moved mass {moved:.6g}; outputs in {run}")
    return 0


def cmd_errors(a):
    t_begin = time.time()
    lines = []
    if a.kind == "plan":
        kind, params = _parse_cost(a.cost)
        snaps = io_mod.read_rasters(a.inputs[0])
        grid = snaps.grid
        model = dmd_mod.fit(snaps, rank=a.rank, energy=a.energy)
        t_end = snaps.t0 + snaps.dt * (snaps.n_frames - 1)
        recon = interpolate_series(model, snaps.t0, t_end, snaps.dt, grid=grid)
        on_inf = "park" if a.park else "raise"
        if a.mode == "local":
            topology = build_topology(grid)
            cost = make_cost(kind, topology, **params)
            plans_e, _ = chain_transport(
                snaps, "local", cost, topology=topology,
                workers=a.workers, on_infeasible=on_inf)
            plans_d, _ = chain_transport(
                recon, "local", cost, topology=topology,
                workers=a.workers, on_infeasible=on_inf)
            ones = np.ones(grid.node_count())
            layout = assemble_local(ones, ones, cost, topology)
        else:
            cost = make_cost(kind, grid, **params)
            plans_e, _ = chain_transport(
                snaps, "global", cost, grid=grid, workers=a.workers)
            plans_d, _ = chain_transport(
                recon, "global", cost, grid=grid, workers=a.workers)
            ones = np.ones(grid.node_count())
            layout = assemble_global(ones, ones, cost, grid)
        value = error_matrices(plans_e, plans_d, layout)
        lines.append(f"plan_error {a.mode} {_cost_label(kind, params)} {value:.17g}")
    elif a.kind == "presence":
        snaps = io_mod.read_rasters(a.inputs[0])
        half = SnapshotSet(
            data=snaps.data[:, ::2].copy(), t0=snaps.t0, dt=2 * snaps.dt,
            grid=snaps.grid, value_unit=snaps.value_unit)
        model = dmd_mod.fit(half, rank=a.rank, energy=a.energy)
        t_end = snaps.t0 + snaps.dt * (snaps.n_frames - 1)
        recon = interpolate_series(
            model, snaps.t0, t_end, snaps.dt, clamp_negative=False, grid=snaps.grid)
        value = error_presence(snaps.data, recon.data)
        lines.append(f"presence_error {value:.17g}")
    elif a.kind == "dmd":
        ref = io_mod.read_rasters(a.inputs[0])
        cand_kind, cand = _load_source(a.inputs[1])
        if cand_kind == "model":
            t_end = ref.t0 + ref.dt * (ref.n_frames - 1)
            recon = interpolate_series(
                cand, ref.t0, t_end, ref.dt, clamp_negative=False, grid=ref.grid)
            cand_data = recon.data
        else:
            cand_data = cand.data
        value, series = error_dmd_reference(ref.data, cand_data)
        lines.append(f"dmd_error {value:.17g}")
        for t, e in zip(ref.times(), series):
            lines.append(f"dmd_error_at {t:.17g} {e:.17g}")
    else:
        raise ValueError(f"unknown error kind {a.kind!r}")

    report = "\n".join(lines) + "\n"
    sys.stdout.write(report)
    if a.out:
        run = _open_run_dir(a.out)
        with open(run / "report.txt", "w") as fh:
            fh.write(report)
        _write_manifest(run, {
            "command": "errors",
            "kind": a.kind,
            "inputs": " ".join(a.inputs),
            "wall_seconds": f"{time.time() - t_begin:.3f}",
        })
    return 0


# ---------------------------------------------------------------------------
# bench drivers (also used by the acceptance tests)


def bench_advection(sizes=(20, 30, 40), rank=20, workers=None, log=None):
    """Advection error/timing comparison: one row per grid size.

    For each N x N grid over [-2,2]^2: data spacing dt = dx/2, fine step
    dx/4 (so the coarse spacing is twice the fine one), rank-20 fit; both
    the adjacent-only chains and the all-pairs chains (cost distance^1.1)
    run on the same fine-step frames, comparing exact-solution plans
    against DMD-reconstruction plans under one solver configuration.
    """
    if workers is None:
        workers = min(8, os.cpu_count() or 1)
    log = log or (lambda msg: None)
    rows = []
    for n in sizes:
        grid = advection_grid(n)
        h = grid.cell_width
        dt_data = h / 2.0
        dt_fine = h / 4.0
        spec = AdvectionSpec(grid=grid)
        snaps = advection_snapshots(spec, dt_data)
        r_fit = min(rank, snaps.n_frames - 1)
        log(f"[bench] N={n}: {snaps.n_frames} frames, rank {r_fit}, "
            f"local chain at dt={dt_fine:g}")

        config = CouplingConfig(
            v_max=float(np.hypot(*spec.velocity)), dt_data=dt_data, rank=r_fit,
            cost_kind="euclidean", dt_fine=dt_fine, on_infeasible="park",
            warm_chain=True)
        plans_dmd_l, details = run_coupling(snaps, config, return_details=True)
        topology = details["topology"]
        cost_l = details["cost"]
        fine_times = details["fine"].times()
        exact_fine = SnapshotSet(
            data=np.column_stack([advection_exact(spec, t) for t in fine_times]),
            t0=0.0, dt=dt_fine, grid=grid)
        plans_exact_l, book_l = chain_transport(
            exact_fine, "local", cost_l, topology=topology,
            on_infeasible="park", warm_chain=True)
        ones = np.ones(grid.node_count())
        layout_l = assemble_local(ones, ones, cost_l, topology)
        e_local = error_matrices(plans_exact_l, plans_dmd_l, layout_l)
        local_seconds = details["solve_seconds"]
        log(f"[bench] N={n}: E_local={e_local:.4f} "
            f"({local_seconds:.2f}s over {len(plans_dmd_l)} solves)")

        cost_g = make_cost("penalized", grid, epsilon=0.1)
        plans_dmd_g, book_g = chain_transport(
            details["fine"], "global", cost_g, grid=grid, workers=workers)
        plans_exact_g, _ = chain_transport(
            exact_fine, "global", cost_g, grid=grid, workers=workers)
        layout_g = assemble_global(ones, ones, cost_g, grid)
        e_global = error_matrices(plans_exact_g, plans_dmd_g, layout_g)
        global_seconds = float(sum(p.solve_seconds for p in plans_dmd_g))
        log(f"[bench] N={n}: E_global={e_global:.4f} "
            f"({global_seconds:.2f}s over {len(plans_dmd_g)} solves)")

        coords = grid.node_coords()
        disp = np.zeros(2)
        weight = 0.0
        for p in plans_dmd_l:
            off = p.from_node != p.to_node
            d = coords[p.to_node[off]] - coords[p.from_node[off]]
            disp += (p.mass[off, None] * d).sum(axis=0)
            weight += float(p.supply.sum())
        mean_velocity = disp / (dt_fine * weight)

        all_plans = plans_dmd_l + plans_exact_l + plans_dmd_g + plans_exact_g
        parked = float(sum(
            p.parked_supply.sum() for p in all_plans
            if p.parked_supply is not None))
        book_err = max(
            abs(abs(rec["imbalance"]) - rec["injected"])
            for rec in book_l + book_g + details["bookkeeping"])
        rows.append({
            "n": n,
            "dx": h,
            "dt_data": dt_data,
            "dt_fine": dt_fine,
            "rank": r_fit,
            "e_local": e_local,
            "e_global": e_global,
            "local_seconds": local_seconds,
            "global_seconds": global_seconds,
            "exact_local_seconds": float(
                sum(p.solve_seconds for p in plans_exact_l)),
            "exact_global_seconds": float(
                sum(p.solve_seconds for p in plans_exact_g)),
            "local_variables": movement_count(grid),
            "global_variables": grid.node_count() ** 2,
            "mean_velocity": (float(mean_velocity[0]), float(mean_velocity[1])),
            "max_residual": max(p.residuals for p in all_plans),
            "total_mass": float(snaps.data[:, 0].sum()),
            "bookkeeping_err": book_err,
            "parked_mass": parked,
            "clamped_mass": details["fine"].clamped_mass,
        })
    return rows


def bench_burgers(spacings=(0.1, 0.05, 0.025, 0.0125), rank=9, rank_sweep=20,
                  log=None):
    """DMD-only study on the viscous Burgers reference solution.

    One stiff reference solve at the finest spacing; the coarser datasets
    are its nested subsamples.  Returns the per-spacing errors (plus
    per-time series) at the fixed rank and the error-vs-rank sweep on the
    finest dataset.
    """
    log = log or (lambda msg: None)
    ref_dt = min(spacings)
    ref = burgers_solve(BurgersSpec(), ref_dt)
    t_end = ref.t0 + ref.dt * (ref.n_frames - 1)
    log(f"[bench] burgers reference: {ref.n_frames} frames, dt={ref_dt}")

    by_spacing = []
    for s in sorted(spacings, reverse=True):
        stride = int(round(s / ref_dt))
        if abs(stride * ref_dt - s) > 1e-12:
            raise ValueError(f"spacing {s} is not a multiple of the finest {ref_dt}")
        sub = SnapshotSet(
            data=ref.data[:, ::stride].copy(), t0=ref.t0, dt=s, grid=ref.grid)
        model = dmd_mod.fit(sub, rank=min(rank, sub.n_frames - 1))
        recon = interpolate_series(
            model, ref.t0, t_end, ref_dt, clamp_negative=False, grid=ref.grid)
        err, series = error_dmd_reference(ref.data, recon.data)
        by_spacing.append(
            {"spacing": s, "stride": stride, "frames": sub.n_frames,
             "error": err, "series": series})
        log(f"[bench] burgers dt={s}: E={err:.3e}")

    per_rank = []
    for r in range(1, rank_sweep + 1):
        model = dmd_mod.fit(ref, rank=r)
        recon = interpolate_series(
            model, ref.t0, t_end, ref_dt, clamp_negative=False, grid=ref.grid)
        err, _ = error_dmd_reference(ref.data, recon.data)
        per_rank.append(err)
    log(f"[bench] burgers rank sweep 1..{rank_sweep} done")
    return {"times": ref.times(), "by_spacing": by_spacing, "per_rank": per_rank}


def cmd_bench(a):
    t_begin = time.time()
    log = lambda msg: print(msg, file=sys.stderr)  # noqa: E731
    out_lines = []
    if a.experiment in ("advection-table1", "advection-table2"):
        sizes = (40,) if a.experiment == "advection-table2" else (20, 30, 40)
        rows = bench_advection(sizes=sizes, workers=a.workers, log=log)
        if a.experiment == "advection-table1":
            headers = ["N", "dx", "dt", "E_global", "E_local"]
            table = [
                [r["n"], f"{r['dx']:g}", f"{r['dt_data']:g}",
                 f"{r['e_global']:.4f}", f"{r['e_local']:.4f}"]
                for r in rows
            ]
        else:
            headers = ["N", "vars_global", "vars_local",
                       "seconds_global", "seconds_local", "ratio"]
            table = [
                [r["n"], r["global_variables"], r["local_variables"],
                 f"{r['global_seconds']:.2f}", f"{r['local_seconds']:.2f}",
                 f"{r['global_seconds'] / max(r['local_seconds'], 1e-9):.1f}"]
                for r in rows
            ]
        _print_table(headers, table)
        out_lines = ["  ".join(headers)] + ["  ".join(str(v) for v in t) for t in table]
        vel = rows[-1]["mean_velocity"]
        print(f"mean reconstructed velocity at N={rows[-1]['n']}: "
              f"({vel[0]:.4f}, {vel[1]:.4f})")
    elif a.experiment == "burgers-fig8":
        res = bench_burgers(log=log)
        headers = ["dt", "frames", "E_dmd"]
        table = [
            [f"{r['spacing']:g}", r["frames"], f"{r['error']:.4e}"]
            for r in res["by_spacing"]
        ]
        _print_table(headers, table)
        print("\nerror vs rank (finest dataset):")
        rank_table = [
            [r + 1, f"{e:.4e}"] for r, e in enumerate(res["per_rank"])
        ]
        _print_table(["rank", "E_dmd"], rank_table)
        out_lines = (
            ["  ".join(headers)]
            + ["  ".join(str(v) for v in t) for t in table]
            + ["rank  E_dmd"]
            + ["  ".join(str(v) for v in t) for t in rank_table]
        )
    else:
        raise ValueError(f"unknown experiment {a.experiment!r}")

    if a.out:
        run = _open_run_dir(a.out)
        with open(run / "bench_table.txt", "w") as fh:
            fh.write("\n".join(out_lines) + "\n")
        _write_manifest(run, {
            "command": "bench",
            "experiment": a.experiment,
            "workers": a.workers,
            "wall_seconds": f"{time.time() - t_begin:.3f}",
        })
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(
        prog="massflow",
        description="Infer mass flow fields from density snapshot rasters.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit the linear surrogate to rasters")
    f.add_argument("rasters")
    f.add_argument("--rank", type=int)
    f.add_argument("--energy", type=float)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("reconstruct", help="evaluate a fitted model on a fine grid")
    r.add_argument("model")
    r.add_argument("--dt-fine", type=float, dest="dt_fine")
    r.add_argument("--window", type=float, nargs=2, metavar=("T0", "T1"))
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    fl = sub.add_parser("flows", help="recover transport plans and velocities")
    fl.add_argument("input", help="raster file or fitted model")
    fl.add_argument("--vmax", type=float)
    fl.add_argument("--cost", default="euclidean",
                    help="euclidean | penalized:eps | anisotropic:lx,ly")
    fl.add_argument("--mode", choices=("local", "global"), default="local")
    fl.add_argument("--aggregate", type=int, default=1, metavar="K",
                    help="fine steps merged per reporting window")
    fl.add_argument("--rank", type=int)
    fl.add_argument("--energy", type=float)
    fl.add_argument("--workers", type=int, default=1)
    fl.add_argument("--park", action="store_true",
                    help="keep unroutable mass in place instead of failing")
    fl.add_argument("--out", required=True)
    fl.set_defaults(func=cmd_flows)

    e = sub.add_parser("errors", help="comparison metrics as a text report")
    e.add_argument("--kind", choices=("plan", "presence", "dmd"), required=True)
    e.add_argument("inputs", nargs="+")
    e.add_argument("--vmax", type=float)
    e.add_argument("--cost", default="euclidean")
    e.add_argument("--mode", choices=("local", "global"), default="local")
    e.add_argument("--rank", type=int)
    e.add_argument("--energy", type=float)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--park", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_errors)

    b = sub.add_parser("bench", help="regenerate the desk-scale experiments")
    b.add_argument("--experiment", required=True,
                   choices=("advection-table1", "advection-table2", "burgers-fig8"))
    b.add_argument("--workers", type=int, default=None)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # all library failures exit nonzero with a message
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
