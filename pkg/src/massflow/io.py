"""File formats: density raster sets, plan tables, arrow files, manifests.

Everything is text-first except the optional binary64 raster payload; the
binary mode round-trips bit-exactly, text mode keeps 17 significant digits
(enough to reproduce any float64 exactly on read-back).
"""

import numpy as np

from .dmd import SnapshotSet
from .grid import GridSpec

_RASTER_MAGIC = "massflow-raster 1"


class RasterFormatError(Exception):
    """Base class for raster file problems."""


class RasterManifestError(RasterFormatError):
    """Missing, duplicate, or unparseable manifest entries."""


class RasterCountError(RasterFormatError):
    """Payload holds a different number of values than the manifest says."""


class RasterValueError(RasterFormatError):
    """Non-finite values in the payload."""


def write_rasters(snapshots: SnapshotSet, path, payload="binary64", value_unit=None):
    """Write a snapshot set: text manifest, then one frame per record."""
    if payload not in ("binary64", "text"):
        raise ValueError(f"unknown payload mode {payload!r}")
    if value_unit is None:
        value_unit = snapshots.value_unit
    grid = snapshots.grid
    if grid is None:
        raise ValueError("snapshot set has no grid attached")
    n = grid.node_count()
    frames = snapshots.data
    if frames.shape[0] != n:
        raise ValueError("snapshot rows do not match the grid")
    head = [
        _RASTER_MAGIC,
        f"n_rows {grid.n_rows}",
        f"n_cols {grid.n_cols}",
        f"cell_width {grid.cell_width!r}",
        f"cell_height {grid.cell_height!r}",
        f"origin_x {grid.origin[0]!r}",
        f"origin_y {grid.origin[1]!r}",
        f"t0 {snapshots.t0!r}",
        f"dt {snapshots.dt!r}",
        f"frame_count {frames.shape[1]}",
        f"value_unit {value_unit}",
        f"payload {payload}",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        if payload == "binary64":
            fh.write(np.ascontiguousarray(frames.T, dtype="<f8").tobytes())
        else:
            lines = [
                " ".join(f"{v:.17g}" for v in frames[:, j]) for j in range(frames.shape[1])
            ]
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


def read_rasters(path) -> SnapshotSet:
    with open(path, "rb") as fh:
        first = fh.readline().decode("ascii", errors="replace").rstrip("\n")
        if first != _RASTER_MAGIC:
            raise RasterManifestError(f"{path}: not a raster file (bad first line)")
        manifest = {}
        while True:
            line = fh.readline().decode("ascii", errors="replace").rstrip("\n")
            if not line:
                raise RasterManifestError(f"{path}: manifest ended before payload line")
            key, _, value = line.partition(" ")
            if not value:
                raise RasterManifestError(f"{path}: malformed manifest line {line!r}")
            if key in manifest:
                raise RasterManifestError(f"{path}: duplicate manifest key {key!r}")
            manifest[key] = value
            if key == "payload":
                break
        required = [
            "n_rows", "n_cols", "cell_width", "cell_height",
            "t0", "dt", "frame_count", "value_unit", "payload",
        ]
        missing = [k for k in required if k not in manifest]
        if missing:
            raise RasterManifestError(f"{path}: manifest lacks {missing}")
        try:
            n_rows = int(manifest["n_rows"])
            n_cols = int(manifest["n_cols"])
            frame_count = int(manifest["frame_count"])
            cw = float(manifest["cell_width"])
            ch = float(manifest["cell_height"])
            ox = float(manifest.get("origin_x", "0.0"))
            oy = float(manifest.get("origin_y", "0.0"))
            t0 = float(manifest["t0"])
            dt = float(manifest["dt"])
        except ValueError as exc:
            raise RasterManifestError(f"{path}: bad manifest value ({exc})") from exc

        n = n_rows * n_cols
        expected = n * frame_count
        if manifest["payload"] == "binary64":
            raw = fh.read()
            found = len(raw) // 8
            if len(raw) != expected * 8:
                raise RasterCountError(
                    f"{path}: expected {expected} values, found {found}"
                )
            frames = np.frombuffer(raw, dtype="<f8").reshape(frame_count, n).T.copy()
        elif manifest["payload"] == "text":
            body = fh.read().decode("ascii", errors="replace").split()
            if len(body) != expected:
                raise RasterCountError(
                    f"{path}: expected {expected} values, found {len(body)}"
                )
            try:
                flat = np.array([float(v) for v in body])
            except ValueError as exc:
                raise RasterValueError(f"{path}: unparseable value ({exc})") from exc
            frames = flat.reshape(frame_count, n).T
        else:
            raise RasterManifestError(
                f"{path}: unknown payload mode {manifest['payload']!r}"
            )
    if not np.all(np.isfinite(frames)):
        raise RasterValueError(f"{path}: payload contains non-finite values")
    grid = GridSpec(
        n_rows=n_rows, n_cols=n_cols, cell_width=cw, cell_height=ch, origin=(ox, oy)
    )
    return SnapshotSet(
        data=frames, t0=t0, dt=dt, grid=grid, value_unit=manifest["value_unit"]
    )


# ---------------------------------------------------------------------------
# plan tables and flow-field exports

PLAN_TABLE_HEADER = "# t_index from_row from_col to_row to_col mass"


def write_plan_table(plans, grid: GridSpec, path):
    """Text table of all moving flows, one row per arc; self-loops omitted."""
    nc = grid.n_cols
    with open(path, "w") as fh:
        fh.write(PLAN_TABLE_HEADER + "\n")
        for t, plan in enumerate(plans):
            off = plan.from_node != plan.to_node
            for f, to, m in zip(plan.from_node[off], plan.to_node[off], plan.mass[off]):
                fh.write(f"{t} {f // nc} {f % nc} {to // nc} {to % nc} {m:.17g}\n")


def read_plan_table(path, grid: GridSpec):
    """Back-parse a plan table into per-step sparse (from, to, mass) triples."""
    nc = grid.n_cols
    steps = {}
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != PLAN_TABLE_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            t, fr, fc, tr, tc, m = line.split()
            steps.setdefault(int(t), []).append(
                (int(fr) * nc + int(fc), int(tr) * nc + int(tc), float(m))
            )
    return steps


ARROW_HEADER = "# window from_row from_col to_row to_col x y dx dy mass rank"
VELOCITY_HEADER = "# window row col vx vy"


def write_flowfield(field, grid: GridSpec, arrows_path, velocities_path):
    """Plot-ready arrow and velocity tables, one row per arrow / node."""
    nc = grid.n_cols
    coords = grid.node_coords()
    with open(arrows_path, "w") as fh:
        fh.write(ARROW_HEADER + "\n")
        for w in range(field.n_windows):
            fr = field.from_node[w]
            to = field.to_node[w]
            ms = field.mass[w]
            rk = field.mass_rank[w]
            for f, t, m, r in zip(fr, to, ms, rk):
                x, y = coords[f]
                dx, dy = coords[t] - coords[f]
                fh.write(
                    f"{w} {f // nc} {f % nc} {t // nc} {t % nc} "
                    f"{x:.17g} {y:.17g} {dx:.17g} {dy:.17g} {m:.17g} {r}\n"
                )
    with open(velocities_path, "w") as fh:
        fh.write(VELOCITY_HEADER + "\n")
        for w in range(field.n_windows):
            vel = field.velocities[w]
            for j in range(vel.shape[0]):
                if vel[j, 0] == 0.0 and vel[j, 1] == 0.0:
                    continue
                fh.write(f"{w} {j // nc} {j % nc} {vel[j, 0]:.17g} {vel[j, 1]:.17g}\n")


def write_manifest(entries: dict, path):
    """Human-readable key-value run manifest, echoed into output folders."""
    with open(path, "w") as fh:
        for key, value in entries.items():
            fh.write(f"{key} {value}\n")


def read_manifest(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            key, _, value = line.partition(" ")
            out[key] = value
    return out
