"""Exact dynamic mode decomposition on snapshot sequences.

fit() learns the low-rank linear surrogate from equispaced snapshots;
evaluate() reconstructs the state at arbitrary (also non-snapshot) times as
a sum of complex exponentials; interpolate_series() materializes a finer
snapshot sequence for the transport stage, clamping negative densities at
that boundary only.
"""

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import GridSpec
from .linalg import economy_svd, eig_dense

# omega sentinel for modes whose discrete eigenvalue is exactly zero:
# exp(-inf * dt) = 0 keeps the lambda/omega consistency identity valid
DECAYED = complex(-np.inf, 0.0)


class ExtrapolationWarning(UserWarning):
    """Evaluation time lies outside the window the model was fitted on."""


@dataclass(frozen=True, eq=False)
class SnapshotSet:
    """Equispaced state snapshots, one per column."""

    data: np.ndarray = field(repr=False)
    t0: float = 0.0
    dt: float = 1.0
    grid: GridSpec | None = None
    clamped_mass: float = 0.0  # total negative mass zeroed when produced by clamping
    value_unit: str = "mass"

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float)
        if d.ndim != 2 or d.shape[1] < 2:
            raise ValueError("need a 2-d matrix with at least two snapshot columns")
        if not np.all(np.isfinite(d)):
            raise ValueError("snapshots contain non-finite values")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "data", d)

    @property
    def n_frames(self):
        return self.data.shape[1]

    def times(self):
        return self.t0 + self.dt * np.arange(self.n_frames)


@dataclass(frozen=True, eq=False)
class DmdModel:
    modes: np.ndarray = field(repr=False)  # N x r complex
    omegas: np.ndarray = field(repr=False)  # continuous exponents, log(lambda)/dt
    lambdas: np.ndarray = field(repr=False)  # discrete eigenvalues
    amplitudes: np.ndarray = field(repr=False)
    rank: int = 0
    dt_fit: float = 1.0
    t0: float = 0.0
    n_fit_frames: int = 0
    grid: GridSpec | None = None

    def evaluate(self, t):
        return evaluate(self, t)


def fit(snapshots: SnapshotSet, rank=None, energy=None, mode_scaling="direct"):
    """Fit the exact-DMD surrogate to a snapshot set.

    mode_scaling selects the mode formula: "direct" uses Y' V S^-1 W, the
    variant "inverse_eigenvalue" additionally divides each mode by its
    eigenvalue.  Amplitudes are refit from the first snapshot either way, so
    reconstructions agree up to conditioning; the direct form avoids
    dividing by near-zero eigenvalues and is the default.
    """
    if mode_scaling not in ("direct", "inverse_eigenvalue"):
        raise ValueError(f"unknown mode_scaling {mode_scaling!r}")
    X = snapshots.data
    n_pairs = X.shape[1] - 1
    if rank is not None and rank > n_pairs:
        raise ValueError(f"rank {rank} exceeds the {n_pairs} snapshot pairs")
    Y = X[:, :-1]
    Yp = X[:, 1:]

    svd = economy_svd(Y, rank=rank, energy=energy)
    r = svd.rank_used
    # r x r projected operator, then its eigenpairs
    YpV = (Yp @ svd.V) / svd.sigma
    a_small = svd.U.T @ YpV
    pairs = eig_dense(a_small)
    lambdas = pairs.values
    modes = YpV.astype(complex) @ pairs.vectors
    if mode_scaling == "inverse_eigenvalue":
        nz = lambdas != 0
        modes[:, nz] = modes[:, nz] / lambdas[nz]

    dt = snapshots.dt
    omegas = np.empty(r, dtype=complex)
    zero = lambdas == 0
    omegas[~zero] = np.log(lambdas[~zero]) / dt  # principal branch
    omegas[zero] = DECAYED

    beta, *_ = np.linalg.lstsq(modes, X[:, 0].astype(complex), rcond=None)
    return DmdModel(
        modes=modes,
        omegas=omegas,
        lambdas=lambdas,
        amplitudes=beta,
        rank=r,
        dt_fit=dt,
        t0=snapshots.t0,
        n_fit_frames=X.shape[1],
        grid=snapshots.grid,
    )


def fit_residual(model: DmdModel, snapshots: SnapshotSet):
    """Frobenius norm of Y' - A Y for the fitted best-fit operator.

    With A = Y' V S^-1 U^T the product A Y collapses to Y' V V^T, so the
    residual is the part of Y' outside the retained right singular space.
    """
    Y = snapshots.data[:, :-1]
    Yp = snapshots.data[:, 1:]
    svd = economy_svd(Y, rank=model.rank)
    return float(np.linalg.norm(Yp - (Yp @ svd.V) @ svd.V.T, "fro"))


def _active(model):
    return np.abs(model.lambdas) > 0


def evaluate(model: DmdModel, t, with_diagnostics=False):
    """Real-part reconstruction sum(beta_i psi_i exp(omega_i (t - t0))).

    Modes with eigenvalue exactly zero are excluded (their exponent is the
    decayed-mode sentinel).  Times outside the fitted window are allowed but
    flagged with ExtrapolationWarning.
    """
    t = float(t)
    if not np.isfinite(t):
        raise ValueError("evaluation time must be finite")
    t_end = model.t0 + model.dt_fit * (model.n_fit_frames - 1)
    if t < model.t0 - 1e-12 or t > t_end + 1e-12:
        warnings.warn(
            f"t={t} lies outside the fitted window [{model.t0}, {t_end}]",
            ExtrapolationWarning,
        )
    keep = _active(model)
    expo = np.exp(model.omegas[keep] * (t - model.t0))
    y = model.modes[:, keep] @ (model.amplitudes[keep] * expo)
    if with_diagnostics:
        re = np.linalg.norm(y.real)
        im = np.linalg.norm(y.imag)
        return y.real, {"imag_norm": im, "imag_ratio": im / max(re, 1e-300)}
    return y.real


def interpolate_series(
    model: DmdModel, t_start, t_end, dt_fine, clamp_negative=True, grid=None
) -> SnapshotSet:
    """Evaluate the model on a uniform fine time grid.

    Columns are evaluate(t_start + j dt_fine) for j = 0..floor((t_end -
    t_start)/dt_fine).  Negative reconstructed densities are clamped to zero
    here, at the transport-facing boundary, and the removed mass is reported
    on the returned set; the model itself stays untouched.
    """
    if dt_fine <= 0:
        raise ValueError("dt_fine must be positive")
    if t_end <= t_start:
        raise ValueError("t_end must exceed t_start")
    n_steps = int(np.floor((t_end - t_start) / dt_fine + 1e-9))
    times = t_start + dt_fine * np.arange(n_steps + 1)

    keep = _active(model)
    scaled = model.modes[:, keep] * model.amplitudes[keep]
    # one matrix product for the whole series: columns exp(omega (t_j - t0))
    expo = np.exp(np.outer(model.omegas[keep], times - model.t0))
    series = (scaled @ expo).real

    clamped = 0.0
    if clamp_negative:
        neg = series < 0
        clamped = float(-series[neg].sum())
        series[neg] = 0.0
    return SnapshotSet(
        data=series, t0=float(t_start), dt=float(dt_fine), grid=grid, clamped_mass=clamped
    )


# ---------------------------------------------------------------------------
# model serialization: self-describing binary, bit-exact round trip

_MAGIC = b"MASSFLOW-DMD\n"
_SCALAR = "complex128"


def save_model(model: DmdModel, path):
    """Write the model to a self-describing binary file.

    ASCII header (byte order, scalar precision, shapes, exact hex floats for
    dt and t0) followed by the raw little-endian array payload in a fixed
    order: modes, omegas, lambdas, amplitudes.
    """
    n, r = model.modes.shape
    header = (
        f"version 1\n"
        f"byteorder little\n"
        f"scalar {_SCALAR}\n"
        f"state_dim {n}\n"
        f"rank {r}\n"
        f"n_fit_frames {model.n_fit_frames}\n"
        f"dt_fit {float(model.dt_fit).hex()}\n"
        f"t0 {float(model.t0).hex()}\n"
    )
    if model.grid is not None:
        g = model.grid
        header += (
            f"grid {g.n_rows} {g.n_cols} {float(g.cell_width).hex()} "
            f"{float(g.cell_height).hex()} "
            f"{float(g.origin[0]).hex()} {float(g.origin[1]).hex()}\n"
        )
    header += "end\n"
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(header.encode("ascii"))
        for arr in (model.modes, model.omegas, model.lambdas, model.amplitudes):
            fh.write(np.ascontiguousarray(arr, dtype="<c16").tobytes())


def load_model(path) -> DmdModel:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a model file (bad magic)")
        fields = {}
        while True:
            line = fh.readline().decode("ascii").strip()
            if line == "end":
                break
            if not line:
                raise ValueError(f"{path}: truncated header")
            key, value = line.split(" ", 1)
            fields[key] = value
        if fields.get("version") != "1":
            raise ValueError(f"{path}: unsupported version {fields.get('version')}")
        if fields.get("byteorder") != "little" or fields.get("scalar") != _SCALAR:
            raise ValueError(f"{path}: unsupported layout")
        n = int(fields["state_dim"])
        r = int(fields["rank"])
        payload = fh.read()
    expected = (n * r + 3 * r) * 16
    if len(payload) != expected:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    buf = np.frombuffer(payload, dtype="<c16")
    modes = buf[: n * r].reshape(n, r).copy()
    omegas = buf[n * r : n * r + r].copy()
    lambdas = buf[n * r + r : n * r + 2 * r].copy()
    amplitudes = buf[n * r + 2 * r :].copy()
    grid = None
    if "grid" in fields:
        nr, nc, cw, ch, ox, oy = fields["grid"].split()
        grid = GridSpec(
            n_rows=int(nr), n_cols=int(nc),
            cell_width=float.fromhex(cw), cell_height=float.fromhex(ch),
            origin=(float.fromhex(ox), float.fromhex(oy)),
        )
    return DmdModel(
        modes=modes,
        omegas=omegas,
        lambdas=lambdas,
        amplitudes=amplitudes,
        rank=r,
        dt_fit=float.fromhex(fields["dt_fit"]),
        t0=float.fromhex(fields["t0"]),
        n_fit_frames=int(fields["n_fit_frames"]),
        grid=grid,
    )
