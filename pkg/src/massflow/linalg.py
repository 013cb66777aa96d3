"""Dense linear-algebra kernels: economy SVD, pseudo-inverse apply, small eig.

The snapshot matrices decomposed here are tall and skinny (N rows, a few
dozen columns), so the SVD goes through the small Gram matrix Y^T Y instead
of an N x N factorization.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

# relative cutoff below which singular values count as numerically zero
SIGMA_CUTOFF = 1e-12

DEFAULT_ENERGY = 0.9999


class RankWarning(UserWarning):
    """Requested fixed rank exceeded the numerical rank and was clipped."""


@dataclass(frozen=True, eq=False)
class EconomySvd:
    U: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)
    V: np.ndarray = field(repr=False)
    rank_used: int = 0


@dataclass(frozen=True, eq=False)
class EigenPairs:
    values: np.ndarray = field(repr=False)
    vectors: np.ndarray = field(repr=False)


def economy_svd(Y, rank=None, energy=None):
    """Truncated economy SVD of a real N x m matrix via the m x m Gram matrix.

    Exactly one truncation policy applies: a fixed rank, an energy threshold
    (smallest k with cumulative sigma^2 fraction >= energy), or the default
    energy threshold when neither is given.  Singular values below
    SIGMA_CUTOFF * sigma_max are always dropped first.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] < 1 or Y.shape[1] < 1:
        raise ValueError("expected a nonempty 2-d matrix")
    if rank is not None and energy is not None:
        raise ValueError("give either rank or energy, not both")

    gram = Y.T @ Y
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    sigma = np.sqrt(np.maximum(evals, 0.0))

    if sigma[0] <= 0.0:
        raise ValueError("no positive singular values")
    num_rank = int(np.sum(sigma > SIGMA_CUTOFF * sigma[0]))

    if rank is not None:
        if rank < 1:
            raise ValueError("rank must be >= 1")
        r = int(rank)
        if r > num_rank:
            warnings.warn(
                f"requested rank {r} exceeds numerical rank {num_rank}; clipped",
                RankWarning,
            )
            r = num_rank
    else:
        tau = DEFAULT_ENERGY if energy is None else float(energy)
        if not 0.0 < tau <= 1.0:
            raise ValueError("energy threshold must lie in (0, 1]")
        frac = np.cumsum(sigma[:num_rank] ** 2) / np.sum(sigma[:num_rank] ** 2)
        r = int(np.searchsorted(frac, tau - 1e-15) + 1)
        r = min(r, num_rank)

    sigma = sigma[:r]
    V = evecs[:, :r]
    U = (Y @ V) / sigma
    return EconomySvd(U=U, sigma=sigma, V=V, rank_used=r)


def pinv_apply(svd: EconomySvd, x):
    """Apply the Moore-Penrose pseudo-inverse V diag(1/sigma) U^T to x."""
    x = np.asarray(x)
    if x.shape[0] != svd.U.shape[0]:
        raise ValueError("vector length does not match the factored matrix")
    return svd.V @ ((svd.U.T @ x) / svd.sigma)


def eig_dense(A):
    """Eigendecomposition of a small dense real matrix, residual-verified.

    Returns unit-norm eigenvectors; complex conjugate pairs come out
    adjacent (guaranteed by the underlying QR iteration for real input).
    Every pair is checked against ||A w - lambda w|| <= 1e-8 ||A||_F.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise ValueError("expected a square matrix")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    try:
        values, vectors = np.linalg.eig(A)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"eigendecomposition did not converge: {exc}") from exc
    values = values.astype(complex, copy=False)
    vectors = vectors.astype(complex, copy=False)
    norms = np.linalg.norm(vectors, axis=0)
    vectors = vectors / norms
    scale = np.linalg.norm(A, "fro")
    resid = np.linalg.norm(A @ vectors - vectors * values, axis=0)
    bad = resid > 1e-8 * max(scale, 1e-300)
    if np.any(bad):
        raise ArithmeticError(
            f"eigenpair residual {resid[bad].max():.3e} exceeds 1e-8 * ||A||_F "
            f"for {int(bad.sum())} of {len(values)} pairs"
        )
    return EigenPairs(values=values, vectors=vectors)
