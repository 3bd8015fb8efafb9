"""Thin SVD, rank selection by cumulative singular-value mass, and rescaling.

All routines compute in float64.  Singular values at or below
ZERO_CUTOFF * sigma_max are treated as numerically zero; this is what makes
the 100% mass threshold return the count of nonzero singular values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateSpectrumError, NumericalError, ShapeError, ValidationError

__all__ = [
    "ZERO_CUTOFF",
    "SpectralDecomposition",
    "ConflictBoundReport",
    "svd",
    "rank_keep",
    "rescale_singular_values",
    "truncate_reconstruct",
    "nuclear_norm",
    "numerical_rank",
    "conflict_bound",
]

# Relative cutoff below which a singular value counts as zero.
ZERO_CUTOFF = 1e-12


def _as_matrix(matrix: np.ndarray, name: str) -> np.ndarray:
    mat = np.asarray(matrix, dtype=np.float64)
    if mat.ndim != 2:
        raise ShapeError(f"'{name}': expected a 2-D matrix, got ndim={mat.ndim}")
    if not np.all(np.isfinite(mat)):
        raise ValidationError(f"'{name}' contains non-finite elements")
    return mat


def _as_spectrum(sigma: Sequence[float] | np.ndarray) -> np.ndarray:
    sig = np.asarray(sigma, dtype=np.float64)
    if sig.ndim != 1 or sig.size == 0:
        raise ShapeError("singular-value vector must be 1-D and non-empty")
    if not np.all(np.isfinite(sig)):
        raise ValidationError("singular-value vector contains non-finite entries")
    if np.any(sig < 0):
        raise ValidationError("singular values must be non-negative")
    if np.any(np.diff(sig) > 0):
        raise ValidationError("singular values must be sorted non-increasing")
    return sig


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    """Thin SVD triple: source = u @ diag(sigma) @ v.T with orig_shape (m, n)."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray
    orig_shape: tuple[int, int]

    def __post_init__(self) -> None:
        if self.u.ndim != 2 or self.v.ndim != 2 or self.sigma.ndim != 1:
            raise ShapeError("decomposition factors have wrong dimensionality")
        m, n = self.orig_shape
        k = self.sigma.shape[0]
        if self.u.shape != (m, k) or self.v.shape != (n, k):
            raise ShapeError(
                f"factor shapes {self.u.shape}/{self.v.shape} inconsistent with "
                f"orig_shape {self.orig_shape} and k={k}"
            )
        if k > min(m, n):
            raise ShapeError(f"k={k} exceeds min(m, n)={min(m, n)}")
        _as_spectrum(self.sigma)

    @property
    def k(self) -> int:
        return int(self.sigma.shape[0])


def svd(matrix: np.ndarray, name: str = "matrix") -> SpectralDecomposition:
    """Thin SVD with a deterministic sign convention.

    Each left singular vector is flipped so its largest-magnitude entry is
    positive (first such entry on ties); the matching right vector flips too,
    so the product is unchanged.
    """
    mat = _as_matrix(matrix, name)
    try:
        u, s, vh = np.linalg.svd(mat, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed to converge for '{name}'") from exc
    v = vh.T
    anchor_rows = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[anchor_rows, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return SpectralDecomposition(u=u * signs, sigma=s, v=v * signs, orig_shape=mat.shape)


def numerical_rank(sigma: Sequence[float] | np.ndarray) -> int:
    """Count of singular values above ZERO_CUTOFF * sigma_max."""
    sig = _as_spectrum(sigma)
    smax = float(sig[0])
    if smax <= 0.0:
        return 0
    return int(np.count_nonzero(sig > ZERO_CUTOFF * smax))


def rank_keep(sigma: Sequence[float] | np.ndarray, eta: float) -> int:
    """Smallest rank whose cumulative singular-value mass reaches eta percent.

    Equality counts as reaching the threshold.  The result never exceeds the
    numerical rank, so eta=100 returns the count of nonzero singular values.

    Raises DegenerateSpectrumError for an all-zero spectrum (callers decide
    how to treat zero matrices).
    """
    sig = _as_spectrum(sigma)
    if not 0.0 < eta <= 100.0:
        raise ValueError(f"eta must lie in (0, 100], got {eta}")
    smax = float(sig[0])
    if smax <= 0.0:
        raise DegenerateSpectrumError("all singular values are zero; rank rule undefined")
    nnz = int(np.count_nonzero(sig > ZERO_CUTOFF * smax))
    cum = np.cumsum(sig)
    target = (eta / 100.0) * cum[-1]
    r = int(np.searchsorted(cum, target, side="left")) + 1
    return max(1, min(r, nnz))


def rescale_singular_values(sigma: Sequence[float] | np.ndarray, r: int) -> np.ndarray:
    """Scale the kept singular values so their sum matches the full spectrum's.

    Returns the first r values multiplied by sum(sigma) / sum(sigma[:r]);
    at r = len(sigma) the factor is exactly 1.
    """
    sig = _as_spectrum(sigma)
    if not isinstance(r, (int, np.integer)) or not 1 <= r <= sig.size:
        raise ValueError(f"r must be an integer in [1, {sig.size}], got {r!r}")
    total = float(np.sum(sig))
    kept = float(np.sum(sig[:r]))
    if kept <= 0.0:
        raise DegenerateSpectrumError("kept singular values sum to zero; nothing to rescale")
    return sig[:r] * (total / kept)


def truncate_reconstruct(
    decomp: SpectralDecomposition,
    r: int,
    rescaled_sigma: Sequence[float] | np.ndarray,
) -> np.ndarray:
    """Dense rank-r reconstruction sum_k u_k * sigma'_k * v_k^T."""
    if not isinstance(r, (int, np.integer)) or not 1 <= r <= decomp.k:
        raise ValueError(f"r must be an integer in [1, {decomp.k}], got {r!r}")
    resc = np.asarray(rescaled_sigma, dtype=np.float64)
    if resc.shape != (r,):
        raise ValueError(f"rescaled_sigma must have length r={r}, got shape {resc.shape}")
    if not np.all(np.isfinite(resc)):
        raise ValidationError("rescaled singular values contain non-finite entries")
    return (decomp.u[:, :r] * resc) @ decomp.v[:, :r].T


def nuclear_norm(matrix: np.ndarray, name: str = "matrix") -> float:
    """Sum of singular values (Schatten 1-norm)."""
    mat = _as_matrix(matrix, name)
    try:
        s = np.linalg.svd(mat, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed to converge for '{name}'") from exc
    return float(np.sum(s))


@dataclass(frozen=True)
class ConflictBoundReport:
    """Spectral-space interference bound for one (A, B, x) configuration.

    lhs is ||B x||_2 for x built from A's right singular vectors; bound is
    rank_b * beta * sqrt(rank_a) and must dominate lhs.  Truncating B to
    rank trunc_rank lowers the bound to trunc_rank * beta * sqrt(rank_a).
    """

    rank_a: int
    rank_b: int
    beta: float
    lhs: float
    bound: float
    bound_after_truncation: float
    trunc_rank: int

    def __post_init__(self) -> None:
        if self.lhs > self.bound + 1e-9 * max(1.0, self.bound):
            raise NumericalError(
                f"interference bound violated: ||Bx|| = {self.lhs} exceeds {self.bound}"
            )
        expected_after = self.trunc_rank * self.beta * math.sqrt(self.rank_a)
        if abs(self.bound_after_truncation - expected_after) > 1e-9 * max(1.0, expected_after):
            raise NumericalError("truncated bound inconsistent with its defining product")


def conflict_bound(
    a: np.ndarray,
    b: np.ndarray,
    coeffs: Sequence[float] | np.ndarray,
    trunc_rank: int,
) -> ConflictBoundReport:
    """Evaluate the interference bound ||Bx|| <= rank_b * beta * sqrt(rank_a).

    x = sum_j coeffs[j] * v_j where v_j are A's right singular vectors;
    beta = max over |sigma_i(B) * coeffs[j]|.  coeffs must have exactly one
    entry per nonzero singular value of A.
    """
    a_mat = _as_matrix(a, "a")
    b_mat = _as_matrix(b, "b")
    if a_mat.shape[1] != b_mat.shape[1]:
        raise ShapeError(
            f"column counts differ: a has {a_mat.shape[1]}, b has {b_mat.shape[1]}"
        )
    alpha = np.asarray(coeffs, dtype=np.float64).ravel()
    if not np.all(np.isfinite(alpha)):
        raise ValidationError("coeffs contain non-finite entries")

    dec_a = svd(a_mat, name="a")
    dec_b = svd(b_mat, name="b")
    rank_a = numerical_rank(dec_a.sigma)
    rank_b = numerical_rank(dec_b.sigma)
    if alpha.size != rank_a:
        raise ValueError(
            f"coeffs length {alpha.size} does not match numerical rank of a ({rank_a})"
        )
    if not isinstance(trunc_rank, (int, np.integer)) or not 0 <= trunc_rank <= rank_b:
        raise ValueError(f"trunc_rank must be an integer in [0, {rank_b}], got {trunc_rank!r}")

    if rank_a > 0:
        x = dec_a.v[:, :rank_a] @ alpha
        max_alpha = float(np.max(np.abs(alpha)))
    else:
        x = np.zeros(a_mat.shape[1])
        max_alpha = 0.0
    lhs = float(np.linalg.norm(b_mat @ x))
    sigma_b_max = float(dec_b.sigma[0]) if rank_b > 0 else 0.0
    beta = sigma_b_max * max_alpha if (rank_a > 0 and rank_b > 0) else 0.0
    root_rank_a = math.sqrt(rank_a)
    return ConflictBoundReport(
        rank_a=rank_a,
        rank_b=rank_b,
        beta=beta,
        lhs=lhs,
        bound=rank_b * beta * root_rank_a,
        bound_after_truncation=trunc_rank * beta * root_rank_a,
        trunc_rank=int(trunc_rank),
    )
