"""Dense linear algebra used by EDMD: regularized pseudo-inverses and
nonsymmetric eigendecompositions with biorthogonally scaled eigenvectors."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import scipy.linalg


class NumericsError(ArithmeticError):
    """Raised when a factorization fails or its input is unusable."""


class DefectiveMatrixError(NumericsError):
    def __init__(self, index: int, overlap: float):
        self.index = index
        self.overlap = overlap
        super().__init__(
            f"eigenvector {index} is (numerically) defective: "
            f"|xi* zeta| = {overlap:.3e} before scaling"
        )


DEFAULT_CUTOFF = 1e-12
DEFECT_TOL = 1e-10


def as_matrix(a, name: str = "matrix", dtype=float) -> np.ndarray:
    """Validate a 2-D finite array and return it as a contiguous ndarray."""
    arr = np.asarray(a, dtype=dtype)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return np.ascontiguousarray(arr)


def pseudo_inverse(a, cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via SVD.

    Singular values ``<= cutoff * sigma_max`` are treated as zero.
    """
    if cutoff < 0:
        raise ValueError("cutoff must be nonnegative")
    a = as_matrix(a, "A")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        # LAPACK gesdd does not expose its sweep count; report the shape instead
        raise NumericsError(f"SVD did not converge for {a.shape} matrix: {exc}") from exc
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((a.shape[1], a.shape[0]))
    keep = s > cutoff * s[0]
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (vt.T * s_inv) @ u.T


class Eigendecomposition(NamedTuple):
    """Eigenvalues with right eigenvectors as columns of ``right`` and left
    eigenvectors as columns of ``left``, scaled so ``left.conj().T @ right = I``."""

    values: np.ndarray
    right: np.ndarray
    left: np.ndarray

    def __iter__(self):
        # iterate as (value, right, left) triples
        for k in range(self.values.size):
            yield self.values[k], self.right[:, k], self.left[:, k]

    def __len__(self):
        return self.values.size


def _order(values: np.ndarray, decimals: int = 10) -> np.ndarray:
    # descending modulus, then real part, then imaginary part; rounding keeps
    # conjugate pairs (equal modulus and real part up to rounding) adjacent
    mod = np.round(np.abs(values), decimals)
    re = np.round(values.real, decimals)
    im = values.imag
    return np.lexsort((-im, -re, -mod))


def eig_nonsymmetric(k, defect_tol: float = DEFECT_TOL) -> Eigendecomposition:
    """Eigendecomposition of a square real matrix ``K``.

    Right eigenvectors come from LAPACK (Hessenberg reduction + shifted QR);
    left eigenvectors are the rows of the inverse eigenvector matrix, which makes
    them exactly biorthogonal to the right ones. A matrix whose unit-normalized
    left/right pair has overlap below ``defect_tol`` is reported as defective.
    """
    k = as_matrix(k, "K")
    if k.shape[0] != k.shape[1]:
        raise ValueError(f"K must be square, got {k.shape}")
    try:
        values, right = scipy.linalg.eig(k, right=True, left=False)
    except scipy.linalg.LinAlgError as exc:
        raise NumericsError(f"eigenvalue iteration failed: {exc}") from exc

    order = _order(values)
    values = values[order]
    right = right[:, order]
    right = right / np.linalg.norm(right, axis=0)

    # overlap of unit left/right vectors = 1/||row_k(Z^-1)||; tiny => defective
    try:
        inv = np.linalg.solve(right, np.eye(k.shape[0]))
        row_norms = np.linalg.norm(inv, axis=1)
    except np.linalg.LinAlgError:
        row_norms = np.full(values.size, np.inf)
    with np.errstate(divide="ignore"):
        overlaps = np.where(np.isfinite(row_norms), 1.0 / row_norms, 0.0)
    bad = np.flatnonzero(~(overlaps > defect_tol))
    if bad.size:
        raise DefectiveMatrixError(int(bad[0]), float(overlaps[bad[0]]))

    left = inv.conj().T
    return Eigendecomposition(values, right, left)
