"""Small dense symmetric-matrix helpers used across the package.

Everything here works on plain float64 ndarrays.  Stacked variants accept
arrays of shape ``(..., m, m)`` and vectorize over the leading axes.
"""

import numpy as np

__all__ = [
    "symmetrize",
    "spd_sqrt",
    "spd_inverse",
    "eigh_range",
    "is_correlation_matrix",
]


def symmetrize(a):
    """Return the symmetric part ``(a + a.T) / 2`` (stacked-aware)."""
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def spd_sqrt(a):
    """Symmetric square root of a symmetric positive-definite matrix.

    Computed by eigendecomposition; raises ``LinAlgError`` if any
    eigenvalue is non-positive.
    """
    w, v = np.linalg.eigh(symmetrize(np.asarray(a, dtype=float)))
    if np.any(w <= 0.0):
        raise np.linalg.LinAlgError(
            f"matrix is not positive definite (min eigenvalue {w.min():.3e})"
        )
    return (v * np.sqrt(w)[..., None, :]) @ np.swapaxes(v, -1, -2)


def spd_inverse(a):
    """Inverse of a symmetric matrix via eigendecomposition.

    Returns ``(inv, lam_min, lam_max)``.  The caller decides what to do
    with small or negative eigenvalues; this routine only refuses exact
    zeros (division).
    """
    w, v = np.linalg.eigh(symmetrize(np.asarray(a, dtype=float)))
    if np.any(w == 0.0):
        raise np.linalg.LinAlgError("matrix is exactly singular")
    inv = (v / w[..., None, :]) @ np.swapaxes(v, -1, -2)
    return inv, w[..., 0], w[..., -1]


def eigh_range(a):
    """Smallest and largest eigenvalues of a symmetric matrix (stacked-aware)."""
    w = np.linalg.eigvalsh(symmetrize(np.asarray(a, dtype=float)))
    return w[..., 0], w[..., -1]


def is_correlation_matrix(a, tol=1e-10):
    """True when ``a`` is square, symmetric, unit-diagonal and positive definite."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        return False
    if np.max(np.abs(a - a.T)) > tol:
        return False
    if np.max(np.abs(np.diag(a) - 1.0)) > tol:
        return False
    lam_min, _ = eigh_range(a)
    return bool(lam_min > tol)
