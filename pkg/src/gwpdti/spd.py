"""Small-matrix numerics for 3x3 symmetric (positive definite) tensors.

Tensors are plain ``ndarray`` objects of shape ``(..., 3, 3)``. All functions
broadcast over leading dimensions. The six-component storage order used for
files is ``(dxx, dyy, dzz, dxy, dxz, dyz)``.
"""

from dataclasses import dataclass

import numpy as np

# min eigenvalue must exceed this fraction of max(1, max eigenvalue)
SPD_RTOL = 1e-12

_SIX_ROWS = np.array([0, 1, 2, 0, 0, 1])
_SIX_COLS = np.array([0, 1, 2, 1, 2, 2])


class DomainError(ValueError):
    """Raised when an operation needs an SPD tensor and gets something else."""


def six_to_matrix(six):
    """Expand ``(..., 6)`` component vectors into ``(..., 3, 3)`` matrices."""
    six = np.asarray(six, dtype=float)
    if six.shape[-1] != 6:
        raise ValueError(f"expected 6 components in the last axis, got {six.shape[-1]}")
    out = np.empty(six.shape[:-1] + (3, 3))
    out[..., _SIX_ROWS, _SIX_COLS] = six
    out[..., _SIX_COLS, _SIX_ROWS] = six
    return out


def matrix_to_six(mat):
    """Pack ``(..., 3, 3)`` matrices into ``(..., 6)`` vectors (upper triangle)."""
    mat = np.asarray(mat, dtype=float)
    return mat[..., _SIX_ROWS, _SIX_COLS].copy()


def check_sym(t, name="tensor"):
    """Validate and return a finite symmetric ``(..., 3, 3)`` array.

    The input is symmetrized (average with its transpose) so that round-off
    asymmetry does not propagate.
    """
    t = np.asarray(t, dtype=float)
    if t.ndim < 2 or t.shape[-2:] != (3, 3):
        raise ValueError(f"{name} must have shape (..., 3, 3), got {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError(f"{name} contains non-finite values")
    return 0.5 * (t + np.swapaxes(t, -1, -2))


def is_spd(t):
    """Boolean mask of which tensors pass the SPD check.

    A tensor is SPD iff its smallest eigenvalue exceeds
    ``SPD_RTOL * max(1, largest eigenvalue)``.
    """
    t = check_sym(t)
    w = np.linalg.eigvalsh(t)
    return w[..., 0] > SPD_RTOL * np.maximum(1.0, w[..., -1])


def check_spd(t, name="tensor"):
    """Like :func:`check_sym` but raise :class:`DomainError` for non-SPD input."""
    t = check_sym(t, name)
    ok = is_spd(t)
    if not np.all(ok):
        bad = np.argwhere(~np.atleast_1d(ok))
        raise DomainError(f"{name} is not SPD (first offending index {tuple(bad[0])})")
    return t


@dataclass(frozen=True)
class EigenDecomp3:
    """Eigenvalues sorted descending and matching eigenvector columns."""

    values: np.ndarray
    vectors: np.ndarray

    def reconstruct(self):
        q = self.vectors
        return (q * self.values[..., None, :]) @ np.swapaxes(q, -1, -2)


def _fix_signs(q):
    # largest-magnitude component of each eigenvector made positive
    idx = np.argmax(np.abs(q), axis=-2)
    pick = np.take_along_axis(q, idx[..., None, :], axis=-2)
    return q * np.where(pick < 0, -1.0, 1.0)


def eig(t):
    """Symmetric eigendecomposition with deterministic ordering and signs.

    Parameters
    ----------
    t : array_like, shape (..., 3, 3)
        Symmetric tensors.

    Returns
    -------
    EigenDecomp3
        Eigenvalues ``l1 >= l2 >= l3`` and orthonormal eigenvectors stored as
        columns. Each eigenvector is oriented so its largest-magnitude
        component is positive.
    """
    t = check_sym(t)
    w, q = np.linalg.eigh(t)
    w = w[..., ::-1]
    q = q[..., :, ::-1]
    return EigenDecomp3(values=w, vectors=_fix_signs(q))


def _apply(t, fn):
    w, q = np.linalg.eigh(t)
    return (q * fn(w)[..., None, :]) @ np.swapaxes(q, -1, -2)


def matrix_log(t):
    """Principal matrix logarithm of SPD tensors (via eigendecomposition)."""
    t = check_spd(t)
    return _apply(t, np.log)


def matrix_exp(t):
    """Matrix exponential of symmetric tensors; the result is always SPD."""
    t = check_sym(t)
    return _apply(t, np.exp)


def matrix_power(t, p):
    """Real power ``t**p`` of SPD tensors."""
    t = check_spd(t)
    return _apply(t, lambda w: w**p)


def frob_distance(t1, t2):
    """Frobenius distance ``sqrt(trace((t1 - t2)^T (t1 - t2)))``."""
    t1 = check_sym(t1)
    t2 = check_sym(t2)
    d = t1 - t2
    return np.sqrt(np.sum(d * d, axis=(-2, -1)))


def riem_distance(t1, t2):
    """Affine-invariant Riemannian distance between SPD tensors.

    Computed as ``||log(t1^{-1/2} t2 t1^{-1/2})||_F``, i.e. the root sum of
    squared log generalized eigenvalues of the pair.
    """
    t1 = check_spd(t1, "t1")
    t2 = check_spd(t2, "t2")
    isq = matrix_power(t1, -0.5)
    m = isq @ t2 @ isq
    w = np.linalg.eigvalsh(0.5 * (m + np.swapaxes(m, -1, -2)))
    return np.sqrt(np.sum(np.log(w) ** 2, axis=-1))


def fractional_anisotropy(t):
    """Fractional anisotropy ``sqrt(3/2) * ||l - mean(l)|| / ||l||``."""
    t = check_spd(t)
    w = np.linalg.eigvalsh(t)
    dev = w - w.mean(axis=-1, keepdims=True)
    num = np.sqrt(np.sum(dev**2, axis=-1))
    den = np.sqrt(np.sum(w**2, axis=-1))
    return np.clip(np.sqrt(1.5) * num / den, 0.0, 1.0)


@dataclass(frozen=True)
class Glyph:
    """Ellipsoid ``r^T D^{-1} r = c`` centred at ``center``.

    ``radii`` are sorted descending and ``rotation`` holds the matching axis
    directions as columns.
    """

    center: np.ndarray
    radii: np.ndarray
    rotation: np.ndarray

    def surface_points(self, n=16):
        """Sample ``(m, 3)`` points on the ellipsoid surface (for plotting/tests)."""
        th, ph = np.meshgrid(np.linspace(0, np.pi, n), np.linspace(0, 2 * np.pi, 2 * n))
        unit = np.stack(
            [np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1
        ).reshape(-1, 3)
        return self.center + (unit * self.radii) @ self.rotation.T

    def to_dict(self):
        return {
            "center": self.center.tolist(),
            "radii": self.radii.tolist(),
            "rotation": self.rotation.tolist(),
        }


def ellipsoid_glyph(t, c=1.0, center=(0.0, 0.0, 0.0)):
    """Glyph of a single SPD tensor: semi-axes ``sqrt(c * l_i)`` along eigenvectors."""
    if not c > 0:
        raise ValueError(f"glyph constant must be positive, got {c}")
    t = check_spd(t)
    if t.shape != (3, 3):
        raise ValueError("ellipsoid_glyph takes a single 3x3 tensor")
    dec = eig(t)
    return Glyph(
        center=np.asarray(center, dtype=float),
        radii=np.sqrt(c * dec.values),
        rotation=dec.vectors,
    )
