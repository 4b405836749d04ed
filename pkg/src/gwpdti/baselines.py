"""Reference interpolators: component-wise multilinear and log-Euclidean."""

import numpy as np

from .spd import DomainError, is_spd, matrix_exp, matrix_log

# slack for "inside the hull" checks, relative to the grid extent
_HULL_RTOL = 1e-9


def _cell_weights(grid, targets, clamp):
    """Corner flat indices and weights of the enclosing cell for each target.

    Returns ``(idx, w)`` with shapes ``(M, 2**k)`` where ``k`` is the number
    of axes with more than one site.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if targets.shape[1] != 3:
        raise ValueError(f"targets must have shape (M, 3), got {targets.shape}")
    dims = np.asarray(grid.dims)
    spacing = np.asarray(grid.spacing)
    frac = targets / spacing
    upper = dims - 1
    tol = _HULL_RTOL * np.maximum(upper, 1)
    outside = np.any((frac < -tol) | (frac > upper + tol), axis=1)
    if np.any(outside) and not clamp:
        first = int(np.flatnonzero(outside)[0])
        raise DomainError(f"target {targets[first].tolist()} lies outside the source grid")
    frac = np.clip(frac, 0, upper)
    base = np.minimum(np.floor(frac).astype(int), np.maximum(upper - 1, 0))
    t = frac - base
    active = [a for a in range(3) if dims[a] > 1]
    m = len(targets)
    idx = np.zeros((m, 1), dtype=int)
    w = np.ones((m, 1))
    strides = np.array([1, dims[0], dims[0] * dims[1]])
    for a in range(3):
        if a not in active:
            idx = idx + base[:, a : a + 1] * strides[a]
            continue
        lo = (base[:, a] * strides[a])[:, None]
        ta = t[:, a][:, None]
        idx = np.concatenate([idx + lo, idx + lo + strides[a]], axis=1)
        w = np.concatenate([w * (1 - ta), w * ta], axis=1)
    return idx, w


def multilinear(grid, values, targets, clamp=False):
    """Bi/trilinear interpolation of per-site ``values`` (any trailing shape)."""
    idx, w = _cell_weights(grid, targets, clamp)
    v = np.asarray(values)[idx]
    return np.einsum("mc,mc...->m...", w, v)


def linear_interpolate(grid, targets, clamp=False):
    """Interpolate each of the six tensor components independently.

    Parameters
    ----------
    grid : TensorGrid
        Source field.
    targets : array_like, shape (M, 3)
        Physical coordinates; must lie inside the grid unless ``clamp``.
    clamp : bool
        Clamp outside targets onto the grid boundary instead of raising
        (edge-linear interpolation along the remaining axes).

    Returns
    -------
    ndarray, shape (M, 3, 3)
        Not repaired: outputs may fail the SPD check.
    """
    return multilinear(grid, grid.tensors, targets, clamp)


def logeuclid_interpolate(grid, targets, clamp=False):
    """``exp`` of the multilinearly interpolated matrix logarithms."""
    ok = is_spd(grid.tensors)
    if not np.all(ok):
        bad = int(np.flatnonzero(~ok)[0])
        raise DomainError(
            f"source voxel {tuple(grid.indices()[bad].tolist())} is not SPD; "
            "log-Euclidean interpolation needs SPD input"
        )
    logs = matrix_log(grid.tensors)
    return matrix_exp(multilinear(grid, logs, targets, clamp))
