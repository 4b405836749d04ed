"""Stejskal-Tanner signal model, log-linear tensor fitting and synthetic fields."""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .field import FieldFormatError, TensorGrid
from .spd import check_spd, check_sym, matrix_exp

# unit-norm tolerance for gradient directions
UNIT_TOL = 1e-12


class EstimationError(ValueError):
    """The gradient scheme cannot determine all six tensor components."""


@dataclass(frozen=True, eq=False)
class GradientScheme:
    """Gradient directions (rows of ``bvecs``) with their b-values (s/mm^2).

    Entries with ``b = 0`` are reference measurements and may carry a zero
    vector. Every weighted direction is normalized on construction.
    """

    bvecs: np.ndarray
    bvals: np.ndarray

    def __post_init__(self):
        bvecs = np.atleast_2d(np.asarray(self.bvecs, dtype=float))
        bvals = np.atleast_1d(np.asarray(self.bvals, dtype=float))
        if bvecs.shape != (len(bvals), 3):
            raise ValueError(f"bvecs shape {bvecs.shape} does not match {len(bvals)} b-values")
        if np.any(bvals < 0) or not np.all(np.isfinite(bvals)):
            raise ValueError("b-values must be finite and non-negative")
        weighted = bvals > 0
        norms = np.linalg.norm(bvecs[weighted], axis=1)
        if np.any(norms == 0):
            raise ValueError("weighted measurements need a non-zero gradient direction")
        bvecs = bvecs.copy()
        bvecs[weighted] /= norms[:, None]
        object.__setattr__(self, "bvecs", bvecs)
        object.__setattr__(self, "bvals", bvals)

    def __len__(self):
        return len(self.bvals)

    @property
    def weighted(self):
        return self.bvals > 0

    def design_matrix(self):
        """Rows ``-b * [gx^2, gy^2, gz^2, 2gxgy, 2gxgz, 2gygz]`` for b > 0 entries."""
        g = self.bvecs[self.weighted]
        b = self.bvals[self.weighted]
        cols = np.stack(
            [g[:, 0] ** 2, g[:, 1] ** 2, g[:, 2] ** 2,
             2 * g[:, 0] * g[:, 1], 2 * g[:, 0] * g[:, 2], 2 * g[:, 1] * g[:, 2]],
            axis=1,
        )
        return -b[:, None] * cols


def repulsion_directions(n, seed=0, iters=2000):
    """``n`` unit vectors spread over the sphere by antipodal electrostatic repulsion.

    Points and their antipodes repel with a Coulomb potential; gradient steps
    are projected back to the sphere. Deterministic given ``seed``.
    """
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(n, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    step = 0.1
    for _ in range(iters):
        force = np.zeros_like(p)
        for sign in (1.0, -1.0):
            d = p[:, None, :] - sign * p[None, :, :]
            r = np.linalg.norm(d, axis=-1)
            if sign > 0:
                np.fill_diagonal(r, np.inf)
            force += np.sum(d / r[..., None] ** 3, axis=1)
        # tangential component only
        force -= np.sum(force * p, axis=1, keepdims=True) * p
        scale = np.max(np.linalg.norm(force, axis=1))
        p = p + step * force / scale
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        step *= 0.998
    # canonical hemisphere: first non-zero coordinate positive
    flip = np.where(p[:, 2] < 0, -1.0, 1.0)
    return p * flip[:, None]


def default_scheme(n_directions=25, bval=1000.0, seed=0):
    """One ``b = 0`` reference plus ``n_directions`` repulsion directions at ``bval``."""
    g = np.vstack([np.zeros(3), repulsion_directions(n_directions, seed=seed)])
    b = np.concatenate([[0.0], np.full(n_directions, float(bval))])
    return GradientScheme(g, b)


def read_scheme_csv(path):
    """Read ``gx,gy,gz,b`` lines (no header; ``#`` comments allowed)."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if len(row) != 4:
                raise FieldFormatError(f"{path}:{lineno}: expected 4 values, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise FieldFormatError(f"{path}:{lineno}: {exc}") from exc
    arr = np.asarray(rows, dtype=float).reshape(-1, 4)
    return GradientScheme(arr[:, :3], arr[:, 3])


def write_scheme_csv(scheme, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for g, b in zip(scheme.bvecs, scheme.bvals):
            w.writerow([repr(float(v)) for v in (*g, b)])


@dataclass(frozen=True, eq=False)
class DwiSignals:
    """Reference intensity ``s0`` and signals aligned with the scheme entries.

    Both may carry leading voxel dimensions: ``s0`` has shape ``(...)`` and
    ``signals`` has shape ``(..., K)``.
    """

    s0: np.ndarray
    signals: np.ndarray


def st_forward(d, scheme, s0=1.0):
    """Stejskal-Tanner signals ``s0 * exp(-b g^T D g)`` for each scheme entry."""
    d = check_spd(d)
    g = scheme.bvecs
    adc = np.einsum("ki,...ij,kj->...k", g, d, g)
    s0 = np.broadcast_to(np.asarray(s0, dtype=float), d.shape[:-2])
    sig = s0[..., None] * np.exp(-scheme.bvals * adc)
    return DwiSignals(s0=np.array(s0), signals=sig)


def fit_tensor_lls(signals, scheme):
    """Log-linear least-squares tensor estimate.

    Solves ``ln(S_k / S0) = -b_k g_k^T D g_k`` for the six unique components
    over all weighted measurements.

    Raises
    ------
    EstimationError
        If the weighted directions do not determine all six components.
    DomainError-like ValueError
        If any signal or reference intensity is not strictly positive.
    """
    X = scheme.design_matrix()
    if X.shape[0] < 6 or np.linalg.matrix_rank(X) < 6:
        raise EstimationError(
            f"design matrix has rank {np.linalg.matrix_rank(X) if X.size else 0} < 6"
        )
    sig = np.asarray(signals.signals, dtype=float)
    s0 = np.asarray(signals.s0, dtype=float)
    if np.any(sig <= 0) or np.any(s0 <= 0):
        raise ValueError("log-linear fit needs strictly positive signals")
    y = np.log(sig[..., scheme.weighted] / s0[..., None])
    # least-squares via the pseudo-inverse, shared by every voxel
    coef = y @ np.linalg.pinv(X).T
    dxx, dyy, dzz, dxy, dxz, dyz = np.moveaxis(coef, -1, 0)
    return np.stack(
        [np.stack([dxx, dxy, dxz], -1), np.stack([dxy, dyy, dyz], -1),
         np.stack([dxz, dyz, dzz], -1)],
        axis=-2,
    )


def add_rician_noise(signals, sigma, seed):
    """Replace each signal by ``sqrt((S + n1)^2 + n2^2)``, ``n1, n2 ~ N(0, sigma^2)``.

    The reference ``s0`` is left untouched (treated as known).
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    rng = np.random.default_rng(seed)
    s = np.asarray(signals.signals, dtype=float)
    n1 = rng.normal(scale=sigma, size=s.shape)
    n2 = rng.normal(scale=sigma, size=s.shape)
    return DwiSignals(s0=signals.s0, signals=np.sqrt((s + n1) ** 2 + n2**2))


def repair_spd(tensors):
    """Clamp eigenvalues below ``1e-6 * mean(trace) / 3`` up to that floor.

    Tensors already above the floor are returned untouched.
    """
    t = check_sym(tensors)
    floor = 1e-6 * np.mean(np.trace(t, axis1=-2, axis2=-1)) / 3.0
    floor = max(floor, np.finfo(float).tiny)
    w, q = np.linalg.eigh(t)
    bad = w[..., 0] < floor
    if np.any(bad):
        wb = np.maximum(w[bad], floor)
        t = t.copy()
        t[bad] = (q[bad] * wb[:, None, :]) @ np.swapaxes(q[bad], -1, -2)
    return t


def simulate_acquisition(tensors, scheme, noise_sigma, seed, s0=1.0):
    """Push tensors through the signal model, add Rician noise, refit and repair.

    ``noise_sigma`` is absolute (same units as ``s0``); zero skips the noise.
    """
    sig = st_forward(tensors, scheme, s0)
    if noise_sigma > 0:
        sig = add_rician_noise(sig, noise_sigma, seed)
    return repair_spd(fit_tensor_lls(sig, scheme))


def _rotation_from_angles(azimuth, elevation):
    """Orthonormal frames whose first column points at (azimuth, elevation)."""
    ca, sa = np.cos(azimuth), np.sin(azimuth)
    ce, se = np.cos(elevation), np.sin(elevation)
    e1 = np.stack([ce * ca, ce * sa, se], -1)
    e2 = np.stack([-sa, ca, np.zeros_like(sa)], -1)
    e3 = np.cross(e1, e2)
    return np.stack([e1, e2, e3], axis=-1)


def _smooth_random_field(rng, coords, wavelength, n_modes):
    """Sum of ``n_modes`` random plane waves with unit RMS amplitude."""
    out = np.zeros(len(coords))
    ndim = coords.shape[1]
    for _ in range(n_modes):
        direction = rng.normal(size=ndim)
        direction /= np.linalg.norm(direction)
        k = 2 * np.pi / (wavelength * rng.uniform(0.8, 1.25))
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(k * coords @ direction + phase)
    return out * np.sqrt(2.0 / n_modes)


def _traceless_basis():
    b = np.zeros((5, 3, 3))
    b[0] = np.diag([1.0, -1.0, 0.0]) / np.sqrt(2)
    b[1] = np.diag([1.0, 1.0, -2.0]) / np.sqrt(6)
    for k, (i, j) in enumerate([(0, 1), (0, 2), (1, 2)]):
        b[2 + k, i, j] = b[2 + k, j, i] = 1 / np.sqrt(2)
    return b


@dataclass
class SmoothFieldParams:
    """Generator settings for the smooth noisy field.

    The matrix logarithm of the field is a base tensor (``eigenvalues`` in
    mm^2/s, random orientation) plus smooth random perturbations: an
    isotropic part scaled by ``md_amplitude`` (mean diffusivity) and a
    traceless part scaled by ``shape_amplitude`` (anisotropy and
    orientation). ``wavelength`` is in voxels; ``noise`` is the Rician
    sigma as a fraction of ``s0``.
    """

    eigenvalues: tuple = (1.2e-3, 0.4e-3, 0.3e-3)
    md_amplitude: float = 0.8
    shape_amplitude: float = 0.2
    wavelength: float = 8.0
    n_modes: int = 4
    noise: float = 0.003
    s0: float = 1.0
    bval: float = 1000.0
    n_directions: int = 25


def _grid_dims(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) == 2:
        dims = dims + (1,)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValueError(f"bad dims {dims}")
    if any(d < 2 for d in dims[:2]):
        raise ValueError(f"need at least 2 sites along x and y, got {dims}")
    return dims


def smooth_tensor_field(dims, seed, params=None):
    """Noise-free field ``exp(G(z))`` with ``G`` a smooth random symmetric field."""
    params = params or SmoothFieldParams()
    dims = _grid_dims(dims)
    grid = TensorGrid(dims, (1.0, 1.0, 1.0), np.tile(np.eye(3), (np.prod(dims), 1, 1)))
    coords = grid.coordinates()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    md = _smooth_random_field(rng, coords, params.wavelength, params.n_modes)
    shape = np.stack(
        [_smooth_random_field(rng, coords, params.wavelength, params.n_modes) for _ in range(5)],
        axis=-1,
    )
    r0, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    base = r0 @ np.diag(np.log(params.eigenvalues)) @ r0.T
    logs = (
        base
        + params.md_amplitude * md[:, None, None] * np.eye(3)
        + params.shape_amplitude * np.einsum("nc,cij->nij", shape, _traceless_basis())
    )
    return grid.replace(tensors=matrix_exp(logs))


def synth_smooth_field(dims, seed, params=None, return_clean=False):
    """Smooth random DTI field observed through a noisy 25-direction acquisition.

    Parameters
    ----------
    dims : tuple of int
        ``(nx, ny)`` or ``(nx, ny, nz)``.
    seed : int
    params : SmoothFieldParams, optional
    return_clean : bool
        Also return the noise-free generating field.

    Returns
    -------
    TensorGrid or (TensorGrid, TensorGrid)
    """
    clean, scheme, sig = smooth_field_signals(dims, seed, params)
    noisy = clean.replace(tensors=repair_spd(fit_tensor_lls(sig, scheme)))
    return (noisy, clean) if return_clean else noisy


def smooth_field_signals(dims, seed, params=None):
    """Noisy DWI signals of the smooth field, plus the clean field and scheme.

    Returns
    -------
    clean : TensorGrid
    scheme : GradientScheme
    signals : DwiSignals
    """
    params = params or SmoothFieldParams()
    clean = smooth_tensor_field(dims, seed, params)
    scheme = default_scheme(params.n_directions, params.bval)
    sig = st_forward(clean.tensors, scheme, params.s0)
    if params.noise > 0:
        sig = add_rician_noise(sig, params.noise * params.s0, np.random.SeedSequence([seed, 2]))
    return clean, scheme, sig


@dataclass
class CrossingFieldParams:
    """Two straight fibre bundles crossing in the middle of a 2D slice.

    Bundle directions are in-plane angles (radians). ``width`` and
    ``edge`` (bundle half-width and transition softness) are in voxels.
    ``md_amplitude`` scales every compartment's diffusivity by
    ``exp(md_amplitude * s(z))`` with ``s`` a smooth random field of the
    given ``wavelength`` (voxels); 0 gives uniform tissue. ``noise`` is the
    Rician sigma as a fraction of ``s0``.
    """

    angles: tuple = (np.pi / 4, 3 * np.pi / 4)
    fiber_eigenvalues: tuple = (1.7e-3, 0.3e-3, 0.3e-3)
    background: float = 0.8e-3
    width: float = 6.0
    edge: float = 1.5
    md_amplitude: float = 0.7
    wavelength: float = 8.0
    noise: float = 0.003
    s0: float = 1.0
    bval: float = 1000.0
    n_directions: int = 25


def crossing_signals(dims, params, scheme, seed=0):
    """Multi-compartment signals: bundle tensors mixed by soft volume fractions."""
    dims = _grid_dims(dims)
    grid = TensorGrid(dims, (1.0, 1.0, 1.0), np.tile(np.eye(3), (np.prod(dims), 1, 1)))
    xy = grid.coordinates()[:, :2]
    center = (np.asarray(dims[:2], dtype=float) - 1) / 2
    rel = xy - center
    fracs = []
    tensors = []
    for angle in params.angles:
        u = np.array([np.cos(angle), np.sin(angle)])
        normal = np.array([-u[1], u[0]])
        dist = np.abs(rel @ normal)
        fracs.append(1.0 / (1.0 + np.exp((dist - params.width) / params.edge)))
        q = _rotation_from_angles(np.array(angle), np.array(0.0))
        tensors.append((q * np.asarray(params.fiber_eigenvalues)) @ q.T)
    f = np.stack(fracs, axis=-1)
    total = f.sum(axis=-1)
    # background fills whatever the bundles leave; overlapping bundles share the voxel
    scale = np.where(total > 1, 1.0 / np.maximum(total, 1e-300), 1.0)
    f = f * scale[:, None]
    f_bg = np.clip(1.0 - f.sum(axis=-1), 0.0, 1.0)
    if params.md_amplitude:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
        s = _smooth_random_field(rng, grid.coordinates(), params.wavelength, 4)
        md = np.exp(params.md_amplitude * s)[:, None]
    else:
        md = np.ones((grid.n_sites, 1))
    g = scheme.bvecs
    bg = scheme.bvals * params.background * np.sum(g * g, axis=1)
    sig = f_bg[:, None] * np.exp(-md * bg[None, :])
    for k, t in enumerate(tensors):
        adc = np.einsum("ki,ij,kj->k", g, t, g)
        sig = sig + f[:, k : k + 1] * np.exp(-md * (scheme.bvals * adc)[None, :])
    return grid, DwiSignals(s0=np.full(grid.n_sites, params.s0), signals=params.s0 * sig), f


def crossing_field_signals(dims, seed, params=None):
    """Noisy crossing-field signals, plus the clean (noise-free fit) field and scheme."""
    params = params or CrossingFieldParams()
    scheme = default_scheme(params.n_directions, params.bval)
    grid, sig, _ = crossing_signals(dims, params, scheme, seed)
    clean = grid.replace(tensors=repair_spd(fit_tensor_lls(sig, scheme)))
    if params.noise > 0:
        sig = add_rician_noise(sig, params.noise * params.s0, np.random.SeedSequence([seed, 3]))
    return clean, scheme, sig


def synth_crossing_field(dims, seed, params=None, return_clean=False):
    """Crossing-fibre DTI field fitted from noisy multi-compartment signals.

    The noise-free field (``return_clean=True``) is the tensor fit of the
    noise-free mixture signals.
    """
    clean, scheme, sig = crossing_field_signals(dims, seed, params)
    noisy = clean.replace(tensors=repair_spd(fit_tensor_lls(sig, scheme)))
    return (noisy, clean) if return_clean else noisy


def write_dwi(path, dims, s0, scheme, signals):
    """Write a DWI JSON document (one measurement block per scheme entry)."""
    signals = np.asarray(signals, dtype=float).reshape(-1, len(scheme))
    doc = {
        "version": 1,
        "dims": list(dims),
        "s0": np.asarray(s0, dtype=float).ravel().tolist(),
        "measurements": [
            {"g": scheme.bvecs[k].tolist(), "b": float(scheme.bvals[k]),
             "signal": signals[:, k].tolist()}
            for k in range(len(scheme))
        ],
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def read_dwi(path):
    """Inverse of :func:`write_dwi`; returns ``(dims, scheme, DwiSignals)``."""
    try:
        doc = json.loads(Path(path).read_text())
        dims = tuple(int(d) for d in doc["dims"])
        s0 = np.asarray(doc["s0"], dtype=float)
        meas = doc["measurements"]
        g = np.asarray([m["g"] for m in meas], dtype=float)
        b = np.asarray([m["b"] for m in meas], dtype=float)
        sig = np.ascontiguousarray(np.asarray([m["signal"] for m in meas], dtype=float).T)
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise FieldFormatError(f"{path}: malformed DWI file: {exc}") from exc
    if sig.shape != (len(s0), len(b)):
        raise FieldFormatError(f"{path}: signal lengths do not match s0")
    return dims, GradientScheme(g, b), DwiSignals(s0=s0, signals=sig)
