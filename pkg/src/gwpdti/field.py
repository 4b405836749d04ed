"""Regular tensor grids, the downsample-by-two split, and field files."""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .spd import check_sym, matrix_to_six, six_to_matrix

FIELD_VERSION = 1
ORDER = "row-major-x-fastest"
UNITS = "mm^2/s"


class FieldFormatError(ValueError):
    """Malformed or inconsistent field file / grid."""


@dataclass(frozen=True, eq=False)
class TensorGrid:
    """Tensors on a regular grid with ``x`` the fastest-varying index.

    Attributes
    ----------
    dims : tuple of int
        ``(nx, ny, nz)``; 2D fields use ``nz = 1``.
    spacing : tuple of float
        Voxel size along each axis (mm, or index units when 1).
    tensors : ndarray, shape (nx*ny*nz, 3, 3)
    mask : ndarray of bool or None
        Validity mask, same length as ``tensors``.
    """

    dims: tuple
    spacing: tuple
    tensors: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise FieldFormatError("dims and spacing must have three entries")
        if any(d < 1 for d in dims):
            raise FieldFormatError(f"all dims must be >= 1, got {dims}")
        if any(not (s > 0 and math.isfinite(s)) for s in spacing):
            raise FieldFormatError(f"spacing must be strictly positive, got {spacing}")
        n = dims[0] * dims[1] * dims[2]
        tensors = np.asarray(self.tensors, dtype=float)
        if tensors.shape != (n, 3, 3):
            raise FieldFormatError(
                f"expected {n} tensors for dims {dims}, got array of shape {tensors.shape}"
            )
        tensors = check_sym(tensors, "grid tensors")
        tensors.setflags(write=False)
        mask = self.mask
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (n,):
                raise FieldFormatError(f"mask length {mask.shape} does not match {n} sites")
            mask.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "tensors", tensors)
        object.__setattr__(self, "mask", mask)

    @property
    def n_sites(self):
        return self.tensors.shape[0]

    @property
    def valid(self):
        """Boolean validity per site (all true without a mask)."""
        if self.mask is None:
            return np.ones(self.n_sites, dtype=bool)
        return self.mask

    def indices(self):
        """Integer grid indices ``(n_sites, 3)`` in storage order."""
        nx, ny, nz = self.dims
        iz, iy, ix = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        return np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)

    def flat_index(self, index):
        ix, iy, iz = (int(i) for i in index)
        nx, ny, nz = self.dims
        if not (0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz):
            raise IndexError(f"site index {index} outside dims {self.dims}")
        return ix + nx * (iy + ny * iz)

    def coordinates(self):
        """Coordinates of every site, ``(n_sites, 3)``."""
        return self.indices() * np.asarray(self.spacing)

    def tensor_at(self, index):
        return self.tensors[self.flat_index(index)]

    def replace(self, tensors=None, mask=None):
        return TensorGrid(
            self.dims,
            self.spacing,
            self.tensors if tensors is None else tensors,
            self.mask if mask is None else mask,
        )


def site_coordinates(grid, index):
    """Physical position of a site: ``index * spacing`` with origin at zero."""
    grid.flat_index(index)
    return np.asarray(index, dtype=float) * np.asarray(grid.spacing)


@dataclass(frozen=True)
class HoldoutSplit:
    """Flat site indices (into the full grid) kept for fitting and held out."""

    kept: np.ndarray
    held_out: np.ndarray


def downsample_by_two(grid):
    """Keep sites whose indices are all even; hold out everything else.

    Returns
    -------
    low : TensorGrid
        Grid of the kept sites with dims ``ceil(n / 2)`` and doubled spacing
        along every axis with more than one site.
    split : HoldoutSplit
        Kept and held-out flat indices into ``grid``, restricted to valid sites.
    """
    active = [d for d in grid.dims if d > 1]
    if not active:
        raise FieldFormatError("cannot downsample a single-site grid")
    if any(d < 2 for d in active):
        raise FieldFormatError(f"degenerate dims {grid.dims}")
    idx = grid.indices()
    even = np.all(idx % 2 == 0, axis=1)
    valid = grid.valid
    low_dims = tuple((d + 1) // 2 for d in grid.dims)
    low_spacing = tuple(s * 2 if d > 1 else s for s, d in zip(grid.spacing, grid.dims))
    low = TensorGrid(
        low_dims,
        low_spacing,
        grid.tensors[even],
        None if grid.mask is None else grid.mask[even],
    )
    split = HoldoutSplit(
        kept=np.flatnonzero(even & valid),
        held_out=np.flatnonzero(~even & valid),
    )
    return low, split


def write_field(grid, path):
    """Write ``grid`` as a versioned JSON field file.

    Floats go through :func:`repr`, which round-trips IEEE-754 doubles exactly.
    """
    doc = {
        "version": FIELD_VERSION,
        "units": UNITS,
        "dims": list(grid.dims),
        "spacing": list(grid.spacing),
        "order": ORDER,
        "tensors": matrix_to_six(grid.tensors).tolist(),
    }
    if grid.mask is not None:
        doc["mask"] = [int(m) for m in grid.mask]
    Path(path).write_text(dumps_canonical(doc))


def dumps_canonical(doc):
    """Deterministic JSON: fixed key order given by ``doc``, one tensor per line."""
    lines = ["{"]
    items = list(doc.items())
    for k, (key, value) in enumerate(items):
        sep = "," if k < len(items) - 1 else ""
        if key == "tensors":
            rows = [json.dumps(row) for row in value]
            body = ",\n    ".join(rows)
            lines.append(f'  "tensors": [\n    {body}\n  ]{sep}')
        else:
            lines.append(f"  {json.dumps(key)}: {json.dumps(value)}{sep}")
    lines.append("}")
    return "\n".join(lines) + "\n"


def read_field(path):
    """Parse a field file written by :func:`write_field` (or compatible)."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FieldFormatError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    return field_from_dict(doc, source=str(path))


def field_from_dict(doc, source="<dict>"):
    if not isinstance(doc, dict):
        raise FieldFormatError(f"{source}: top level must be an object")
    version = doc.get("version")
    if version != FIELD_VERSION:
        raise FieldFormatError(f"{source}: unsupported version {version!r}")
    for key in ("dims", "spacing", "tensors"):
        if key not in doc:
            raise FieldFormatError(f"{source}: missing field {key!r}")
    order = doc.get("order", ORDER)
    if order != ORDER:
        raise FieldFormatError(f"{source}: unsupported order {order!r}")
    try:
        six = np.asarray(doc["tensors"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise FieldFormatError(f"{source}: field 'tensors': {exc}") from exc
    if six.size == 0:
        six = six.reshape(0, 6)
    if six.ndim != 2 or six.shape[1] != 6:
        raise FieldFormatError(f"{source}: field 'tensors' must be a list of 6-vectors")
    bad = np.argwhere(~np.isfinite(six))
    if bad.size:
        raise FieldFormatError(f"{source}: non-finite value in tensors[{bad[0][0]}]")
    mask = doc.get("mask")
    try:
        return TensorGrid(doc["dims"], doc["spacing"], six_to_matrix(six), mask)
    except (TypeError, ValueError) as exc:
        raise FieldFormatError(f"{source}: {exc}") from exc
