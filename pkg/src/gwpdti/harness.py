"""Experiment pipeline: synthesize, downsample, interpolate, evaluate, export."""

import csv
import hashlib
import io
import json
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .dmri import CrossingFieldParams, SmoothFieldParams, synth_crossing_field, synth_smooth_field
from .estimators import make_interpolator
from .field import TensorGrid, downsample_by_two, dumps_canonical, read_field, write_field
from .inference import McmcConfig, data_checksum, write_archive
from .spd import ellipsoid_glyph, fractional_anisotropy, frob_distance, is_spd, riem_distance


CONFIG_VERSION = 1
METHODS = ("gwp", "logeuclid", "linear")
METRICS = ("frobenius", "riemannian")
CSV_HEADER = ("method", "metric", "mean", "std", "n", "spd_violations")


class UsageError(ValueError):
    """Inconsistent request (bad config, mismatched sites, bad slice)."""


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the error."""

    def __init__(self, stage, exc):
        super().__init__(f"stage '{stage}' failed: {type(exc).__name__}: {exc}")
        self.stage = stage
        self.error = exc


# --------------------------------------------------------------------------
# configuration


@dataclass
class DatasetSpec:
    """Ground-truth source: ``smooth`` or ``crossing`` synthesis, or a field ``file``."""

    kind: str = "smooth"
    dims: tuple = (15, 15)
    params: dict = field(default_factory=dict)
    path: str = None

    def validate(self):
        if self.kind not in ("smooth", "crossing", "file"):
            raise UsageError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise UsageError("dataset kind 'file' needs a path")
        known = {f.name for f in fields(_PARAM_TYPES.get(self.kind, SmoothFieldParams))}
        extra = set(self.params) - known if self.kind != "file" else set()
        if extra:
            raise UsageError(f"unknown {self.kind} generator parameters {sorted(extra)}")
        return self


_PARAM_TYPES = {"smooth": SmoothFieldParams, "crossing": CrossingFieldParams}


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment run.

    ``seed`` drives both data synthesis and the sampler (it overrides
    ``mcmc["seed"]``).
    """

    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    seed: int = 0
    mcmc: dict = field(default_factory=dict)
    methods: tuple = METHODS
    output_dir: str = None
    glyph_c: float = None
    version: int = CONFIG_VERSION

    def validate(self):
        if self.version != CONFIG_VERSION:
            raise UsageError(f"unsupported config version {self.version}")
        if not self.methods:
            raise UsageError("at least one method is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise UsageError(f"unknown methods {bad}; choose from {list(METHODS)}")
        if len(set(self.methods)) != len(self.methods):
            raise UsageError("methods must be distinct")
        if int(self.seed) < 0:
            raise UsageError("seed must be non-negative")
        self.dataset.validate()
        try:
            self.mcmc_config()
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad mcmc settings: {exc}") from exc
        return self

    def mcmc_config(self):
        return McmcConfig(**{**self.mcmc, "seed": int(self.seed)}).validate()

    def to_dict(self):
        d = asdict(self)
        d["dataset"]["dims"] = list(self.dataset.dims)
        d["methods"] = list(self.methods)
        return d

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise UsageError(f"unknown config keys {sorted(extra)}")
        ds = doc.pop("dataset", {})
        if isinstance(ds, dict):
            ds_known = {f.name for f in fields(DatasetSpec)}
            if set(ds) - ds_known:
                raise UsageError(f"unknown dataset keys {sorted(set(ds) - ds_known)}")
            ds = DatasetSpec(**{**ds, "dims": tuple(ds.get("dims", (15, 15)))})
        cfg = cls(dataset=ds, **doc)
        cfg.methods = tuple(cfg.methods)
        return cfg

    def replace(self, **changes):
        return ExperimentConfig.from_dict({**self.to_dict(), **changes})


def load_config(path):
    """Read a JSON experiment config."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return ExperimentConfig.from_dict(doc)


PRESETS = {
    "quick": dict(dataset=dict(kind="smooth", dims=[15, 15], params={}), seed=1),
    "paper": dict(dataset=dict(kind="smooth", dims=[37, 37], params={}), seed=1),
    "crossing": dict(dataset=dict(kind="crossing", dims=[31, 31], params={}),
                     seed=0),
}


def preset(name, **changes):
    """Experiment config of a named preset (``quick``, ``paper`` or ``crossing``)."""
    try:
        base = PRESETS[name]
    except KeyError:
        raise UsageError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ExperimentConfig.from_dict({**json.loads(json.dumps(base)), **changes})


# --------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricRow:
    method: str
    metric: str
    mean: float
    std: float
    n: int
    spd_violations: int


@dataclass
class MetricsTable:
    """Mean and population std of per-voxel errors for each method and metric."""

    rows: list = field(default_factory=list)

    def get(self, method, metric):
        for r in self.rows:
            if r.method == method and r.metric == metric:
                return r
        raise KeyError((method, metric))

    def extend(self, other):
        self.rows.extend(other.rows)
        return self

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.method, r.metric, _g17(r.mean), _g17(r.std), r.n, r.spd_violations])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        reader = csv.reader(io.StringIO(text))
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise UsageError(f"unexpected metrics header {header}")
        return cls([
            MetricRow(m, k, float(a), float(s), int(n), int(v)) for m, k, a, s, n, v in reader
        ])

    def format(self):
        """Human-readable table."""
        lines = [f"{'method':<10} {'metric':<11} {'mean':>12} {'std':>12} {'n':>6} {'non-SPD':>8}"]
        for r in self.rows:
            lines.append(
                f"{r.method:<10} {r.metric:<11} {r.mean:>12.4e} {r.std:>12.4e} {r.n:>6d} "
                f"{r.spd_violations:>8d}"
            )
        return "\n".join(lines)


def _g17(x):
    return format(float(x), ".17g")


def _stats(d):
    if d.size == 0:
        return float("nan"), float("nan")
    return float(np.mean(d)), float(np.std(d))


def evaluate(predicted, truth, split, method="method"):
    """Per-voxel Frobenius and Riemannian errors over the held-out sites.

    Parameters
    ----------
    predicted : array_like, shape (n_held_out, 3, 3)
        Predictions in the order of ``split.held_out``.
    truth : TensorGrid
    split : HoldoutSplit
    method : str
        Label for the table rows.

    Returns
    -------
    MetricsTable
        Predictions failing the SPD check are left out of the Riemannian
        mean and counted as violations (in both rows).
    """
    predicted = np.asarray(predicted, dtype=float)
    held = np.asarray(split.held_out)
    if predicted.shape != (len(held), 3, 3):
        raise UsageError(
            f"predicted field has shape {predicted.shape}, expected ({len(held)}, 3, 3) "
            "for the held-out sites"
        )
    if len(held) and held.max() >= truth.n_sites:
        raise UsageError("held-out indices exceed the ground-truth grid")
    true = truth.tensors[held]
    ok = is_spd(predicted)
    violations = int(np.count_nonzero(~ok))
    frob = frob_distance(predicted, true)
    riem = riem_distance(predicted[ok], true[ok]) if np.any(ok) else np.empty(0)
    n = len(held)
    return MetricsTable([
        MetricRow(method, "frobenius", *_stats(frob), n, violations),
        MetricRow(method, "riemannian", *_stats(riem), n, violations),
    ])


# --------------------------------------------------------------------------
# glyphs


def default_glyph_scale(grid):
    """``c`` making the largest glyph radius 0.45 of the smallest in-plane spacing."""
    t = grid.tensors[is_spd(grid.tensors)]
    if len(t) == 0:
        return 1.0
    lam = np.linalg.eigvalsh(t)[:, -1].max()
    active = [s for s, d in zip(grid.spacing, grid.dims) if d > 1] or [1.0]
    return float((0.45 * min(active)) ** 2 / lam)


def glyph_records(grid, c):
    """One dict per site: glyph geometry and FA, or a flagged marker if not SPD."""
    ok = is_spd(grid.tensors)
    coords = grid.coordinates()
    idx = grid.indices()
    fa = np.full(grid.n_sites, np.nan)
    if np.any(ok):
        fa[ok] = fractional_anisotropy(grid.tensors[ok])
    out = []
    for n in range(grid.n_sites):
        rec = {"index": idx[n].tolist(), "center": coords[n].tolist(), "spd": bool(ok[n])}
        if ok[n]:
            g = ellipsoid_glyph(grid.tensors[n], c, coords[n])
            rec.update(radii=g.radii.tolist(), rotation=g.rotation.tolist(), fa=float(fa[n]))
        out.append(rec)
    return out


def _fa_color(fa):
    # blue (isotropic) through white to red (anisotropic)
    fa = float(np.clip(fa, 0.0, 1.0))
    if fa < 0.5:
        r = g = int(round(255 * fa * 2))
        b = 255
    else:
        r = 255
        g = b = int(round(255 * (1 - fa) * 2))
    return f"#{r:02x}{g:02x}{b:02x}"


def slice_ellipses(grid, c, axis=2, index=0):
    """Projected glyph ellipses of one slice.

    Returns a list of ``(center_2d, semi_axes, angle_deg, fa)`` tuples, or
    ``(center_2d, None, None, None)`` for non-SPD voxels. The projection of
    the ellipsoid ``r^T (cD)^{-1} r = 1`` onto the slice plane is the ellipse
    of the matching 2x2 block of ``cD``.
    """
    if axis not in (0, 1, 2):
        raise UsageError(f"slice axis must be 0, 1 or 2, got {axis}")
    if not 0 <= index < grid.dims[axis]:
        raise UsageError(f"slice index {index} outside [0, {grid.dims[axis]}) along axis {axis}")
    plane = [a for a in range(3) if a != axis]
    idx = grid.indices()
    sel = np.flatnonzero(idx[:, axis] == index)
    coords = grid.coordinates()[sel][:, plane]
    t = grid.tensors[sel]
    ok = is_spd(t)
    out = []
    for k in range(len(sel)):
        if not ok[k]:
            out.append((coords[k], None, None, None))
            continue
        block = c * t[k][np.ix_(plane, plane)]
        w, q = np.linalg.eigh(block)
        major = q[:, 1]
        angle = float(np.degrees(np.arctan2(major[1], major[0])))
        out.append((coords[k], np.sqrt(w[::-1]), angle, float(fractional_anisotropy(t[k]))))
    return out


def svg_slice(grid, c, axis=2, index=0, px_per_mm=40.0):
    """SVG text rendering one slice of glyphs as ellipses colored by FA."""
    items = slice_ellipses(grid, c, axis, index)
    plane = [a for a in range(3) if a != axis]
    span = [(grid.dims[a] - 1) * grid.spacing[a] for a in plane]
    pad = max(grid.spacing[a] for a in plane)
    width, height = ((s + 2 * pad) * px_per_mm for s in span)
    f = lambda v: format(float(v), ".6g")  # noqa: E731
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{f(width)}" height="{f(height)}" '
        f'viewBox="0 0 {f(width)} {f(height)}">',
        f'<rect width="100%" height="100%" fill="black"/>',
    ]
    for center, axes, angle, fa in items:
        x, y = ((v + pad) * px_per_mm for v in center)
        if axes is None:
            d = 0.2 * pad * px_per_mm
            lines.append(
                f'<path class="non-spd" d="M{f(x - d)},{f(y - d)}L{f(x + d)},{f(y + d)}'
                f'M{f(x - d)},{f(y + d)}L{f(x + d)},{f(y - d)}" stroke="yellow"/>'
            )
            continue
        rx, ry = axes * px_per_mm
        lines.append(
            f'<ellipse cx="{f(x)}" cy="{f(y)}" rx="{f(rx)}" ry="{f(ry)}" '
            f'transform="rotate({f(angle)} {f(x)} {f(y)})" fill="{_fa_color(fa)}" '
            f'data-fa="{f(fa)}"/>'
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def export_glyphs(grid, c, path, format="glyph-json", axis=2, index=0):
    """Write glyphs of ``grid`` as ``glyph-json`` or an ``svg-slice``."""
    if not c > 0:
        raise UsageError(f"glyph scale c must be positive, got {c}")
    path = Path(path)
    if format == "glyph-json":
        doc = {
            "version": 1,
            "c": float(c),
            "dims": list(grid.dims),
            "spacing": list(grid.spacing),
            "glyphs": glyph_records(grid, c),
        }
        path.write_text(json.dumps(doc, separators=(",", ":")) + "\n")
    elif format == "svg-slice":
        path.write_text(svg_slice(grid, c, axis, index))
    else:
        raise UsageError(f"unknown glyph format {format!r}")
    return path


GLYPH_SCHEMA = {
    "type": "object",
    "required": ["version", "c", "dims", "spacing", "glyphs"],
    "properties": {
        "version": {"const": 1},
        "c": {"type": "number", "exclusiveMinimum": 0},
        "dims": {"type": "array", "items": {"type": "integer", "minimum": 1},
                 "minItems": 3, "maxItems": 3},
        "spacing": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "glyphs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["index", "center", "spd"],
                "properties": {
                    "index": {"type": "array", "minItems": 3, "maxItems": 3},
                    "center": {"type": "array", "minItems": 3, "maxItems": 3},
                    "spd": {"type": "boolean"},
                    "radii": {"type": "array", "minItems": 3, "maxItems": 3,
                              "items": {"type": "number", "exclusiveMinimum": 0}},
                    "rotation": {"type": "array", "minItems": 3, "maxItems": 3},
                    "fa": {"type": "number", "minimum": 0, "maximum": 1},
                },
                "if": {"properties": {"spd": {"const": True}}},
                "then": {"required": ["radii", "rotation", "fa"]},
            },
        },
    },
}


# --------------------------------------------------------------------------
# pipeline


def load_truth(config):
    """Ground-truth field of the config's dataset."""
    ds = config.dataset
    if ds.kind == "file":
        return read_field(ds.path)
    params = _PARAM_TYPES[ds.kind](**ds.params)
    synth = synth_smooth_field if ds.kind == "smooth" else synth_crossing_field
    return synth(tuple(ds.dims), int(config.seed), params)


def upsampled_geometry(low):
    """Dims and spacing of the grid that ``low`` was downsampled from (odd sizes)."""
    dims = tuple(2 * d - 1 if d > 1 else 1 for d in low.dims)
    spacing = tuple(s / 2 if d > 1 else s for s, d in zip(low.spacing, low.dims))
    return dims, spacing


def fit_methods(low, config, progress=None):
    """Fitted estimators per method, trained on the kept grid only."""
    fitted = {}
    for m in config.methods:
        if m == "gwp":
            mc = config.mcmc_config()
            p = {k: getattr(mc, k) for k in make_interpolator("gwp").get_params()
                 if hasattr(mc, k)}
            est = make_interpolator("gwp", **p).fit(low, progress=progress)
        else:
            # edge-linear clamping covers the outer fringe of even-sized grids
            est = make_interpolator(m, clamp=True).fit(low)
        fitted[m] = est
    return fitted


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    truth: TensorGrid
    low: TensorGrid
    split: object
    table: MetricsTable
    predictions: dict
    full_fields: dict
    estimators: dict
    timings: dict
    files: dict = field(default_factory=dict)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (StageError, KeyboardInterrupt):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def run_experiment(config, truth=None, write=True, progress=None):
    """Run the full protocol for ``config``.

    Parameters
    ----------
    config : ExperimentConfig
    truth : TensorGrid, optional
        Ground truth to use instead of loading or synthesizing one.
    write : bool
        Write the artifact bundle to ``config.output_dir``.

    Returns
    -------
    ExperimentResult

    Raises
    ------
    StageError
        Wrapping the first failure, labelled with its stage.
    """
    _stage("config", config.validate)
    timings = {}
    t0 = time.perf_counter()
    if truth is None:
        truth = _stage("load", load_truth, config)
    timings["load"] = time.perf_counter() - t0

    low, split = _stage("downsample", downsample_by_two, truth)
    coords = truth.coordinates()
    targets = coords[split.held_out]
    full_dims, _ = upsampled_geometry(low)

    t0 = time.perf_counter()
    estimators = _stage("fit", fit_methods, low, config, progress)
    timings["fit"] = time.perf_counter() - t0

    predictions, full_fields = {}, {}
    table = MetricsTable()
    t0 = time.perf_counter()
    for m, est in estimators.items():
        pred = _stage(f"interpolate:{m}", est.predict, targets)
        predictions[m] = pred
        full = np.array(truth.tensors)
        full[split.kept] = _stage(f"interpolate:{m}", est.predict, coords[split.kept])
        full[split.held_out] = pred
        invalid = ~truth.valid
        full[invalid] = 0.0
        full_fields[m] = truth.replace(tensors=full)
        table.extend(_stage(f"evaluate:{m}", evaluate, pred, truth, split, m))
    timings["predict"] = time.perf_counter() - t0

    result = ExperimentResult(config, truth, low, split, table, predictions, full_fields,
                              estimators, timings)
    if write and config.output_dir:
        _stage("write", write_bundle, result, Path(config.output_dir))
    return result


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_bundle(result, out):
    """Metrics CSV, per-method fields, glyphs, GWP archive and a manifest."""
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    files = {}

    def put(name, writer):
        p = out / name
        writer(p)
        files[name] = p

    put("metrics.csv", lambda p: p.write_text(result.table.to_csv()))
    put("truth.json", lambda p: write_field(result.truth, p))
    put("kept.json", lambda p: write_field(result.low, p))
    held_mask = np.zeros(result.truth.n_sites, dtype=bool)
    held_mask[result.split.held_out] = True
    c = cfg.glyph_c or default_glyph_scale(result.truth)
    put("glyphs_truth.json", lambda p: export_glyphs(result.truth, c, p, "glyph-json"))
    put("glyphs_truth.svg", lambda p: export_glyphs(result.truth, c, p, "svg-slice"))
    for m, full in result.full_fields.items():
        put(f"{m}_field.json", lambda p, g=full: write_field(g, p))
        put(f"{m}_heldout.json", lambda p, g=full: write_field(g.replace(mask=held_mask), p))
        ok = is_spd(full.tensors)
        if np.all(ok):
            put(f"glyphs_{m}.json", lambda p, g=full: export_glyphs(g, c, p, "glyph-json"))
        put(f"glyphs_{m}.svg", lambda p, g=full: export_glyphs(g, c, p, "svg-slice"))
    gwp_est = result.estimators.get("gwp")
    if gwp_est is not None:
        put("gwp_posterior.jsonl", lambda p: write_archive(gwp_est.samples_, p))
        _, unc = gwp_est.predict(result.truth.coordinates(), return_uncertainty=True)
        doc = {"version": 1, "dims": list(result.truth.dims),
               "uncertainty": [float(v) for v in unc]}
        put("gwp_uncertainty.json", lambda p: p.write_text(json.dumps(doc) + "\n"))

    low = result.low
    manifest = {
        "version": 1,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "config": cfg.to_dict(),
        "seed": int(cfg.seed),
        "glyph_c": c,
        "training_checksum": data_checksum(low.tensors[low.valid], low.coordinates()[low.valid]),
        "n_kept": int(len(result.split.kept)),
        "n_held_out": int(len(result.split.held_out)),
        "files": {name: _sha256(p) for name, p in sorted(files.items())},
    }
    if gwp_est is not None:
        manifest["gwp_acceptance"] = gwp_est.acceptance_
    (out / "manifest.json").write_text(dumps_canonical(manifest))
    result.files = files
    return files
