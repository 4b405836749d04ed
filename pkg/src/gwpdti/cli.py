"""Command-line interface.

Exit codes: 0 success, 2 usage error, 3 data or validation error,
4 numerical failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dmri import (
    CrossingFieldParams,
    SmoothFieldParams,
    crossing_field_signals,
    fit_tensor_lls,
    read_dwi,
    read_scheme_csv,
    repair_spd,
    smooth_field_signals,
    write_dwi,
    write_scheme_csv,
)
from .estimators import GWPInterpolator, make_interpolator
from .field import TensorGrid, downsample_by_two, read_field, write_field
from .gwp import ConditioningError
from .harness import (
    METHODS,
    StageError,
    UsageError,
    default_glyph_scale,
    evaluate,
    export_glyphs,
    load_config,
    preset,
    run_experiment,
    upsampled_geometry,
)
from .inference import NumericalError, read_archive, write_archive
from .predict import check_provenance

log = logging.getLogger("gwpdti")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _config(args):
    """Experiment config from ``--config`` or ``--preset``, with ``--seed`` applied."""
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = preset(getattr(args, "preset", None) or "quick")
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _dims(values):
    dims = tuple(values)
    if len(dims) not in (2, 3):
        raise UsageError("--dims takes two or three integers")
    return dims


def cmd_synth(args):
    cfg = _config(args)
    kind = args.kind or cfg.dataset.kind
    if kind not in ("smooth", "crossing"):
        raise UsageError(f"cannot synthesize dataset kind {kind!r}")
    dims = _dims(args.dims) if args.dims else tuple(cfg.dataset.dims)
    params = dict(cfg.dataset.params) if kind == cfg.dataset.kind else {}
    if args.noise is not None:
        params["noise"] = args.noise
    if kind == "smooth":
        clean, scheme, sig = smooth_field_signals(dims, cfg.seed, SmoothFieldParams(**params))
    else:
        clean, scheme, sig = crossing_field_signals(dims, cfg.seed, CrossingFieldParams(**params))
    noisy = clean.replace(tensors=repair_spd(fit_tensor_lls(sig, scheme)))
    write_field(noisy, args.out)
    if args.clean:
        write_field(clean, args.clean)
    if args.dwi:
        write_dwi(args.dwi, clean.dims, sig.s0, scheme, sig.signals)
    if args.scheme:
        write_scheme_csv(scheme, args.scheme)
    print(f"wrote {kind} field {clean.dims} to {args.out}")
    return EXIT_OK


def cmd_estimate_dti(args):
    dims, scheme, sig = read_dwi(args.dwi)
    if args.scheme:
        scheme = read_scheme_csv(args.scheme)
        if len(scheme) != sig.signals.shape[-1]:
            raise UsageError("scheme length does not match the DWI measurements")
    tensors = fit_tensor_lls(sig, scheme)
    if not args.no_repair:
        tensors = repair_spd(tensors)
    grid = TensorGrid(tuple(dims) + (1,) * (3 - len(dims)), tuple(args.spacing), tensors)
    write_field(grid, args.out)
    print(f"wrote tensor field {grid.dims} to {args.out}")
    return EXIT_OK


def cmd_downsample(args):
    grid = read_field(args.field)
    low, split = downsample_by_two(grid)
    write_field(low, args.out)
    if args.split:
        doc = {"kept": split.kept.tolist(), "held_out": split.held_out.tolist()}
        Path(args.split).write_text(json.dumps(doc) + "\n")
    print(f"kept {len(split.kept)} of {grid.n_sites} sites -> {args.out}")
    return EXIT_OK


def _gwp_params(cfg):
    mc = cfg.mcmc_config()
    names = GWPInterpolator().get_params()
    return {k: getattr(mc, k) for k in names if hasattr(mc, k)}


def cmd_fit(args):
    cfg = _config(args)
    grid = read_field(args.field)
    est = GWPInterpolator(**_gwp_params(cfg)).fit(grid)
    write_archive(est.samples_, args.out)
    rates = {k: round(v, 4) for k, v in est.acceptance_.items()}
    print(f"wrote {len(est.samples_)} posterior samples to {args.out}; acceptance {rates}")
    return EXIT_OK


def _target_grid(source, like):
    if like:
        return read_field(like)
    dims, spacing = upsampled_geometry(source)
    return TensorGrid(dims, spacing, np.tile(np.eye(3), (int(np.prod(dims)), 1, 1)))


def cmd_interp(args):
    source = read_field(args.field)
    target = _target_grid(source, args.like)
    coords = target.coordinates()
    unc = None
    if args.method == "gwp":
        if args.archive:
            samples = read_archive(args.archive)
            valid = source.valid
            check_provenance(samples, source.tensors[valid], source.coordinates()[valid])
            est = GWPInterpolator.from_samples(samples, seed=args.seed or 0)
        else:
            est = GWPInterpolator(**_gwp_params(_config(args))).fit(source)
        pred, unc = est.predict(coords, return_uncertainty=True)
    else:
        pred = make_interpolator(args.method, clamp=True).fit(source).predict(coords)
    out = TensorGrid(target.dims, target.spacing, pred)
    write_field(out, args.out)
    if args.uncertainty and unc is not None:
        doc = {"version": 1, "dims": list(out.dims), "uncertainty": [float(v) for v in unc]}
        Path(args.uncertainty).write_text(json.dumps(doc) + "\n")
    print(f"wrote {args.method} prediction {out.dims} to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    truth = read_field(args.truth)
    pred = read_field(args.pred)
    if pred.dims != truth.dims:
        raise UsageError(f"prediction dims {pred.dims} do not match truth dims {truth.dims}")
    _, split = downsample_by_two(truth)
    table = evaluate(pred.tensors[split.held_out], truth, split, args.method or "method")
    if args.out:
        Path(args.out).write_text(table.to_csv())
    print(table.format())
    return EXIT_OK


def cmd_glyphs(args):
    grid = read_field(args.field)
    c = args.c if args.c is not None else default_glyph_scale(grid)
    export_glyphs(grid, c, args.out, args.format, args.slice_axis, args.slice)
    print(f"wrote {args.format} glyphs (c={c:.6g}) to {args.out}")
    return EXIT_OK


def cmd_pipeline(args):
    cfg = _config(args)
    if args.method:
        cfg.methods = tuple(dict.fromkeys(args.method))
    if args.out:
        cfg.output_dir = args.out
    if not cfg.output_dir:
        raise UsageError("pipeline needs --out (or output_dir in the config)")
    result = run_experiment(cfg)
    print(result.table.format())
    print(f"artifacts in {cfg.output_dir}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="gwpdti", description="Interpolate DTI fields with generalized Wishart processes.",
                                epilog="exit codes: 0 ok, 2 usage, 3 data, 4 numerical")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help, config=True):
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--seed", type=int, default=None)
        if config:
            sp.add_argument("--config", help="versioned JSON experiment config")
            sp.add_argument("--preset", choices=["quick", "paper", "crossing"])

    sp = sub.add_parser("synth", help="generate a synthetic noisy tensor field")
    common(sp, "field file to write")
    sp.add_argument("--kind", choices=["smooth", "crossing"])
    sp.add_argument("--dims", type=int, nargs="+")
    sp.add_argument("--noise", type=float, help="Rician sigma as a fraction of s0")
    sp.add_argument("--clean", help="also write the noise-free field here")
    sp.add_argument("--dwi", help="also write the noisy DWI signals here")
    sp.add_argument("--scheme", help="also write the gradient scheme CSV here")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("estimate-dti", help="log-linear tensor fit of a DWI file")
    sp.add_argument("--dwi", required=True)
    sp.add_argument("--scheme", help="gradient scheme CSV overriding the DWI file's")
    sp.add_argument("--spacing", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    sp.add_argument("--no-repair", action="store_true", help="skip the SPD eigenvalue floor")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_estimate_dti)

    sp = sub.add_parser("downsample", help="keep the all-even sites of a field")
    sp.add_argument("--field", required=True)
    sp.add_argument("--split", help="write kept/held-out indices as JSON")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_downsample)

    sp = sub.add_parser("fit", help="sample the GWP posterior for a field")
    common(sp, "posterior archive to write")
    sp.add_argument("--field", required=True)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("interp", help="interpolate a field onto a finer grid")
    common(sp, "predicted field file to write")
    sp.add_argument("--field", required=True, help="source (downsampled) field")
    sp.add_argument("--method", choices=METHODS, default="gwp")
    sp.add_argument("--archive", help="posterior archive from 'fit' (gwp only)")
    sp.add_argument("--like", help="field whose geometry defines the targets")
    sp.add_argument("--uncertainty", help="sidecar file for GWP uncertainty")
    sp.set_defaults(func=cmd_interp)

    sp = sub.add_parser("eval", help="error metrics of a prediction at held-out sites")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--method", help="row label")
    sp.add_argument("--out", help="metrics CSV to write")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("glyphs", help="export ellipsoid glyphs")
    sp.add_argument("--field", required=True)
    sp.add_argument("--format", choices=["glyph-json", "svg-slice"], default="glyph-json")
    sp.add_argument("--c", type=float, help="level-set constant (default: auto)")
    sp.add_argument("--slice-axis", type=int, default=2)
    sp.add_argument("--slice", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_glyphs)

    sp = sub.add_parser("pipeline", help="run a full experiment")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--config")
    sp.add_argument("--preset", choices=["quick", "paper", "crossing"])
    sp.add_argument("--method", choices=METHODS, action="append",
                    help="method to run (repeatable; default all)")
    sp.set_defaults(func=cmd_pipeline)
    return p


def exit_code(exc):
    """Map an exception to the documented exit code."""
    if isinstance(exc, StageError):
        exc = exc.error
    if isinstance(exc, (ConditioningError, NumericalError, np.linalg.LinAlgError,
                        FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (ValueError, OSError, KeyError)):
        return EXIT_DATA
    raise exc


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", None) is not None and args.seed < 0:
        parser.error("--seed must be non-negative")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001
        code = exit_code(exc)
        print(f"gwpdti: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
