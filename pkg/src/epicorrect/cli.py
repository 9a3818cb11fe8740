"""Command line interface: ``epicorrect simulate | correct | bench``.

Option precedence is built-in defaults, then ``EPICORRECT_*`` environment
variables, then command line flags.

Exit codes: 0 converged, 2 iteration cap reached, 1 error (bad input or a
solver failure such as a failed line search).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .config import RunConfig, from_env
from .geometry import GridSpec
from .admm import ADMMError, QPError
from .gn_pcg import LineSearchError, PCGBreakdown, preconditioned_spectrum
from .image_model import ImageVolume, InfeasibleFieldError, simulate_pair
from .objective import objective_gn
from .phantoms import PHANTOMS, bump_field, make_phantom
from .pipeline import _axis_order, correct_volumes, field_error, from_internal, to_internal
from .volume_io import VolumeFormatError, read_image, read_volume, write_image, write_volume

log = logging.getLogger("epicorrect")

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2
SPECTRUM_LIMIT = 2000

# CLI flag spelling -> RunConfig field
_PRECOND = {"none": "none", "jacobi": "jacobi", "block": "block_jacobi", "sgs": "sgs"}
_SCHEDULE = {"fixed": "fixed", "adaptive": "adaptive", "bounded": "adaptive_bounded"}
_CONFIG_FLAGS = ("alpha", "beta", "solver", "preconditioner", "levels", "rho0", "rho_min", "schedule",
                 "pe_axis", "threads", "seed", "out_dir")

BENCH_COLUMNS = ("name", "solver", "preconditioner", "schedule", "alpha", "termination", "levels",
                 "outer_iterations", "pcg_iterations", "admm_iterations", "ssd_reduction", "wall_time")


class CLIError(Exception):
    pass


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("solver configuration")
    g.add_argument("--alpha", type=float)
    g.add_argument("--beta", type=float)
    g.add_argument("--solver", choices=("gn", "admm"))
    g.add_argument("--precond", dest="preconditioner", choices=sorted(_PRECOND))
    g.add_argument("--levels", type=int)
    g.add_argument("--rho0", type=float)
    g.add_argument("--rho-min", dest="rho_min", type=float)
    g.add_argument("--schedule", choices=sorted(_SCHEDULE))
    g.add_argument("--pe-axis", dest="pe_axis", type=int, choices=(1, 2, 3))
    g.add_argument("--threads", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out-dir", dest="out_dir")


def build_config(args: argparse.Namespace, environ=None) -> RunConfig:
    """Merge defaults, environment and flags into a validated :class:`RunConfig`."""
    cfg = from_env(RunConfig(), environ)
    for name in _CONFIG_FLAGS:
        value = getattr(args, name, None)
        if value is None:
            continue
        if name == "preconditioner":
            value = _PRECOND[value]
        elif name == "schedule":
            value = _SCHEDULE[value]
        setattr(cfg, name, value)
    return cfg.validate()


def _shape_args(values, name):
    if values is None:
        return None
    if len(values) not in (2, 3):
        raise CLIError(f"{name} needs 2 or 3 values")
    return tuple(values)


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


# --- simulate ----------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = build_config(args)
    if args.truth:
        truth = read_image(args.truth)
    else:
        m = _shape_args(args.grid, "--grid") or (64, 64)
        h = _shape_args(args.spacing, "--spacing") or (1.0,) * len(m)
        truth = make_phantom(args.phantom, GridSpec(m, h), args.amplitude)
    internal = to_internal(truth, cfg.pe_axis)
    grid = internal.grid
    if args.field_file:
        vf = read_volume(args.field_file)
        if vf.kind != "field" or vf.pe_axis != cfg.pe_axis:
            raise CLIError(f"{args.field_file} is not a field along axis {cfg.pe_axis}")
        b_true = np.transpose(vf.data, _axis_order(grid.dim, cfg.pe_axis))
    elif args.max_slope == 0:
        b_true = np.zeros(grid.face_shape)
    else:
        b_true = bump_field(grid, args.max_slope)
    pair = simulate_pair(internal, b_true)
    rng = np.random.default_rng(cfg.seed)
    images = {"plus": pair.plus.data, "minus": pair.minus.data}
    if args.noise > 0:
        images = {k: v + rng.normal(0.0, args.noise, v.shape) for k, v in images.items()}
    os.makedirs(cfg.out_dir, exist_ok=True)
    for name, data in images.items():
        out, g = from_internal(data, grid, cfg.pe_axis)
        write_image(os.path.join(cfg.out_dir, f"{name}.vol"), ImageVolume(g, out))
    write_image(os.path.join(cfg.out_dir, "truth.vol"), truth)
    field, g = from_internal(b_true, grid, cfg.pe_axis)
    write_volume(os.path.join(cfg.out_dir, "field_true.vol"), g, field, "field", pe_axis=cfg.pe_axis)
    log.info("wrote simulated pair on grid %s to %s", truth.grid.m, cfg.out_dir)
    return EXIT_OK


# --- correct -----------------------------------------------------------------

def _spectra(result, plus, minus, cfg):
    from .image_model import VolumePair

    pair = VolumePair(to_internal(plus, cfg.pe_axis), to_internal(minus, cfg.pe_axis))
    if pair.grid.n_faces > SPECTRUM_LIMIT:
        raise CLIError(f"--spectrum needs at most {SPECTRUM_LIMIT} unknowns, got {pair.grid.n_faces}")
    b = np.transpose(result.field, _axis_order(pair.grid.dim, cfg.pe_axis))
    ev = objective_gn(pair, b, cfg.objective_params())
    return {k: preconditioned_spectrum(k, ev, cfg.objective_params(), SPECTRUM_LIMIT)
            for k in ("none", "jacobi", "block_jacobi", "sgs")}


def cmd_correct(args) -> int:
    cfg = build_config(args)
    plus, minus = read_image(args.plus), read_image(args.minus)
    if plus.grid != minus.grid:
        raise CLIError("the two volumes must share grid metadata")
    result = correct_volumes(plus, minus, cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    out = cfg.out_dir
    write_volume(os.path.join(out, "field.vol"), result.grid, result.field, "field", pe_axis=cfg.pe_axis)
    write_image(os.path.join(out, "corrected_plus.vol"), result.corrected_plus)
    write_image(os.path.join(out, "corrected_minus.vol"), result.corrected_minus)
    write_image(os.path.join(out, "corrected_mean.vol"), result.corrected_mean)
    result.report.write_csv(os.path.join(out, "convergence.csv"), timing=args.timing)
    metrics = dict(result.metrics)
    metrics["config"] = {k: v for k, v in cfg.as_dict().items() if k != "out_dir"}
    if args.true_field:
        vf = read_volume(args.true_field)
        if vf.kind != "field" or vf.data.shape != result.field.shape:
            raise CLIError(f"{args.true_field} does not match the estimated field")
        metrics["field_relative_error"] = field_error(result.field, vf.data)
    if args.spectrum:
        spectra = _spectra(result, plus, minus, cfg)
        with open(os.path.join(out, "spectrum.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(spectra.keys())
            for row in zip(*spectra.values()):
                w.writerow([format(v, ".17g") for v in row])
        metrics["spectrum_fraction_in_half_to_two"] = {
            k: float(np.mean((v >= 0.5) & (v <= 2.0))) for k, v in spectra.items()}
    _write_json(os.path.join(out, "metrics.json"), metrics)
    log.info("termination %s; SSD %.6g -> %.6g", result.report.termination,
             metrics["ssd_before"], metrics["ssd_after"])
    return EXIT_OK if result.report.converged else EXIT_NOT_CONVERGED


# --- bench -------------------------------------------------------------------

def parse_matrix(text: str) -> list:
    """Parse a JSON list of override dicts, or ``k=v,k=v;k=v`` shorthand."""
    text = text.strip()
    if os.path.isfile(text):
        with open(text) as fh:
            text = fh.read().strip()
    if text.startswith("["):
        entries = json.loads(text)
    else:
        entries = []
        for chunk in filter(None, (c.strip() for c in text.split(";"))):
            entry = {}
            for item in chunk.split(","):
                key, sep, value = item.partition("=")
                if not sep:
                    raise CLIError(f"bad matrix item {item!r}; expected key=value")
                entry[key.strip()] = value.strip()
            entries.append(entry)
    if not entries:
        raise CLIError("the benchmark matrix is empty")
    if not all(isinstance(e, dict) for e in entries):
        raise CLIError("every matrix entry must be a mapping")
    return entries


def _apply_entry(cfg: RunConfig, entry: dict) -> RunConfig:
    env = {}
    for key, value in entry.items():
        key = {"precond": "preconditioner"}.get(key.replace("-", "_"), key.replace("-", "_"))
        if key == "preconditioner":
            value = _PRECOND.get(str(value), value)
        elif key == "schedule":
            value = _SCHEDULE.get(str(value), value)
        if key not in RunConfig.__dataclass_fields__ or key == "name":
            raise CLIError(f"unknown matrix key {key!r}")
        env["EPICORRECT_" + key.upper()] = str(value)
    return from_env(cfg, env).validate()


def run_bench(plus: ImageVolume, minus: ImageVolume, base: RunConfig, entries: list) -> list:
    rows = []
    for i, entry in enumerate(entries):
        entry = dict(entry)
        name = str(entry.pop("name", f"run{i}"))
        cfg = _apply_entry(base, entry)
        t0 = time.perf_counter()
        res = correct_volumes(plus, minus, cfg)
        wall = time.perf_counter() - t0
        m = res.metrics
        rows.append({
            "name": name, "solver": cfg.solver, "preconditioner": cfg.preconditioner,
            "schedule": cfg.schedule, "alpha": cfg.alpha, "termination": res.report.termination,
            "levels": len(res.levels), "outer_iterations": sum(m["iterations"]),
            "pcg_iterations": m.get("pcg_iterations", 0), "admm_iterations": m.get("admm_iterations", 0),
            "ssd_reduction": m["ssd_reduction"], "wall_time": wall,
        })
    return rows


def cmd_bench(args) -> int:
    cfg = build_config(args)
    entries = parse_matrix(args.matrix)
    if args.plus:
        if not args.minus:
            raise CLIError("--plus needs --minus")
        plus, minus = read_image(args.plus), read_image(args.minus)
    else:
        m = _shape_args(args.grid, "--grid") or (64, 64)
        truth = make_phantom(args.phantom, GridSpec(m, (1.0,) * len(m)))
        internal = to_internal(truth, cfg.pe_axis)
        pair = simulate_pair(internal, bump_field(internal.grid, args.max_slope))
        plus, minus = (ImageVolume(truth.grid, from_internal(v.data, internal.grid, cfg.pe_axis)[0])
                       for v in (pair.plus, pair.minus))
    rows = run_bench(plus, minus, cfg, entries)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "bench.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_COLUMNS)
        for row in rows:
            w.writerow([format(row[c], ".17g") if isinstance(row[c], float) else row[c] for c in BENCH_COLUMNS])
    log.info("wrote %d benchmark rows to %s", len(rows), path)
    return EXIT_OK


# --- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epicorrect", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="distort a phantom or truth volume in both directions")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--phantom", choices=sorted(PHANTOMS), default="head")
    src.add_argument("--truth", help="truth image volume")
    p.add_argument("--grid", type=int, nargs="+", help="cell counts for a phantom")
    p.add_argument("--spacing", type=float, nargs="+")
    p.add_argument("--amplitude", type=float, default=1000.0)
    p.add_argument("--max-slope", type=float, default=0.5, help="max |d1 b| of the bump field; 0 gives b = 0")
    p.add_argument("--field-file", help="ground-truth field volume instead of the bump")
    p.add_argument("--noise", type=float, default=0.0, help="std of additive Gaussian noise")
    _add_config_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("correct", help="estimate the field and correct a volume pair")
    p.add_argument("plus")
    p.add_argument("minus")
    p.add_argument("--true-field", help="ground-truth field for an error metric")
    p.add_argument("--spectrum", action="store_true",
                   help=f"dense preconditioned spectra at the solution (<= {SPECTRUM_LIMIT} unknowns)")
    p.add_argument("--timing", action="store_true", help="add wall-clock columns to the convergence CSV")
    _add_config_flags(p)
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("bench", help="run a configuration matrix and tabulate iteration counts")
    p.add_argument("--matrix", required=True, help="JSON list, JSON file, or 'k=v,k=v;k=v'")
    p.add_argument("--plus")
    p.add_argument("--minus")
    p.add_argument("--phantom", choices=sorted(PHANTOMS), default="head")
    p.add_argument("--grid", type=int, nargs="+")
    p.add_argument("--max-slope", type=float, default=0.5)
    _add_config_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CLIError, VolumeFormatError, InfeasibleFieldError, ValueError, OSError,
            LineSearchError, PCGBreakdown, ADMMError, QPError) as err:
        print(f"epicorrect: error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
