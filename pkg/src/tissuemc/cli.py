"""Command-line interface.

Subcommands: ``simulate`` (one fluence field), ``extract-line`` (profile
along a voxel row), ``replicate`` (per-voxel mean/MSE over R independent
runs), ``fit`` (coefficient estimation from measurements), ``scan``
(sensitivity table over a parameter grid).

Every command is byte-reproducible under a fixed ``--seed``: all streams
derive from it by documented tags, worker decomposition is fixed, and merges
happen in chunk order.  Run-summary sidecars repeat the fully-resolved
config (re-running from the sidecar reproduces the data output) followed by
``# run:`` comment lines carrying wall time and counters; the wall-time
comment is the single non-reproducible line any command writes.

Exit codes: 0 success, 2 config/usage error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import __version__
from .config import (ConfigError, build_scenario, descent_options, load_config,
                     mh_params, resolved_text)
from .estimators import estimate_mc, estimate_mc_some
from .grid import read_field_csv, write_field_csv
from .inverse import (hybrid_descent, load_measurements_csv, sensitivity_scan,
                      write_scan_csv, write_trace_csv)
from .mh import run_chain
from .rng import stream

METHODS = ("mc", "mc-some", "mh")

# Probe voxels reported by `replicate`: named points on and off the source axis.
SUMMARY_POINTS = {
    "v1": (0.0, 0.2, 0.0),
    "v2": (0.0, 0.6, 0.0),
    "v3": (0.0, 0.0, -0.2),
    "v4": (0.0, 0.0, -0.6),
    "v5": (0.0, 0.2, -0.2),
    "v6": (0.0, 0.6, -0.6),
}

# Sensitivity-scan default grid.
DEFAULT_SCAN_GRID = {
    "g": [0.85, 0.90, 0.95],
    "mu_a": [0.5, 0.75, 1.0, 1.25, 1.5],
    "mu_s": [75.0, 90.0, 105.0, 120.0, 135.0],
}


class CliError(RuntimeError):
    """Runtime failure mapped to exit code 3."""


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def _run_field(cfg, method: str, seed: int, threads: int):
    scenario = build_scenario(cfg)
    rng = stream(seed, "simulate", method)
    info = {}
    if method == "mc":
        field = estimate_mc(scenario, cfg["M"], rng, workers=threads)
    elif method == "mc-some":
        field = estimate_mc_some(scenario, cfg["M"], cfg["M_points"],
                                 cfg["M_rot"], rng, workers=threads)
    elif method == "mh":
        field, diag = run_chain(scenario, mh_params(cfg), rng,
                                burn_in_frac=cfg["burn_in_frac"])
        info["acceptance_rate"] = diag.acceptance_rate
    else:
        raise ConfigError(f"unknown method '{method}' (choose from {', '.join(METHODS)})")
    return field, info


def _write_meta(path, cfg, stats: dict) -> None:
    with open(path, "w") as fh:
        fh.write(resolved_text(cfg))
        for key, value in stats.items():
            fh.write(f"# run: {key} = {value}\n")


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if args.method not in METHODS:
        raise ConfigError(f"unknown method '{args.method}' (choose from {', '.join(METHODS)})")
    t0 = time.perf_counter()
    field, info = _run_field(cfg, args.method, args.seed, args.threads)
    wall = time.perf_counter() - t0
    try:
        write_field_csv(field, args.out)
    except OSError as exc:
        raise CliError(f"cannot write output {args.out}: {exc}") from exc
    stats = {
        "method": args.method,
        "seed": args.seed,
        "total_samples": field.total_samples,
        "wall_time_s": f"{wall:.3f}",
    }
    stats.update({k: _fmt(v) for k, v in info.items()})
    _write_meta(str(args.out) + ".meta", cfg, stats)
    return 0


def cmd_extract_line(args) -> int:
    try:
        cols = read_field_csv(args.field)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read field {args.field}: {exc}") from exc
    axis = args.line_axis
    if axis not in ("x", "y", "z"):
        raise ConfigError(f"line axis must be x, y or z, got '{axis}'")
    try:
        through = np.array([float(v) for v in args.line_through.split(",")])
        if through.shape != (3,):
            raise ValueError
    except ValueError:
        raise ConfigError(f"--line-through must be 'x,y,z', got {args.line_through!r}")

    ix, iy, iz = cols["ix"].astype(int), cols["iy"].astype(int), cols["iz"].astype(int)
    m = int(ix.max())
    h = float(cols["x"][np.argmax(ix == 1)]) if np.any(ix == 1) else 1.0
    idx_through = np.round(through / h).astype(int)
    if np.any(np.abs(idx_through) > m):
        raise CliError(f"line through {tuple(through)} lies outside the grid")

    axis_num = "xyz".index(axis)
    fixed = [d for d in range(3) if d != axis_num]
    ijk = np.column_stack([ix, iy, iz])
    mask = np.all(ijk[:, fixed] == idx_through[fixed], axis=1)
    order = np.argsort(ijk[mask, axis_num])
    coord = cols[axis][mask][order]
    fl = cols["fluence"][mask][order]
    se = cols["stderr"][mask][order]
    try:
        with open(args.out, "w") as fh:
            fh.write("coord,fluence,stderr\n")
            for c, f, s in zip(coord, fl, se):
                fh.write(f"{_fmt(c)},{_fmt(f)},{_fmt(s)}\n")
    except OSError as exc:
        raise CliError(f"cannot write output {args.out}: {exc}") from exc
    return 0


def cmd_replicate(args) -> int:
    cfg = load_config(args.config)
    if args.method not in METHODS:
        raise ConfigError(f"unknown method '{args.method}'")
    if args.replicates < 2:
        raise ConfigError("need at least 2 replicates")
    scenario = build_scenario(cfg)
    total = np.zeros(scenario.grid.size)
    total_sq = np.zeros(scenario.grid.size)
    for rep in range(args.replicates):
        rng = stream(args.seed, "replicate", args.method, rep)
        if args.method == "mc":
            field = estimate_mc(scenario, cfg["M"], rng, workers=args.threads)
        elif args.method == "mc-some":
            field = estimate_mc_some(scenario, cfg["M"], cfg["M_points"],
                                     cfg["M_rot"], rng, workers=args.threads)
        else:
            field, _ = run_chain(scenario, mh_params(cfg), rng,
                                 burn_in_frac=cfg["burn_in_frac"])
        total += field.estimate
        total_sq += field.estimate ** 2
    mean = total / args.replicates
    mse = np.maximum(total_sq / args.replicates - mean ** 2, 0.0)

    g = scenario.grid
    ax = np.arange(-g.m, g.m + 1)
    try:
        with open(args.out, "w") as fh:
            fh.write("ix,iy,iz,x,y,z,mean,mse\n")
            flat = 0
            for i in ax:
                for j in ax:
                    for k in ax:
                        fh.write(f"{i},{j},{k},{_fmt(i * g.h)},{_fmt(j * g.h)},"
                                 f"{_fmt(k * g.h)},{_fmt(mean[flat])},{_fmt(mse[flat])}\n")
                        flat += 1
        with open(str(args.out) + ".summary", "w") as fh:
            fh.write("name,ix,iy,iz,mean,mse\n")
            for name, point in SUMMARY_POINTS.items():
                loc = g.locate(point)
                if loc is None:
                    continue
                flat = g.flatten(*loc)
                fh.write(f"{name},{loc[0]},{loc[1]},{loc[2]},"
                         f"{_fmt(mean[flat])},{_fmt(mse[flat])}\n")
    except OSError as exc:
        raise CliError(f"cannot write output {args.out}: {exc}") from exc
    return 0


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    try:
        meas = load_measurements_csv(args.measurements)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read measurements {args.measurements}: {exc}") from exc
    scenario = build_scenario(cfg)
    trace = hybrid_descent(scenario, meas, init=(cfg["mu_s"], cfg["mu_a"]),
                           opts=descent_options(cfg), rng=stream(args.seed, "fit"))
    try:
        write_trace_csv(trace, args.out)
    except OSError as exc:
        raise CliError(f"cannot write output {args.out}: {exc}") from exc
    return 0


def _parse_grid_spec(spec: str) -> dict:
    grid = {}
    for part in spec.split(";"):
        key, _, values = part.partition("=")
        key = key.strip()
        if key not in ("g", "mu_a", "mu_s") or not values:
            raise ConfigError(f"bad grid spec component {part!r}")
        grid[key] = [float(v) for v in values.split(",")]
    for key in ("g", "mu_a", "mu_s"):
        grid.setdefault(key, DEFAULT_SCAN_GRID[key])
    return grid


def cmd_scan(args) -> int:
    cfg = load_config(args.config)
    try:
        meas = load_measurements_csv(args.measurements)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read measurements {args.measurements}: {exc}") from exc
    grid_values = _parse_grid_spec(args.grid) if args.grid else DEFAULT_SCAN_GRID
    scenario = build_scenario(cfg)
    rows = sensitivity_scan(scenario, grid_values, meas,
                            cfg["M"], cfg["M_points"], cfg["M_rot"],
                            stream(args.seed, "scan"))
    try:
        write_scan_csv(rows, args.out)
    except OSError as exc:
        raise CliError(f"cannot write output {args.out}: {exc}") from exc
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tissuemc",
        description="Monte Carlo fluence simulation and optical-coefficient fitting",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--out", required=True, help="output CSV path")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                       help="worker threads (results are thread-count independent)")

    p = sub.add_parser("simulate", help="estimate one fluence field")
    common(p)
    p.add_argument("--method", required=True, help="one of: " + ", ".join(METHODS))
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("extract-line", help="profile along a voxel row of a field CSV")
    p.add_argument("field", help="field CSV produced by simulate")
    p.add_argument("--line-axis", required=True, help="x, y or z")
    p.add_argument("--line-through", required=True, help="point 'x,y,z' the line passes through")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_line)

    p = sub.add_parser("replicate", help="per-voxel mean/MSE over independent replicates")
    common(p)
    p.add_argument("--method", required=True)
    p.add_argument("--replicates", type=int, required=True)
    p.set_defaults(func=cmd_replicate)

    p = sub.add_parser("fit", help="estimate mu_s, mu_a from measurements")
    common(p)
    p.add_argument("--measurements", required=True, help="CSV with header x,y,z,value")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("scan", help="score a parameter grid against measurements")
    common(p)
    p.add_argument("--measurements", required=True)
    p.add_argument("--grid", help="grid spec, e.g. 'g=0.9;mu_a=0.5,1;mu_s=75,105'")
    p.set_defaults(func=cmd_scan)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CliError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
