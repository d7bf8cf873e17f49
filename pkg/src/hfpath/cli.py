"""Command-line front end.

Exit status: 0 on success, 2 on usage or configuration errors, 1 on runtime
failures (diverged integration, degenerate variance, inconsistent constants).
Every output file starts with a ``#`` line recording the tool version, the
seed and a hash of the effective configuration.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .asymptotics import lambda_const, write_constants_csv
from .config import FUNCTIONALS, LoadedConfig, experiment_config, load_config, parse_config
from .errors import (
    ArgumentError,
    ConfigurationError,
    DegenerateVarianceError,
    InternalConstantError,
    IntegrationDivergedError,
    MisuseError,
    UnsupportedError,
)
from .estimator import (
    CSV_COLUMNS,
    bipower_variance,
    feasible_ci,
    power_variation,
    realized_range,
    to_csv_row,
)
from .experiment import config_echo, run
from .model import TimeGrid, simulate_path, write_path_csv
from .rng import DEFAULT_SEED, SeedStream

EXPERIMENT_KINDS = {"lln": "lln", "clt": "clt_coverage", "rate": "rate", "jump-clt": "jump_clt",
                    "figure1": "figure1"}


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI configuration file")
    common.add_argument("--seed", type=_seed, default=DEFAULT_SEED,
                        help=f"master seed (default {DEFAULT_SEED})")
    common.add_argument("--threads", type=int, default=1, help="worker threads, 0 = auto")
    common.add_argument("--out-dir", type=Path, default=Path("hfpath_out"))
    common.add_argument("--n", type=int, help="number of coarse intervals")
    common.add_argument("--m", type=int, help="fine steps per coarse interval")
    common.add_argument("--p", type=float, help="exponent of the functional / realized range")
    common.add_argument("--reps", type=int, help="replications")
    common.add_argument("--level", type=float, help="confidence level")

    parser = argparse.ArgumentParser(prog="hfpath", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hfpath {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate one path and write it as CSV")
    sub.add_parser("estimate", parents=[common], help="simulate one path and estimate from it")
    c = sub.add_parser("constants", parents=[common], help="lambda^{family,p}")
    c.add_argument("--family", type=int, choices=(1, 2, 3), required=True)
    c.add_argument("--method", choices=("closed_form", "table", "mc"))
    for name in ("lln", "clt", "rate", "jump-clt"):
        sub.add_parser(name, parents=[common], help=f"{name} experiment")
    f = sub.add_parser("figure1", parents=[common], help="Lambda^1 vs Lambda^3 over a p grid")
    f.add_argument("--pmin", type=float, default=0.5)
    f.add_argument("--pmax", type=float, default=4.0)
    f.add_argument("--step", type=float, default=0.25)
    f.add_argument("--method", choices=("table", "mc"))
    return parser


def _loaded(args) -> LoadedConfig:
    if args.config is None:
        loaded = parse_config("")
    else:
        try:
            loaded = load_config(args.config)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config: {exc}", "--config") from None
    grid = loaded.grid
    if args.n is not None or args.m is not None:
        try:
            grid = TimeGrid(grid.horizon, args.n or grid.n_coarse, args.m or grid.m_fine)
        except ArgumentError as exc:
            raise ConfigurationError(str(exc), "--n/--m") from None
    functional = loaded.functional
    if functional is not None and args.p is not None:
        functional = FUNCTIONALS[functional.kind](args.p)
    return replace(loaded, grid=grid, functional=functional)


def _header(seed: int, payload) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str)
    h = hashlib.sha256(blob.encode()).hexdigest()[:16]
    return f"hfpath={__version__} seed={seed} config_sha256={h}"


def _write_rows(path: Path, header: str, columns, rows) -> None:
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, (float, np.floating)):
            return f"{float(v):.17g}"
        return str(v)

    lines = [f"# {header}", ",".join(columns)]
    lines += [",".join(fmt(r.get(c)) for c in columns) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def _cmd_simulate(args, loaded):
    path = simulate_path(loaded.model, loaded.grid, SeedStream(args.seed))
    header = _header(args.seed, [loaded.digest, loaded.grid.n_coarse, loaded.grid.m_fine])
    write_path_csv(path, args.out_dir, header)
    print(f"wrote {loaded.grid.n_points} points and {len(path.jumps)} jumps to {args.out_dir}")


def _cmd_estimate(args, loaded):
    g = loaded.functional
    path = simulate_path(loaded.model, loaded.grid, SeedStream(args.seed))
    level = args.level if args.level is not None else 0.95
    rows = []
    if path.has_jumps:
        p = args.p if args.p is not None else (g.p if g is not None else 2.0)
        if g is None or g.kind == "range_power":
            rows.append(to_csv_row(realized_range(path, p), "realized_range", path, args.seed))
        else:
            rows.append(to_csv_row(power_variation(path, p), "power_variation", path, args.seed))
    else:
        if g is None:
            raise ConfigurationError("estimate needs a [functional] section", "functional.kind")
        res = feasible_ci(path, g, level)
        if res.degenerate:
            var = bipower_variance(path, g)
            raise DegenerateVarianceError(f"bipower variance estimate {var.value:.6g} is not positive")
        rows.append(to_csv_row(res, f"V[{g}]", path, args.seed))
    header = _header(args.seed, [loaded.digest, loaded.grid.n_coarse, loaded.grid.m_fine, args.p, level])
    args.out_dir.mkdir(parents=True, exist_ok=True)
    _write_rows(args.out_dir / "estimates.csv", header, CSV_COLUMNS, rows)
    for r in rows:
        ci = "" if r["ci_lo"] is None else f" CI=[{r['ci_lo']:.10g}, {r['ci_hi']:.10g}]"
        print(f"{r['estimator']} = {r['value']:.10g}{ci}")


def _cmd_constants(args, loaded):
    if args.p is None:
        raise ConfigurationError("constants needs --p", "--p")
    reps = args.reps or 100_000
    est = lambda_const(args.family, args.p, method=args.method, reps=reps,
                       seed=SeedStream(args.seed).child(args.family))
    row = {"family": args.family, "p": args.p, "value": est.value, "std_error": est.std_error,
           "method": est.method, "m": est.m, "reps": est.reps, "seed": args.seed}
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_constants_csv([row], args.out_dir / "constants.csv",
                        _header(args.seed, [args.family, args.p, args.method, reps]))
    print(est.value)


def _cmd_experiment(args, loaded):
    kind = EXPERIMENT_KINDS[args.command]
    if kind == "lln" and loaded.model.jumps is not None:
        kind = "jump_lln"
    over = {"seed": args.seed, "threads": args.threads, "replications": args.reps, "level": args.level}
    if args.n is not None or args.m is not None:
        over["ladder"] = ((loaded.grid.n_coarse, loaded.grid.m_fine),)
    if loaded.functional is not None:
        over["functional"] = loaded.functional
    if args.p is not None:
        over["p"] = args.p
    if kind == "figure1":
        if args.step <= 0 or args.pmax < args.pmin:
            raise ConfigurationError("need --step > 0 and --pmax >= --pmin", "--step")
        k = int(round((args.pmax - args.pmin) / args.step))
        over["p_grid"] = tuple(round(args.pmin + i * args.step, 10) for i in range(k + 1))
        over["constant_method"] = args.method
    cfg = experiment_config(loaded, kind, **over)
    report = run(cfg)
    echo = config_echo(cfg)
    echo.pop("threads", None)
    header = _header(args.seed, echo)
    csv_path, _ = report.write(args.out_dir, name=kind, comment=header)
    print(f"wrote {csv_path}")
    for name, ok in report.checks.items():
        print(f"check {name}: {'ok' if ok else 'FAILED'}")


COMMANDS = {"simulate": _cmd_simulate, "estimate": _cmd_estimate, "constants": _cmd_constants}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.threads < 0:
            raise ConfigurationError("--threads must be >= 0", "--threads")
        loaded = _loaded(args)
        COMMANDS.get(args.command, _cmd_experiment)(args, loaded)
    except (ConfigurationError, ArgumentError, UnsupportedError, MisuseError) as exc:
        key = getattr(exc, "key", None)
        prefix = f"configuration error [{key}]" if key else "usage error"
        print(f"hfpath: {prefix}: {exc}", file=sys.stderr)
        return 2
    except (IntegrationDivergedError, DegenerateVarianceError, InternalConstantError, OSError) as exc:
        print(f"hfpath: runtime error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
