"""``sideinfo`` command-line interface.

Commands: ``generate``, ``train``, ``sweep``, ``gradcheck``, ``oracle-check``.
Benchmark settings come from (lowest to highest precedence) built-in defaults,
an optional flat YAML file given with ``--config``, and command-line flags.

Exit codes: 0 success, 1 invalid input or unwritable output, 2 failed cells
under ``--strict`` (and failed checks for ``gradcheck`` / ``oracle-check``).
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import os
import subprocess
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import __version__
from .bench import (
    BASELINE_PROCEDURE,
    BASELINES,
    BenchConfig,
    GeneratorConfig,
    aggregate,
    default_workers,
    generate,
    run_cell_detailed,
    run_sweep,
    write_aggregate_csv,
    write_raw_csv,
)
from .checks import GRADCHECK_DRAWS, LOSS_TOL, MAP_FAMILIES, ORACLE_SUITES, run_gradcheck, run_oracle_suites
from .models import save_snapshot
from .patterns import SIGMA_KINDS

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILURES = 2


class CliError(Exception):
    """Invalid input; reported on stderr with exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for failed cells here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ config resolution

_LIST_FIELDS = {"hidden", "c_grid", "extra_applicability"}
_BOOL_FIELDS = {"phi_bias", "psi_bias"}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _split(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _add_bench_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("benchmark settings (override --config)")
    g.add_argument("--config", type=Path, help="flat YAML file with benchmark settings")
    for f in fields(BenchConfig):
        kw = {"dest": f"cfg_{f.name}", "default": None}
        if f.name in _BOOL_FIELDS:
            kw["type"] = _parse_bool
            kw["metavar"] = "BOOL"
        elif f.name in _LIST_FIELDS:
            kw["type"] = _split
            kw["metavar"] = "A,B,..."
        elif f.name in ("e", "d", "test_size", "epochs", "batch_size", "finetune_epochs"):
            kw["type"] = int
        elif f.name in ("init", "sigma", "preprocess"):
            kw["type"] = str
        else:
            kw["type"] = float
        g.add_argument(_flag(f.name), **kw)


def _load_config_file(path: Path) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise CliError(f"config file {path} is not valid YAML: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise CliError(f"config file {path} must hold a flat mapping of keys to values")
    out = {}
    for key, value in doc.items():
        name = str(key).replace("-", "_")
        if isinstance(value, dict):
            raise CliError(f"config key {key!r}: nested sections are not supported")
        out[name] = value
    return out


def resolve_config(args: argparse.Namespace) -> BenchConfig:
    """Defaults, then the config file, then explicit flags."""
    values = {}
    if getattr(args, "config", None) is not None:
        values.update(_load_config_file(args.config))
    for f in fields(BenchConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            values[f.name] = v
    try:
        return BenchConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise CliError(str(exc)) from exc


# ------------------------------------------------------------------ metadata sidecar

def _git_describe() -> Optional[str]:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return None
    if out.returncode != 0:
        return None
    return out.stdout.strip() or None


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="milliseconds")


def resolved_echo(command: str, config: Optional[BenchConfig], extra: dict) -> dict:
    """The deterministic part of the sidecar: command, settings and command arguments."""
    return {"command": command, "version": __version__,
            "config": config.to_dict() if config is not None else None, "arguments": extra}


def write_sidecar(path: Path, echo: dict, started: str, extra: Optional[dict] = None) -> None:
    doc = dict(echo)
    doc["git_describe"] = _git_describe()
    doc["timestamps"] = {"started": started, "finished": _now()}
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2, default=_json_default) + "\n", encoding="utf-8")


def _json_default(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def _prepare_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise CliError(f"output directory {path} is not writable")
    return path


def _prepare_file(path: Path) -> Path:
    _prepare_dir(path.parent if str(path.parent) else Path("."))
    if path.exists() and path.is_dir():
        raise CliError(f"output path {path} is a directory")
    return path


def _sidecar_for(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


# ------------------------------------------------------------------ commands

def cmd_generate(args) -> int:
    started = _now()
    cfg = resolve_config(args)
    try:
        gen = GeneratorConfig(d=cfg.d, e=cfg.e, noise_std=cfg.noise_std, T=args.T, seed=args.seed)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    out = _prepare_file(args.output)
    traj = generate(gen)
    with open(out, "wb") as fh:
        np.savez(fh, **vars(traj))
    echo = resolved_echo("generate", cfg, {"T": args.T, "seed": args.seed, "output": str(args.output)})
    write_sidecar(_sidecar_for(out), echo, started)
    print(f"wrote trajectory of length {args.T} to {out}")
    return EXIT_OK


def _procedure_for(pattern: str, procedure: str) -> str:
    return BASELINE_PROCEDURE if pattern in BASELINES else procedure


def cmd_train(args) -> int:
    started = _now()
    cfg = resolve_config(args)
    out = _prepare_file(args.output)
    procedure = _procedure_for(args.pattern, args.procedure)
    trace = [] if args.trace is not None else None
    try:
        record, stack = run_cell_detailed(args.side_info, args.pattern, procedure, args.n, args.seed, cfg, trace)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    write_raw_csv(out, [record])
    if trace is not None:
        trace_path = _prepare_file(args.trace)
        with open(trace_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "main_loss", "side_loss"])
            for row in trace:
                w.writerow([row["epoch"], repr(float(row["main_loss"])), repr(float(row["side_loss"]))])
    if args.snapshot is not None:
        if stack is None:
            raise CliError("baselines have no parameter snapshot")
        _prepare_file(args.snapshot).write_text(save_snapshot(stack), encoding="utf-8")
    echo = resolved_echo("train", cfg, {"side_info": args.side_info, "pattern": args.pattern,
                                        "procedure": procedure, "n": args.n, "seed": args.seed})
    write_sidecar(_sidecar_for(out), echo, started, {"error": record.error} if record.failed else None)
    status = "FAILED: " + record.error if record.failed else f"accuracy {record.test_accuracy:.4f}"
    print(f"{record.side_info}/{record.pattern}/{record.procedure} n={record.n_train} seed={record.seed}: {status}")
    if record.failed and args.strict:
        return EXIT_FAILURES
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        out = [int(t) for t in _split(text)]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def sweep_cells(side_infos: Sequence[str], patterns: Sequence[str], procedures: Sequence[str]) -> list[tuple]:
    """Cartesian product of the requested cells; a baseline appears once per side channel."""
    cells = []
    for side in side_infos:
        for pattern in patterns:
            for proc in ([BASELINE_PROCEDURE] if pattern in BASELINES else procedures):
                if (side, pattern, proc) not in cells:
                    cells.append((side, pattern, proc))
    return cells


def cmd_sweep(args) -> int:
    started = _now()
    cfg = resolve_config(args)
    workers = args.workers if args.workers is not None else default_workers()
    if workers < 1:
        raise CliError("--workers must be >= 1")
    if args.seeds < 1:
        raise CliError("--seeds must be >= 1")
    seeds = list(range(args.first_seed, args.first_seed + args.seeds))
    cells = sweep_cells(_split(args.side_info), _split(args.patterns), _split(args.procedures))
    out_dir = _prepare_dir(args.output)
    raw_path, agg_path, meta_path = out_dir / "raw.csv", out_dir / "aggregate.csv", out_dir / "metadata.json"
    try:
        records = run_sweep(cells, args.n, seeds, cfg, workers)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    write_raw_csv(raw_path, records)
    write_aggregate_csv(agg_path, aggregate(records))
    failures = [{"cell": list(r.key()), "error": r.error} for r in records if r.failed]
    echo = resolved_echo("sweep", cfg, {"cells": [list(c) for c in cells], "n": list(args.n), "seeds": seeds})
    write_sidecar(meta_path, echo, started, {"failures": failures, "workers": workers})
    print(f"{len(records)} runs ({len(failures)} failed) -> {raw_path}, {agg_path}")
    if failures and args.strict:
        return EXIT_FAILURES
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        results = run_gradcheck(only=args.only, sigma=args.sigma, family=args.family,
                                draws=args.draws, seed=args.seed)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  max_rel_error={r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    bad = sum(not r.passed for r in results)
    print(f"{len(results) - bad}/{len(results)} combinations within tolerance")
    return EXIT_OK if bad == 0 else EXIT_FAILURES


def _tolerance(text: str) -> float:
    try:
        v = float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from exc
    if not (v >= 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"tolerance must be finite and non-negative, got {text}")
    return v


def cmd_oracle_check(args) -> int:
    suites = _split(args.suite) if args.suite else list(ORACLE_SUITES)
    try:
        results = run_oracle_suites(suites, tolerance=args.tolerance, seed=args.seed)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    for r in results:
        summary = ", ".join(f"{k}={v:.3g}" for k, v in r.details.items() if isinstance(v, float))
        print(f"{r.name:<5} {'PASS' if r.passed else 'FAIL'}  {summary}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURES


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sideinfo", description="Learning with side information on a synthetic random-walk task.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="sample one trajectory and save it as .npz")
    _add_bench_flags(g)
    g.add_argument("--T", type=int, default=1000, help="trajectory length")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--output", type=Path, required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train and evaluate a single cell")
    _add_bench_flags(t)
    t.add_argument("--side-info", required=True, choices=["direct", "embedded", "relative"])
    t.add_argument("--pattern", required=True)
    t.add_argument("--procedure", default="simultaneous")
    t.add_argument("--n", type=int, required=True, help="training trajectory length")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--output", type=Path, required=True, help="single-row raw CSV")
    t.add_argument("--trace", type=Path, help="write per-epoch losses to this CSV")
    t.add_argument("--snapshot", type=Path, help="write trained parameters to this JSON file")
    t.add_argument("--strict", action="store_true", help="exit 2 if training failed")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run patterns x procedures x n x seeds and write CSVs")
    _add_bench_flags(s)
    s.add_argument("--side-info", required=True, help="comma-separated side channels")
    s.add_argument("--patterns", required=True, help="comma-separated patterns and/or baselines")
    s.add_argument("--procedures", default="decoupled,simultaneous")
    s.add_argument("--n", type=_int_list, required=True, help="comma-separated training lengths")
    s.add_argument("--seeds", type=int, default=10, help="number of seeds")
    s.add_argument("--first-seed", type=int, default=0)
    s.add_argument("--output", type=Path, required=True, help="output directory")
    s.add_argument("--workers", type=int, default=None, help="parallel processes (default: $SIDEINFO_WORKERS or 1)")
    s.add_argument("--strict", action="store_true", help="exit 2 if any cell failed")
    s.set_defaults(func=cmd_sweep)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    gc.add_argument("--only", help="restrict to one pattern")
    gc.add_argument("--sigma", choices=SIGMA_KINDS, help="restrict to one proximity function")
    gc.add_argument("--family", choices=MAP_FAMILIES, help="restrict to one map family")
    gc.add_argument("--draws", type=int, default=GRADCHECK_DRAWS)
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    oc = sub.add_parser("oracle-check", help="run the independent oracle suites")
    oc.add_argument("--suite", help=f"comma-separated subset of {','.join(ORACLE_SUITES)}")
    oc.add_argument("--tolerance", type=_tolerance, default=LOSS_TOL,
                    help="absolute tolerance of the loss-equality suite")
    oc.add_argument("--seed", type=int, default=0)
    oc.set_defaults(func=cmd_oracle_check)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"sideinfo: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"sideinfo: error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
