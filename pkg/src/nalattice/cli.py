"""Command-line front end.

Every run resolves its flags and optional ``--config`` file into one JSON
document (the manifest), which is written next to the outputs and can be fed
back through ``--config`` to reproduce them byte for byte.  Flags override
values from the file.

``nalattice replay MANIFEST`` reruns a manifest.  Exit codes: 0 all verdicts
HOLDS/BOUNDED, 1 any VIOLATED (or UNBOUNDED), 2 usage or config error, 3
INCONCLUSIVE present under ``--strict``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import inequalities as ineq
from ._version import __version__
from .fieldio import write_field
from .generators import GeneratorSpec, parse_kind, sample_field, spec_from_dict, spec_to_dict
from .lattice import Field, MultiIndex, partial_sums_scan
from .lil import (LilConfig, increment_trajectories, necessity_probe, run_lil_trajectories, run_manifest,
                  trajectory_csv)
from .oracles import brute_force_partial_sums, multinomial_exact_cov

EXIT_OK, EXIT_VIOLATED, EXIT_USAGE, EXIT_INCONCLUSIVE = 0, 1, 2, 3
CONFIG_SCHEMA = "nalattice.config/1"

VERIFIERS = ("rosenthal", "tail", "normal-lower", "convex", "symmetrization", "ratio", "kolmogorov",
             "borel-cantelli")

# default command parameters; the resolved manifest always lists all of them
DEFAULTS = {
    "generate": {"format": "naf"},
    "verify": {
        "rosenthal": {"p": 2.0},
        "tail": {"x": [10.0], "a": 1.0},
        "normal-lower": {"x": [1.0]},
        "convex": {"convex": "square"},
        "symmetrization": {"p": 2.0},
        "ratio": {"p": 2.0, "shapes": []},
        "kolmogorov": {"x": [1.0], "reps_mean": None},
        "borel-cantelli": {"threshold": 2.0},
    },
    "lil": {"theta": 1.5, "kmax": 20, "seeds": [], "statistic": "abs", "max_cells": 20_000_000},
    "increments": {"theta": 1.5, "kmax": 16, "seeds": [], "delta": 0.01, "max_cells": 20_000_000},
    "necessity": {"threshold": 1.0, "kmax": 1024},
    "oracle-check": {"fields": 200, "max_cells": 500},
}
DEFAULT_REPS = {"verify": 10_000, "necessity": 200}


class ConfigError(ValueError):
    pass


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _shapes(text: str) -> list[str]:
    return [str(MultiIndex.parse(v.strip())) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nalattice", description="NA random field toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_spec=True):
        p.add_argument("--config", help="JSON config or manifest to start from")
        if with_spec:
            p.add_argument("--spec", help="generator, e.g. rademacher or gauss-nn:rho=0.2")
            p.add_argument("--shape", help="field shape n1xn2x...")
            p.add_argument("--d", type=int, help="dimension when no shape is given")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--reps", type=int, help="Monte Carlo replications")
        p.add_argument("--out", help="output path (file for generate, directory otherwise)")
        p.add_argument("--threads", type=int, help="worker threads (default $NA_LATTICE_THREADS or 1)")
        p.add_argument("--strict", action="store_true", help="exit 3 when a verdict is INCONCLUSIVE")

    p = sub.add_parser("generate", help="sample one field and write it (NAF1 or CSV)")
    common(p)
    p.add_argument("--format", choices=("naf", "csv"))

    p = sub.add_parser("verify", help="check one inequality by Monte Carlo")
    p.add_argument("name", choices=VERIFIERS)
    common(p)
    p.add_argument("--x", type=_floats, help="comma list of x values")
    p.add_argument("--a", type=float)
    p.add_argument("--p", type=float)
    p.add_argument("--convex", help="square, abs_cube, exp:<t> or hinge:<c>")
    p.add_argument("--shapes", type=_shapes, help="comma list of shapes for the ratio ladder")
    p.add_argument("--threshold", type=float, help="constant threshold for borel-cantelli")
    p.add_argument("--reps-mean", dest="reps_mean", type=int, help="stage-1 replications for kolmogorov")

    for name, helptext in (("lil", "normalized partial-sum trajectories"),
                           ("increments", "increment trajectories with their ceiling")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--theta", type=float)
        p.add_argument("--kmax", type=int)
        p.add_argument("--seeds", type=_ints, help="comma list of seeds (default: --seed)")
        p.add_argument("--max-cells", dest="max_cells", type=int)
        if name == "lil":
            p.add_argument("--statistic", choices=("signed", "abs", "max"))
        else:
            p.add_argument("--delta", type=float)

    p = sub.add_parser("necessity", help="tail-sum probe for the moment condition")
    common(p)
    p.add_argument("--threshold", type=float, help="threshold constant C")
    p.add_argument("--kmax", type=int)

    p = sub.add_parser("oracle-check", help="compare the scan engine with brute force")
    common(p, with_spec=False)
    p.add_argument("--fields", type=int)
    p.add_argument("--max-cells", dest="max_cells", type=int)
    return parser


# --------------------------------------------------------------------------
# config resolution


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    # trajectory manifests nest the run config next to their results
    return data.get("run", data)


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and flags into the canonical config."""
    base = _load_config(args.config)
    command = args.command
    if base.get("command", command) != command:
        raise ConfigError(f"config is for {base['command']!r}, not {command!r}")
    name = getattr(args, "name", None) or base.get("name")
    if command == "verify" and base.get("name") not in (None, name):
        raise ConfigError(f"config is for verifier {base['name']!r}, not {name!r}")

    defaults = DEFAULTS[command][name] if command == "verify" else DEFAULTS[command]
    params = dict(defaults)
    params.update(base.get("params", {}))
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            params[key] = value
    unknown = set(params) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown parameters {sorted(unknown)}")

    seed = args.seed if args.seed is not None else base.get("seed", 0)
    reps = args.reps if args.reps is not None else base.get("reps", DEFAULT_REPS.get(command))
    cfg = {"schema": CONFIG_SCHEMA, "version": __version__, "command": command}
    if command == "verify":
        cfg["name"] = name
    if hasattr(args, "spec"):
        cfg["spec"] = spec_to_dict(_resolve_spec(args, base.get("spec"), int(seed)))
    cfg["seed"] = int(seed)
    cfg["reps"] = None if reps is None else int(reps)
    cfg["params"] = params
    if command in ("lil", "increments") and not params["seeds"]:
        params["seeds"] = [cfg["seed"]]
    return json.loads(json.dumps(cfg))


def _resolve_spec(args, base_spec: dict | None, seed: int) -> GeneratorSpec:
    kind = parse_kind(args.spec) if args.spec else None
    if kind is None and base_spec is None:
        raise ConfigError("--spec is required")
    if args.shape:
        shape = MultiIndex.parse(args.shape)
    elif args.d:
        shape = MultiIndex.diagonal(2, args.d)
    elif base_spec is not None:
        shape = MultiIndex.parse(str(base_spec["shape"]))
    else:
        raise ConfigError("--shape or --d is required")
    if kind is None:
        kind = spec_from_dict(base_spec).kind
    return GeneratorSpec(kind, shape, seed)


# --------------------------------------------------------------------------
# commands


def _write(out: Path | None, name: str, text: str) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _manifest_text(cfg: dict, extra: dict | None = None) -> str:
    data = dict(cfg)
    if extra:
        data["results"] = extra
    return json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _verdict_exit(verdicts: Sequence[str], strict: bool) -> int:
    if "VIOLATED" in verdicts or "UNBOUNDED" in verdicts:
        return EXIT_VIOLATED
    if strict and "INCONCLUSIVE" in verdicts:
        return EXIT_INCONCLUSIVE
    return EXIT_OK


def _run_generate(cfg, out, threads):
    spec = spec_from_dict(cfg["spec"])
    if out is None:
        raise ConfigError("generate needs --out")
    path = Path(out)
    if cfg["params"]["format"] == "csv" and path.suffix.lower() != ".csv":
        raise ConfigError("--format csv needs an output path ending in .csv")
    field = sample_field(spec)
    write_field(path, field)
    path.with_name(path.name + ".manifest.json").write_text(_manifest_text(cfg))
    return EXIT_OK, []


def _run_verify(cfg, out, threads):
    spec = spec_from_dict(cfg["spec"])
    p, reps, seed, name = cfg["params"], cfg["reps"], cfg["seed"], cfg["name"]
    kw = {"reps": reps, "seed": seed, "threads": threads}
    if name == "rosenthal":
        reports = [ineq.verify_rosenthal(spec, p["p"], **kw)]
    elif name == "tail":
        reports = [ineq.verify_tail_exponential(spec, x, p["a"], **kw) for x in p["x"]]
    elif name == "normal-lower":
        reports = [ineq.verify_normal_lower(spec, x, **kw) for x in p["x"]]
    elif name == "convex":
        reports = [ineq.verify_convex_comparison(spec, p["convex"], **kw)]
    elif name == "symmetrization":
        reports = [ineq.verify_symmetrization(spec, p["p"], **kw)]
    elif name == "ratio":
        shapes = p["shapes"] or [str(spec.shape)]
        reports = ineq.max_moment_ratio(spec, p["p"], shapes, **kw)
    elif name == "kolmogorov":
        reports = ineq.verify_kolmogorov_exponential(spec, p["x"], reps_mean=p["reps_mean"], **kw)
    else:
        reports = [ineq.verify_borel_cantelli_bound(spec, p["threshold"], **kw)]
    out = None if out is None else Path(out)
    _write(out, "reports.json", ineq.reports_to_json(reports))
    if out is not None:
        _write(out, "reports.csv", ineq.reports_to_csv(reports))
        _write(out, "manifest.json", _manifest_text(cfg))
    return None, [r.verdict.value for r in reports]


def _lil_config(cfg) -> LilConfig:
    p = cfg["params"]
    return LilConfig(spec_from_dict(cfg["spec"]), theta=p["theta"], k_max=p["kmax"], seeds=tuple(p["seeds"]),
                     statistic=p.get("statistic", "abs"), max_cells=p["max_cells"])


def _run_trajectories(cfg, out, threads):
    config = _lil_config(cfg)
    if cfg["command"] == "lil":
        trajectories = run_lil_trajectories(config, threads)
    else:
        trajectories = increment_trajectories(config, cfg["params"]["delta"], threads)
    out = None if out is None else Path(out)
    for t in trajectories:
        name = f"trajectory_seed{t.seed}.csv"
        text = trajectory_csv(t, config.d)
        if out is None:
            sys.stdout.write(f"# {name}\n{text}")
        else:
            _write(out, name, text)
    if out is not None:
        _write(out, "manifest.json", run_manifest(config, trajectories, {"run": cfg}))
    verdicts = []
    if cfg["command"] == "increments":
        verdicts = ["HOLDS" if t.final_running_max <= t.ceiling else "VIOLATED" for t in trajectories]
    return None, verdicts


def _run_necessity(cfg, out, threads):
    p = cfg["params"]
    report = necessity_probe(spec_from_dict(cfg["spec"]), p["threshold"], p["kmax"], reps=cfg["reps"],
                             seed=cfg["seed"], threads=threads)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"
    out = None if out is None else Path(out)
    _write(out, "necessity.json", text)
    if out is not None:
        _write(out, "manifest.json", _manifest_text(cfg))
    return EXIT_OK, []


def oracle_check(fields: int, max_cells: int, seed: int) -> dict:
    """Engine vs brute force on random integer and float fields, d in {1, 2, 3}."""
    rng = np.random.Generator(np.random.Philox(seed))
    failures = []
    for i in range(fields):
        d = int(rng.integers(1, 4))
        side = max(1, int(round(max_cells ** (1.0 / d))))
        shape = tuple(int(rng.integers(1, side + 1)) for _ in range(d))
        if i % 2 == 0:
            arr = rng.integers(-50, 51, size=shape).astype(np.int64)
        else:
            arr = rng.standard_normal(shape) * 10.0 ** rng.uniform(-3, 3)
        field = Field.from_array(arr)
        fast, slow = partial_sums_scan(field), brute_force_partial_sums(field)
        for key in ("total", "max_abs", "max_signed"):
            a, b = getattr(fast, key), getattr(slow, key)
            tol = 0.0 if arr.dtype.kind == "i" else 1e-12 * max(1.0, abs(b))
            if abs(a - b) > tol:
                failures.append({"field": i, "shape": "x".join(map(str, shape)), "stat": key, "engine": a,
                                 "oracle": b})
    cov_checks = []
    for total in range(1, 5):
        for cells in (2, 3, 5):
            enum = multinomial_exact_cov(total, cells)
            closed = -total / cells**2
            cov_checks.append({"total": total, "cells": cells, "enumerated": enum, "closed_form": closed,
                               "ok": abs(enum - closed) <= 1e-12})
    return {"fields": fields, "failures": failures, "multinomial_cov": cov_checks,
            "ok": not failures and all(c["ok"] for c in cov_checks)}


def _run_oracle_check(cfg, out, threads):
    p = cfg["params"]
    result = oracle_check(p["fields"], p["max_cells"], cfg["seed"])
    text = json.dumps(result, indent=2, sort_keys=True, allow_nan=False) + "\n"
    out = None if out is None else Path(out)
    _write(out, "oracle.json", text)
    if out is not None:
        _write(out, "manifest.json", _manifest_text(cfg))
    return (EXIT_OK if result["ok"] else EXIT_VIOLATED), []


COMMANDS = {
    "generate": _run_generate,
    "verify": _run_verify,
    "lil": _run_trajectories,
    "increments": _run_trajectories,
    "necessity": _run_necessity,
    "oracle-check": _run_oracle_check,
}


def _replay_argv(argv: list[str]) -> list[str]:
    """``replay MANIFEST [flags]`` becomes ``<command> [name] --config MANIFEST [flags]``."""
    if len(argv) < 2:
        raise ConfigError("replay needs a manifest path")
    cfg = _load_config(argv[1])
    if cfg.get("command") not in COMMANDS:
        raise ConfigError(f"{argv[1]} is not a run manifest")
    head = [cfg["command"]] + ([cfg["name"]] if cfg["command"] == "verify" else [])
    return head + ["--config", argv[1], *argv[2:]]


def dispatch(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "replay":
        try:
            argv = _replay_argv(argv)
        except ConfigError as exc:
            print(f"nalattice: error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = resolve_config(args)
        code, verdicts = COMMANDS[cfg["command"]](cfg, args.out, args.threads)
    except (ConfigError, ValueError, KeyError, TypeError, OverflowError) as exc:
        print(f"nalattice: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if code is not None and code != EXIT_OK:
        return code
    return _verdict_exit(verdicts, args.strict)


def main() -> None:
    sys.exit(dispatch())
