"""Command-line front end.

Each invocation runs one experiment.  Parameters come from a flat JSON
document (``--config path`` or ``--config -`` for stdin) and/or command
flags, flags taking precedence.  Output goes to ``--out``: a
``summary.json`` echoing the resolved configuration, command-specific CSV
files and PNG figures.

Exit status: 0 on success, 1 when an invariant check fails or the run
aborts, 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checks, plotting
from .continuum import (
    conservation_check,
    make_continuum_field,
    run_pde,
    to_dual_chart,
)
from .errors import ConfigError, GSCError
from .lattice import CouplingConfig, Init, profile_extract, run_gsc
from .model import Chart, model_from_config
from .potential import ModelFamily, find_fixed_points, potential_profile, threshold_scan
from .report import write_csv, write_summary

__all__ = ["main", "resolve_config", "parse_model_spec", "COMMANDS"]

COMMANDS = ("fixed-points", "threshold", "gsc-run", "pde-run", "conservation-check", "verify")

LYAPUNOV_SLACK = 1e-9

_COMMON = {"command": None, "model": None, "out": "out", "seed": 0, "workers": None}
_DEFAULTS = {
    "fixed-points": {"grid_resolution": 2001, "points": 401},
    "threshold": {"kind": "bp", "tol": 1e-3, "iterations": 10_000, "grid_resolution": 2001, "points": 401},
    "gsc-run": {
        "k": 1,
        "l": 64,
        "w": 2,
        "init": "all_bad",
        "max_iters": 100_000,
        "stop_eps": 1e-10,
        "snapshot_every": 0,
    },
    "pde-run": {
        "k": 1,
        "n": 257,
        "m": 1e-3,
        "dt": None,
        "init": "all_bad",
        "chart": "v_affine",
        "steps": 1_000_000,
        "stop_eps": 1e-13,
        "snapshot_every": 0,
        "record_every": 1,
    },
    "conservation-check": {"n": 257, "m": 1e-3, "dt": None, "steps": 1_000_000, "stop_eps": 1e-14},
    "verify": {},
}


# -- validation ---------------------------------------------------------------


def _int(key, value, lo=None, hi=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(key, f"expected an integer, got {value!r}")
    if lo is not None and value < lo:
        raise ConfigError(key, f"must be >= {lo}, got {value}")
    if hi is not None and value > hi:
        raise ConfigError(key, f"must be <= {hi}, got {value}")
    return value


def _pos_float(key, value, allow_none=False):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"expected a number, got {value!r}")
    if not np.isfinite(value) or value <= 0:
        raise ConfigError(key, f"must be positive and finite, got {value}")
    return float(value)


def _path(key, value):
    if not isinstance(value, str) or not value:
        raise ConfigError(key, f"expected a directory path, got {value!r}")
    return value


def _choice(key, value, options):
    if value not in options:
        raise ConfigError(key, f"must be one of {', '.join(options)}, got {value!r}")
    return value


_VALIDATORS = {
    "out": lambda k, v: _path(k, v),
    "seed": lambda k, v: _int(k, v, 0, 2**64 - 1),
    "workers": lambda k, v: None if v is None else _int(k, v, 1),
    "grid_resolution": lambda k, v: _int(k, v, 3),
    "points": lambda k, v: _int(k, v, 2),
    "kind": lambda k, v: _choice(k, v, ("bp", "potential")),
    "tol": lambda k, v: _pos_float(k, v),
    "iterations": lambda k, v: _int(k, v, 1),
    "k": lambda k, v: _int(k, v, 1, 3),
    "l": lambda k, v: _int(k, v, 2),
    "w": lambda k, v: _int(k, v, 0),
    "init": lambda k, v: _choice(k, v, ("all_bad", "all_good")),
    "max_iters": lambda k, v: _int(k, v, 1),
    "stop_eps": lambda k, v: _pos_float(k, v),
    "snapshot_every": lambda k, v: _int(k, v, 0),
    "n": lambda k, v: _int(k, v, 3),
    "m": lambda k, v: _pos_float(k, v),
    "dt": lambda k, v: _pos_float(k, v, allow_none=True),
    "chart": lambda k, v: _choice(k, v, ("v_affine", "u_affine")),
    "steps": lambda k, v: _int(k, v, 0),
    "record_every": lambda k, v: _int(k, v, 1),
}


def parse_model_spec(spec):
    """``regular_bec:l,r[,eps]``; join components with ``+`` for a product."""
    if isinstance(spec, dict):
        return spec
    if not isinstance(spec, str):
        raise ConfigError("model", f"expected a string or object, got {spec!r}")
    parts = spec.split("+")
    comps = []
    for part in parts:
        name, _, args = part.strip().partition(":")
        if name != "regular_bec":
            raise ConfigError("model", f"unknown model type {name!r}")
        try:
            vals = [a.strip() for a in args.split(",")]
            if len(vals) not in (2, 3):
                raise ValueError
            rec = {"type": "regular_bec", "l": int(vals[0]), "r": int(vals[1])}
            if len(vals) == 3:
                rec["eps"] = float(vals[2])
        except ValueError:
            raise ConfigError("model", f"cannot parse {part!r}; expected regular_bec:l,r[,eps]") from None
        comps.append(rec)
    return comps[0] if len(comps) == 1 else {"type": "product", "components": comps}


def resolve_config(raw):
    """Fill defaults and validate; returns the resolved flat config."""
    if not isinstance(raw, dict):
        raise ConfigError("config", "expected a JSON object")
    command = raw.get("command")
    if command not in COMMANDS:
        raise ConfigError("command", f"must be one of {', '.join(COMMANDS)}, got {command!r}")
    allowed = {**_COMMON, **_DEFAULTS[command]}
    for key in raw:
        if key not in allowed:
            raise ConfigError(key, f"unknown key for {command}")
    cfg = {**allowed, **raw}
    for key, value in cfg.items():
        if key in _VALIDATORS:
            cfg[key] = _VALIDATORS[key](key, value)
    if cfg["model"] is None:
        if command != "verify":
            raise ConfigError("model", "missing")
    else:
        cfg["model"] = parse_model_spec(cfg["model"])
        # build once to validate; threshold scans leave eps free
        model_from_config(cfg["model"], free_eps=0.5 if command == "threshold" else None)
    return cfg


# -- commands ----------------------------------------------------------------


def _fixed_point_outputs(model, out, grid_resolution, points, stem="potential_profile"):
    report = find_fixed_points(model, grid_resolution)
    (out / "fixed_points.json").write_text(
        json.dumps({"model": model.config(), **report.as_dict()}, indent=2, sort_keys=True) + "\n"
    )
    s, v, dv, perf = potential_profile(model, points)
    write_csv(out / f"{stem}.csv", ["u", "V", "dV", "perf"], zip(s, v, dv, perf))
    plotting.plot_potential_profile(out / f"{stem}.png", s, v, report.points if model.n == 1 else (), model.name)
    duality = max((abs(p.value - p.dual_value) for p in report.points), default=0.0)
    return report, duality


def cmd_fixed_points(cfg, out):
    model = model_from_config(cfg["model"])
    report, duality = _fixed_point_outputs(model, out, cfg["grid_resolution"], cfg["points"])
    flags = {"potential_duality": duality < 1e-10, "has_stable_point": report.best is not None}
    return {
        "n_points": len(report.points),
        "points": [p.as_dict() for p in report.points],
        "good": report.good,
        "best": report.best,
        "bad": report.bad,
        "saturates": report.saturates,
        "duality_max_error": duality,
        "flags": flags,
    }


def cmd_threshold(cfg, out):
    spec = cfg["model"]
    family = ModelFamily(
        f"{cfg['kind']} family",
        lambda eps: model_from_config(spec, free_eps=eps),
        (0.0, 1.0),
        cfg["grid_resolution"],
    )
    trace = []
    value = threshold_scan(family, cfg["kind"], cfg["tol"], cfg["iterations"], trace)
    write_csv(out / "threshold_trace.csv", ["param", "below"], trace)
    model = family(value)
    report, duality = _fixed_point_outputs(model, out, cfg["grid_resolution"], cfg["points"])
    return {
        "threshold": value,
        "evaluations": len(trace),
        "model_at_threshold": model.config(),
        "flags": {"potential_duality": duality < 1e-10},
    }


def cmd_gsc_run(cfg, out):
    model = model_from_config(cfg["model"])
    report = find_fixed_points(model)
    if report.u_good is None:
        raise GSCError("model has no stable fixed point to pin the boundary to")
    config = CouplingConfig(cfg["k"], cfg["l"], cfg["w"], report.u_good)
    run = run_gsc(
        model,
        config,
        Init(cfg["init"]),
        cfg["max_iters"],
        cfg["stop_eps"],
        report=report,
        snapshot_every=cfg["snapshot_every"],
        snapshot_dir=out / "snapshots",
    )
    write_csv(
        out / "history.csv",
        ["iter", "linf_change", "max_perf", "mean_perf"],
        [tuple(h) for h in run.history],
    )
    profiles = []
    for axis in range(config.k):
        prof = profile_extract(model, run.field, axis)
        profiles.append(prof)
        header = ["x", "perf"] + [f"u{a}" for a in range(model.n)]
        write_csv(out / f"profile_axis{axis}.csv", header, [(x, p, *u) for x, p, u in zip(*prof)])
    plotting.plot_gsc_profile(out / "profile.png", profiles)
    if run.history:
        plotting.plot_gsc_history(out / "history.png", run.history)
    perf = model.perf(run.field.data)
    return {
        "status": run.status,
        "iterations": run.iterations,
        "m_coeff": config.m_coeff,
        "u_good": report.u_good,
        "u_bad": report.u_bad,
        "max_perf": float(np.max(perf)),
        "mean_perf": float(np.mean(perf)),
        "flags": {},
    }


def _centre_line(values, k):
    idx = [values.shape[0] // 2] * k
    idx[0] = slice(None)
    return values[tuple(idx)]


def _write_conservation(out, model, fld):
    energy, drift = conservation_check(model, fld)
    write_csv(out / "conservation.csv", ["x", "E"], zip(fld.x, energy))
    plotting.plot_conservation(out / "conservation.png", fld.x, energy)
    return drift


def cmd_pde_run(cfg, out):
    model = model_from_config(cfg["model"])
    chart = Chart(cfg["chart"])
    fld = make_continuum_field(model, cfg["k"], cfg["n"], cfg["m"], chart, Init(cfg["init"]))
    run = run_pde(
        model,
        fld,
        cfg["dt"],
        cfg["steps"],
        cfg["stop_eps"],
        cfg["snapshot_every"],
        out / "snapshots",
        cfg["record_every"],
    )
    write_csv(out / "energy.csv", ["step", "H", "max_residual"], run.rows)
    plotting.plot_pde_energy(out / "energy.png", run.rows)
    fld = run.field
    pre = model.inv_grad_G(fld.values) if chart is Chart.V_AFFINE else fld.values
    line, uline = _centre_line(fld.values, fld.k), _centre_line(pre, fld.k)
    n = model.n
    header = ["x"] + [f"{chart.value}{a}" for a in range(n)] + [f"u{a}" for a in range(n)] + ["perf"]
    perf = model.perf(uline)
    write_csv(out / "profile.csv", header, [(x, *a, *b, p) for x, a, b, p in zip(fld.x, line, uline, perf)])
    plotting.plot_field_profile(out / "profile.png", fld.x, uline, "u")
    summary = {
        "converged": run.converged,
        "steps": fld.step,
        "dt": run.dt,
        "dx": fld.dx,
        "final_H": run.rows[-1][1] if run.rows else None,
        "final_max_residual": run.rows[-1][2] if run.rows else None,
        "max_H_increase": run.max_increase,
        "max_perf": float(np.max(model.perf(pre))),
        "flags": {"lyapunov": bool(run.max_increase <= LYAPUNOV_SLACK)},
    }
    if fld.k == 1:
        dual = to_dual_chart(model, fld) if chart is Chart.V_AFFINE else fld
        summary["conservation_drift"] = _write_conservation(out, model, dual)
    return summary


def cmd_conservation_check(cfg, out):
    model = model_from_config(cfg["model"])
    fld = make_continuum_field(model, 1, cfg["n"], cfg["m"], Chart.U_AFFINE)
    run = run_pde(model, fld, cfg["dt"], cfg["steps"], cfg["stop_eps"], record_every=100)
    write_csv(out / "energy.csv", ["step", "H", "max_residual"], run.rows)
    fld = run.field
    drift = _write_conservation(out, model, fld)
    write_csv(
        out / "profile.csv",
        ["x"] + [f"u{a}" for a in range(model.n)],
        [(x, *u) for x, u in zip(fld.x, fld.values)],
    )
    return {
        "converged": run.converged,
        "steps": fld.step,
        "dx": fld.dx,
        "max_drift": drift,
        "drift_over_dx": drift / fld.dx,
        "max_H_increase": run.max_increase,
        "flags": {"lyapunov": bool(run.max_increase <= LYAPUNOV_SLACK)},
    }


def cmd_verify(cfg, out):
    models = None if cfg["model"] is None else [model_from_config(cfg["model"])]
    results = checks.run_suite(cfg["seed"], cfg["workers"] or os.cpu_count(), models)
    write_csv(
        out / "checks.csv",
        ["name", "model", "measured", "tolerance", "slack", "passed"],
        [(r.name, r.model, r.measured, r.tolerance, r.slack, r.passed) for r in results],
    )
    return {
        "checks": [r.as_dict() for r in results],
        "n_failed": sum(not r.passed for r in results),
        "flags": {"all_passed": all(r.passed for r in results)},
    }


_HANDLERS = {
    "fixed-points": cmd_fixed_points,
    "threshold": cmd_threshold,
    "gsc-run": cmd_gsc_run,
    "pde-run": cmd_pde_run,
    "conservation-check": cmd_conservation_check,
    "verify": cmd_verify,
}


# -- argument parsing -----------------------------------------------------------

_FLAGS = {
    "fixed-points": [("--grid-resolution", int), ("--points", int)],
    "threshold": [("--kind", str), ("--tol", float), ("--iterations", int), ("--grid-resolution", int)],
    "gsc-run": [
        ("--k", int),
        ("--l", int),
        ("--w", int),
        ("--init", str),
        ("--max-iters", int),
        ("--stop-eps", float),
        ("--snapshot-every", int),
    ],
    "pde-run": [
        ("--k", int),
        ("--n", int),
        ("--m", float),
        ("--dt", float),
        ("--init", str),
        ("--chart", str),
        ("--steps", int),
        ("--stop-eps", float),
        ("--snapshot-every", int),
        ("--record-every", int),
    ],
    "conservation-check": [("--n", int), ("--m", float), ("--dt", float), ("--steps", int), ("--stop-eps", float)],
    "verify": [],
}


def build_parser():
    parser = argparse.ArgumentParser(prog="gscpot", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file, or - for stdin")
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, help="worker threads (default: all cores)")
        p.add_argument("--seed", type=int, help="seed for sampled checks")
        p.add_argument("--model", help="e.g. regular_bec:3,6,0.45 (product: join with +)")
        for flag, typ in _FLAGS[name]:
            p.add_argument(flag, type=typ)
    return parser


def _load_config(path):
    try:
        text = sys.stdin.read() if path == "-" else Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON ({exc.msg} at line {exc.lineno})") from None


def _preload(argv):
    """Read ``--config`` early so ``gscpot --config file`` can name the command.

    Returns the (possibly extended) argv and the parsed document, if any.
    """
    if "--config" not in argv:
        return argv, None
    i = argv.index("--config")
    if i + 1 >= len(argv):
        return argv, None
    raw = _load_config(argv[i + 1])
    if not (argv and argv[0] in COMMANDS) and isinstance(raw, dict) and raw.get("command") in COMMANDS:
        argv = [raw["command"], *argv]
    return argv, raw


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv, preloaded = _preload(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        raw = {}
        if args.config is not None:
            raw = preloaded
            if not isinstance(raw, dict):
                raise ConfigError("config", "expected a JSON object")
            raw = dict(raw)
            if raw.setdefault("command", args.command) != args.command:
                raise ConfigError("command", f"config says {raw['command']!r} but {args.command!r} was requested")
        raw["command"] = args.command
        for key, value in vars(args).items():
            if key not in ("command", "config") and value is not None:
                raw[key] = value
        cfg = resolve_config(raw)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        results = _HANDLERS[cfg["command"]](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (GSCError, FloatingPointError, ValueError) as exc:
        write_summary(out / "summary.json", {"config": cfg, "error": str(exc), "passed": False})
        print(f"error: {exc}", file=sys.stderr)
        return 1
    passed = all(results.get("flags", {}).values())
    write_summary(out / "summary.json", {"config": cfg, **results, "passed": passed})
    print(f"{cfg['command']}: {'ok' if passed else 'invariant violation'} -> {out / 'summary.json'}")
    return 0 if passed else 1


if __name__ == "__main__":
    sys.exit(main())
