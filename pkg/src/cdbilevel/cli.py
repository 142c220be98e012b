"""Command-line harness: ``cdbilevel run|verify|compare``.

Config files are INI with four sections::

    [problem]   preset (required) plus builder parameters, corrupt
    [solver]    algorithm (required), beta, beta_hat, eta0, schedules, ...
    [output]    trace, summary, trace_stride
    [verify]    points, seed, radius, report

``--override section.key=value`` edits a parsed config before validation.
Exit codes: 0 converged (or all checks passed), 2 iteration budget
exhausted, 3 diverged or inner solve failure, 4 a verification check
failed, 1 config error.
"""
from __future__ import annotations

import argparse
import ast
import configparser
import csv
import inspect
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__
from .diagnostics import check_equivalence_at_solution, run_battery
from .problems import PRESETS, CorruptedProblem, build_preset
from .solvers import (
    ALGORITHMS,
    PRESET_MAPPINGS,
    Schedule,
    ScheduleError,
    SolverConfig,
    ThresholdError,
    TraceRecord,
    resolve_config,
    run,
    thresholds,
)

EXIT_OK, EXIT_CONFIG, EXIT_MAX_ITERS, EXIT_DIVERGED = 0, 1, 2, 3
EXIT_CHECK_FAILED = 4
STATUS_EXIT = {"converged": EXIT_OK, "max_iters": EXIT_MAX_ITERS,
               "diverged": EXIT_DIVERGED, "failed": EXIT_DIVERGED}

SOLVER_KEYS = {
    "algorithm": str, "beta": float, "beta_hat": float, "eta0": float,
    "step_exponent": float, "tol1_scale": float, "tol1_exponent": float,
    "tol2_scale": float, "tol2_exponent": float, "max_iters": int,
    "feas_tol": float, "stat_tol": float, "value_oscillation_tol": float,
    "window": int, "seed": int, "force_thresholds": bool, "preset": str,
}
OUTPUT_KEYS = {"trace": str, "summary": str, "trace_stride": int}
VERIFY_KEYS = {"points": int, "seed": int, "radius": float,
               "far_radius": float, "report": str}
# builder arguments that take arrays are not addressable from a config
_ARRAY_ARGS = {"A", "B", "c", "x_bar", "y_bar"}
REQUIRED = {"problem": ("preset",), "solver": ("algorithm",)}

COMPARE_COLUMNS = ("config", "algorithm", "status", "iterations",
                   "first_feasible_k", "feas", "stat_x", "h", "wall_s")


class ConfigError(ValueError):
    pass


# --- config parsing ---------------------------------------------------------

def _literal(text):
    low = text.strip().lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", ""):
        return None
    try:
        return ast.literal_eval(text.strip())
    except (ValueError, SyntaxError):
        return text.strip()


def _coerce(path, raw, kind):
    value = _literal(raw)
    if value is None:
        return None
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise ValueError
            return value
        if kind is int:
            if isinstance(value, bool) or float(value) != int(value):
                raise ValueError
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected {kind.__name__}, got {raw!r}") from None


def _problem_keys(preset):
    builder = PRESETS[preset]
    names = [n for n in inspect.signature(builder).parameters if n not in _ARRAY_ARGS]
    return set(names) | {"preset", "corrupt"}


def load_config(path, overrides=()):
    """Parse ``path``, apply ``section.key=value`` overrides and validate keys.

    Returns a plain dict of typed sections; raises :class:`ConfigError`
    with the offending key path.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    raw = {s: dict(parser[s]) for s in parser.sections()}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        raw.setdefault(section, {})[name] = value
    return parse_sections(raw)


def parse_sections(raw):
    allowed = {"problem", "solver", "output", "verify"}
    for section in raw:
        if section not in allowed:
            raise ConfigError(f"unknown section [{section}]")
    for section, keys in REQUIRED.items():
        for key in keys:
            if key not in raw.get(section, {}):
                raise ConfigError(f"missing required key {section}.{key}")

    prob_raw = raw["problem"]
    preset = prob_raw["preset"].strip()
    if preset not in PRESETS:
        raise ConfigError(f"problem.preset: unknown preset {preset!r}; "
                          f"choose from {sorted(PRESETS)}")
    problem = {}
    for key, text in prob_raw.items():
        if key not in _problem_keys(preset):
            raise ConfigError(f"unknown key problem.{key}")
        problem[key] = _literal(text) if key != "preset" else preset
    corrupt = problem.get("corrupt")
    if corrupt is not None and corrupt not in CorruptedProblem.MODES:
        raise ConfigError(f"problem.corrupt: unknown mode {corrupt!r}")

    def typed(section, table):
        out = {}
        for key, text in raw.get(section, {}).items():
            if key not in table:
                raise ConfigError(f"unknown key {section}.{key}")
            out[key] = _coerce(f"{section}.{key}", text, table[key])
        return out

    solver = typed("solver", SOLVER_KEYS)
    if solver["algorithm"] not in ALGORITHMS:
        raise ConfigError(f"solver.algorithm: unknown algorithm "
                          f"{solver['algorithm']!r}; choose from {ALGORITHMS}")
    if solver.get("preset") is not None and solver["preset"] not in PRESET_MAPPINGS:
        raise ConfigError(f"solver.preset: unknown mapping {solver['preset']!r}")
    output = typed("output", OUTPUT_KEYS)
    if output.get("trace_stride", 1) is not None and output.get("trace_stride", 1) < 1:
        raise ConfigError("output.trace_stride must be >= 1")
    return {"problem": problem, "solver": solver, "output": output,
            "verify": typed("verify", VERIFY_KEYS)}


def solver_config(section):
    """Build a :class:`SolverConfig` from a typed ``[solver]`` section."""
    s = {k: v for k, v in section.items() if v is not None}
    base = SolverConfig()
    cfg = SolverConfig(
        algorithm=s["algorithm"], beta=s.get("beta"), beta_hat=s.get("beta_hat"),
        step=Schedule(s.get("eta0"), s.get("step_exponent", base.step.exponent)),
        tol1=Schedule(s.get("tol1_scale", base.tol1.scale),
                      s.get("tol1_exponent", base.tol1.exponent)),
        tol2=Schedule(s.get("tol2_scale", base.tol2.scale),
                      s.get("tol2_exponent", base.tol2.exponent)),
        **{k: s[k] for k in ("max_iters", "feas_tol", "stat_tol",
                             "value_oscillation_tol", "window", "seed",
                             "force_thresholds") if k in s})
    if s.get("preset"):
        cfg = PRESET_MAPPINGS[s["preset"]](cfg)
    return cfg


def build_problem(section):
    params = {k: v for k, v in section.items() if k not in ("preset", "corrupt")}
    try:
        return build_preset(section["preset"], corrupt=section.get("corrupt"),
                            **params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"problem: {exc}") from None


def _prepare(cfg, force=False):
    """Problem and resolved solver config, or :class:`ConfigError`."""
    prob = build_problem(cfg["problem"])
    scfg = solver_config(cfg["solver"])
    if force:
        scfg = replace(scfg, force_thresholds=True)
    try:
        return prob, resolve_config(scfg, prob.constants)
    except ThresholdError as exc:
        raise ConfigError(f"solver: {exc}") from None
    except (ScheduleError, ValueError) as exc:
        raise ConfigError(f"solver: {exc}") from None


# --- output -----------------------------------------------------------------

def _fmt(value):
    # repr gives the shortest string that round-trips
    return repr(float(value)) if isinstance(value, float) else str(value)


class CsvTraceSink:
    """Write every ``stride``-th :class:`TraceRecord` to a CSV file."""

    def __init__(self, fh, stride=1):
        self.stride = int(stride)
        self.writer = csv.writer(fh, lineterminator="\n")
        self.writer.writerow(TraceRecord.FIELDS)
        self.rows = 0

    def __call__(self, rec):
        if rec.k % self.stride == 0:
            self.writer.writerow([_fmt(v) for v in rec.as_row()])
            self.rows += 1


def _write_json(path, payload):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=False, allow_nan=False,
                  default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if hasattr(obj, "tolist"):
        return obj.tolist()
    if hasattr(obj, "item"):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _config_echo(cfg, prob, scfg):
    return {"file": cfg, "resolved_solver": scfg.to_dict(),
            "constants": prob.constants.to_dict(),
            "thresholds": thresholds(prob.constants, scfg.algorithm)}


# --- commands ---------------------------------------------------------------

def cmd_run(args):
    cfg = load_config(args.config, args.override)
    prob, scfg = _prepare(cfg, args.force_thresholds)
    out = cfg["output"]
    stride = args.trace_stride or out.get("trace_stride") or 1
    trace_path = out.get("trace")
    summary_path = out.get("summary")
    if trace_path is None or summary_path is None:
        raise ConfigError("missing required key output.trace or output.summary")

    Path(trace_path).parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with open(trace_path, "w", encoding="utf-8", newline="") as fh:
        sink = CsvTraceSink(fh, stride)
        result = run(prob, scfg, sink=sink)
    wall = time.perf_counter() - t0

    verdicts = {}
    if result.status in ("converged", "max_iters"):
        rep = check_equivalence_at_solution(prob, result, 1e-4)
        verdicts[rep.name] = rep.to_dict()
    payload = {"version": __version__, "command": "run",
               "config": _config_echo(cfg, prob, scfg),
               **result.summary(), "trace_rows": sink.rows,
               "wall_seconds": wall, "checks": verdicts}
    _write_json(summary_path, payload)
    print(f"{result.status}: {result.iterations} iterations, "
          f"feas={result.final.get('feas', float('nan')):.3e}, "
          f"stat_x={result.final.get('stat_x', float('nan')):.3e}")
    if result.message:
        print(result.message, file=sys.stderr)
    return STATUS_EXIT[result.status]


def cmd_verify(args):
    cfg = load_config(args.config, args.override)
    prob = build_problem(cfg["problem"])
    v = cfg["verify"]
    reports = run_battery(prob, points=v.get("points") or 100,
                          seed=v.get("seed") or 0, radius=v.get("radius") or 1.0,
                          far_radius=v.get("far_radius") or 10.0)
    failed = [name for name, rep in reports.items() if not rep.passed]
    payload = {"version": __version__, "command": "verify",
               "config": {"file": cfg, "constants": prob.constants.to_dict()},
               "passed": not failed, "failed": failed,
               "checks": {name: rep.to_dict() for name, rep in reports.items()}}
    report_path = v.get("report") or cfg["output"].get("summary")
    if report_path:
        _write_json(report_path, payload)
    for name, rep in reports.items():
        print(f"{'PASS' if rep.passed else 'FAIL'} {name} "
              f"(points={rep.points}, worst_margin={rep.worst_margin:.3e})")
    if failed:
        print("failed checks: " + ", ".join(failed), file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def _compare_job(job):
    label, cfg, force = job
    prob, scfg = _prepare(cfg, force)
    t0 = time.perf_counter()
    result = run(prob, scfg)
    wall = time.perf_counter() - t0
    return {"config": label, "algorithm": scfg.preset or scfg.algorithm,
            "status": result.status, "iterations": result.iterations,
            "first_feasible_k": result.first_feasible_k,
            "feas": result.final.get("feas"), "stat_x": result.final.get("stat_x"),
            "h": result.final.get("h"), "wall_s": wall}


def _cell(value):
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.6e}"
    return str(value)


def format_table(rows):
    """Fixed-width table in :data:`COMPARE_COLUMNS` order; wall time last."""
    cells = [list(COMPARE_COLUMNS)] + [[_cell(r[c]) for c in COMPARE_COLUMNS]
                                       for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(COMPARE_COLUMNS))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip()
                     for row in cells)


def cmd_compare(args):
    """One config: run every algorithm on it. Several: run each as written."""
    configs = list(args.configs) + list(args.config or [])
    if not configs:
        raise ConfigError("compare needs at least one config")
    parsed = [(path, load_config(path, args.override)) for path in configs]
    jobs = []
    if len(parsed) == 1:
        path, cfg = parsed[0]
        for alg in args.algorithms.split(","):
            alg = alg.strip()
            if alg in PRESET_MAPPINGS:
                solver = dict(cfg["solver"], preset=alg)
            elif alg in ALGORITHMS:
                solver = dict(cfg["solver"], algorithm=alg, preset=None)
            else:
                raise ConfigError(f"--algorithms: unknown algorithm {alg!r}")
            # per-algorithm penalties: drop fixed weights unless explicitly forced
            if solver.get("algorithm") != cfg["solver"]["algorithm"]:
                solver.pop("beta", None)
                solver.pop("beta_hat", None)
            jobs.append((path, dict(cfg, solver=solver), args.force_thresholds))
    else:
        jobs = [(path, cfg, args.force_thresholds) for path, cfg in parsed]
    # validate everything up front so a bad config fails before any run
    for _, cfg, force in jobs:
        _prepare(cfg, force)

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_compare_job, jobs))
    else:
        rows = [_compare_job(job) for job in jobs]
    print(format_table(rows))
    if args.output:
        _write_json(args.output, {"version": __version__, "command": "compare",
                                  "columns": list(COMPARE_COLUMNS), "rows": rows})
    return max(STATUS_EXIT[r["status"]] for r in rows)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cdbilevel",
        description="Constraint-dissolving single-loop bilevel solvers.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       action="append" if not config_required else "store",
                       help="INI config file")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="override section.key (repeatable)")
        p.add_argument("--force-thresholds", action="store_true",
                       help="skip the penalty threshold checks")

    p_run = sub.add_parser("run", help="run one solver and write trace and summary")
    common(p_run)
    p_run.add_argument("--trace-stride", type=int, default=None, metavar="N",
                       help="write every N-th iteration to the trace")
    p_run.set_defaults(func=cmd_run)

    p_ver = sub.add_parser("verify", help="run the diagnostics battery")
    common(p_ver)
    p_ver.set_defaults(func=cmd_verify)

    p_cmp = sub.add_parser("compare", help="side-by-side runs")
    common(p_cmp, config_required=False)
    p_cmp.add_argument("configs", nargs="*", help="config files")
    p_cmp.add_argument("--algorithms", default="alg1_basic,alg2_modified,alg3_inexact",
                       help="comma list used when a single config is given")
    p_cmp.add_argument("--jobs", type=int, default=1)
    p_cmp.add_argument("--output", default=None, help="JSON table path")
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "trace_stride", None) is not None and args.trace_stride < 1:
        parser.error("--trace-stride must be >= 1")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
