"""Command-line entry point.

Exit codes: 0 ok, 2 configuration or usage error, 3 non-convergence (results
are still written), 4 language-model backend failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import __version__, bench
from .adapt import LearningSchedule
from .core import PlanError, PlanValidationError, load_plan, validate_plan
from .envs import Scenario, ScenarioError, builtin_scenario, load_scenario
from .llm import BackendConfig, ConfigError, FixtureMiss, LlmError, LlmPipeline, ParseError, make_backend
from .mpc import MpcConfig

log = logging.getLogger("riskadapt")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_BACKEND = 0, 2, 3, 4
FIXTURE_ROOT = Path(__file__).resolve().parent / "data" / "fixtures"
VARIANT_NAMES = {"full": "Full", "sgd-only": "SgdOnly", "llm-only": "LlmOnly"}
STRATEGY_NAMES = {s.lower(): s for s in bench.STRATEGIES}
DEFAULT_SEEDS = 20
CONFIG_KEYS = {"scenario", "scenarios", "schedule", "mpc", "backend", "variant", "strategies", "seeds", "seed", "out"}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration


def _coerce(name: str, current: Any, value: Any) -> Any:
    if isinstance(current, bool):
        ok = isinstance(value, bool)
    elif isinstance(current, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(current, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(current, str):
        ok = isinstance(value, str)
    else:
        # optional fields (None default or nested tuples)
        ok = value is None or isinstance(value, (int, float, list, tuple))
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if not ok:
        raise UsageError(f"override {name}: expected {type(current).__name__}, got {value!r}")
    return value


def apply_overrides(base, overrides: dict | None, section: str):
    """Copy of the dataclass ``base`` with type-checked field overrides."""
    if not overrides:
        return base
    if not isinstance(overrides, dict):
        raise UsageError(f"{section} overrides must be a mapping")
    names = {f.name for f in dataclasses.fields(base)}
    unknown = sorted(set(overrides) - names)
    if unknown:
        raise UsageError(f"unknown {section} field(s): {', '.join(unknown)}")
    values = {k: _coerce(f"{section}.{k}", getattr(base, k), v) for k, v in overrides.items()}
    try:
        return dataclasses.replace(base, **values)
    except (TypeError, ValueError) as e:
        raise UsageError(f"{section}: {e}") from None


def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    except yaml.YAMLError as e:
        raise UsageError(f"config {path} is not valid YAML/JSON: {e}") from None
    doc = doc or {}
    if not isinstance(doc, dict):
        raise UsageError("config must be a mapping")
    unknown = sorted(set(doc) - CONFIG_KEYS)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    base = Path(path).resolve().parent
    for key in ("scenario",):
        if isinstance(doc.get(key), str) and doc[key].endswith((".yaml", ".yml", ".json")):
            doc[key] = str(base / doc[key])
    if isinstance(doc.get("scenarios"), list):
        doc["scenarios"] = [str(base / s) if str(s).endswith((".yaml", ".yml", ".json")) else s
                            for s in doc["scenarios"]]
    return doc


def resolve_scenario(ref: str) -> Scenario:
    try:
        if ref.endswith((".yaml", ".yml", ".json")):
            return load_scenario(ref)
        return builtin_scenario(ref)
    except ScenarioError as e:
        raise UsageError(str(e)) from None


def backend_config(args, doc: dict, default_fixtures: Path) -> BackendConfig:
    section = dict(doc.get("backend") or {})
    if not isinstance(section, dict):
        raise UsageError("backend section must be a mapping")
    kind = args.backend or section.pop("kind", None) or "scripted"
    section.pop("kind", None)
    fixtures = args.fixtures or section.pop("fixture_dir", None) or str(default_fixtures)
    section.pop("fixture_dir", None)
    cfg = BackendConfig.from_env(kind=kind, fixture_dir=fixtures if kind == "scripted" else None)
    cfg = apply_overrides(cfg, section, "backend")
    if kind == "scripted" and not Path(fixtures).is_dir():
        raise UsageError(f"fixture directory {fixtures} does not exist")
    return cfg


def write_manifest(out: Path, run_id: str, entry: dict) -> Path:
    """Merge ``entry`` under ``run_id`` into out/manifest.json (no timestamps, sorted keys)."""
    path = out / "manifest.json"
    doc = {"version": __version__, "runs": {}}
    if path.exists():
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError:
            pass
    doc["version"] = __version__
    doc.setdefault("runs", {})[run_id] = entry
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    if isinstance(x, Scenario):
        return x.name
    if isinstance(x, tuple):
        return list(x)
    return str(x)


def _backend_entry(cfg: BackendConfig) -> dict:
    entry = dataclasses.asdict(cfg)
    entry.pop("api_key_env", None)
    return entry


# --------------------------------------------------------------------------
# commands


def cmd_run_robot(args) -> int:
    doc = read_config(args.config)
    variant_key = args.variant or doc.get("variant", "full")
    if variant_key not in VARIANT_NAMES:
        raise UsageError(f"unknown variant {variant_key!r}; choose from {', '.join(VARIANT_NAMES)}")
    variant = VARIANT_NAMES[variant_key]
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    schedule = apply_overrides(LearningSchedule(rollouts_per_eval=1, base_seed=seed), doc.get("schedule"), "schedule")
    mpc = apply_overrides(MpcConfig(seed=seed), doc.get("mpc"), "mpc")
    scenario = resolve_scenario(str(doc.get("scenario", "robot_push")))
    if scenario.kind != "robot_arm":
        raise UsageError(f"scenario {scenario.name} is not a robot-arm scenario")
    fixture_set = "robot-llm-only" if variant == "LlmOnly" else "robot"
    bcfg = backend_config(args, doc, FIXTURE_ROOT / fixture_set)
    pipeline = LlmPipeline(make_backend(bcfg))
    cfg = bench.RobotCaseConfig(schedule=schedule, mpc=mpc, scenario=scenario)

    result = bench.run_robot_case(cfg, variant, pipeline)
    out = Path(args.out)
    files = bench.write_robot_result(result, out)
    write_manifest(out, f"robot_{variant.lower()}", {
        "command": "run-robot",
        "variant": variant,
        "scenario": scenario.name,
        "schedule": dataclasses.asdict(schedule),
        "mpc": dataclasses.asdict(mpc),
        "backend": _backend_entry(bcfg),
        "seeds": {"rollouts": list(schedule.seeds), "mpc": mpc.seed},
        "files": sorted(p.name for p in files),
    })
    band = "reached" if result.evaluations_to_band is not None else "not reached"
    print(f"{variant}: final loss {result.final_loss:.6g} (optimum {result.optimum_loss:.6g}), "
          f"10% band {band}, {result.evaluations} loss evaluations")
    if not result.converged or not result.in_band:
        log.warning("%s did not converge to the optimal band", variant)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def cmd_run_vehicle(args) -> int:
    doc = read_config(args.config)
    keys = args.strategy or doc.get("strategies") or [s.lower() for s in bench.STRATEGIES]
    strategies = []
    for key in keys:
        if key.lower() not in STRATEGY_NAMES:
            raise UsageError(f"unknown strategy {key!r}; choose from {', '.join(STRATEGY_NAMES)}")
        if STRATEGY_NAMES[key.lower()] not in strategies:
            strategies.append(STRATEGY_NAMES[key.lower()])
    n_seeds = args.seeds if args.seeds is not None else int(doc.get("seeds", DEFAULT_SEEDS))
    if n_seeds < 1:
        raise UsageError("--seeds must be >= 1")
    first = args.seed if args.seed is not None else int(doc.get("seed", 0))
    seeds = tuple(range(first, first + n_seeds))
    mpc = apply_overrides(bench.VEHICLE_MPC, doc.get("mpc"), "mpc")
    scenarios = tuple(resolve_scenario(str(s)) for s in doc.get("scenarios", bench.VEHICLE_SCENARIOS))
    if any(s.kind != "vehicle" for s in scenarios):
        raise UsageError("run-vehicle needs vehicle scenarios")
    bcfg = backend_config(args, doc, FIXTURE_ROOT / "vehicle")
    pipeline = LlmPipeline(make_backend(bcfg))
    cfg = bench.VehicleCaseConfig(mpc=mpc, seeds=seeds, scenarios=scenarios)

    prepared = bench.prepare_vehicle_plans(pipeline, scenarios)
    out = Path(args.out)
    results, files = [], []
    for strategy in strategies:
        res = bench.run_vehicle_strategy(strategy, prepared, cfg)
        results.append(res)
        files.append(bench.write_vehicle_result(res, out))
        print(f"{strategy}: avg min distance {res.avg_min_distance:.4g} m, "
              f"avg time-to-travel {res.avg_time_to_travel:.4g} steps")
    files.append(bench.write_vehicle_comparison(results, out))
    write_manifest(out, "vehicle", {
        "command": "run-vehicle",
        "strategies": strategies,
        "scenarios": [s.name for s in scenarios],
        "mpc": dataclasses.asdict(mpc),
        "backend": _backend_entry(bcfg),
        "seeds": list(seeds),
        "files": sorted(p.name for p in files),
    })
    return EXIT_OK


def cmd_validate_plan(args) -> int:
    try:
        text = Path(args.path).read_text()
    except OSError as e:
        print(f"cannot read {args.path}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        validate_plan(load_plan(text))
    except PlanValidationError as e:
        for v in e.violations:
            print(f"{type(v).__name__}: {v}", file=sys.stderr)
        return EXIT_CONFIG
    except PlanError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print("OK")
    return EXIT_OK


def _read_rows(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_emit_plots(args) -> int:
    src = Path(args.result_dir)
    if not src.is_dir():
        print(f"{src} is not a directory", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out) if args.out_given else src
    out.mkdir(parents=True, exist_ok=True)
    curves = sorted(src.glob("robot_*_learning_curve.csv"))
    vehicle = sorted(p for p in src.glob("vehicle_*.csv") if p.name != "vehicle_comparison.csv")
    if not curves and not vehicle:
        print(f"no result files in {src}", file=sys.stderr)
        return EXIT_CONFIG
    if curves:
        _emit_robot(curves, out)
    if vehicle:
        _emit_vehicle(vehicle, out)
    return EXIT_OK


def _emit_robot(curves: Sequence[Path], out: Path) -> None:
    theta_rows, loss_rows, theta_cols = [], [], []
    for path in curves:
        variant = path.name[len("robot_"):-len("_learning_curve.csv")]
        summary = path.with_name(f"robot_{variant}_summary.json")
        info = json.loads(summary.read_text()) if summary.exists() else {}
        for k, row in enumerate(_read_rows(path)):
            cols = [c for c in row if c.startswith("theta_")]
            theta_cols += [c for c in cols if c not in theta_cols]
            base = {"variant": info.get("variant", variant), "record": k, "evaluations": row["evaluations"]}
            theta_rows.append({**base, **{c: row[c] for c in cols}})
            loss_rows.append({**base, "loss": row["loss"], "optimum_loss": repr(info.get("optimum_loss", math.nan))})
    _write(out / "theta_curve.csv", ["variant", "record", "evaluations"] + theta_cols, theta_rows)
    _write(out / "loss_curve.csv", ["variant", "record", "evaluations", "loss", "optimum_loss"], loss_rows)


def _emit_vehicle(files: Sequence[Path], out: Path) -> None:
    dist_rows, time_rows = [], []
    for path in files:
        by_scenario: dict[str, bench.ScenarioStats] = {}
        strategy = ""
        for row in _read_rows(path):
            strategy = row["strategy"]
            st = by_scenario.setdefault(row["scenario"], bench.ScenarioStats(row["scenario"], (), [], []))
            st.min_distances.append(float(row["min_distance"]))
            st.times_to_travel.append(int(row["time_to_travel"]))
        res = bench.VehicleCaseResult(strategy, by_scenario)
        for name, st in by_scenario.items():
            dist_rows.append({"strategy": strategy, "scenario": name, "mean_min_distance": bench._f(st.mean_min_distance)})
            time_rows.append({"strategy": strategy, "scenario": name,
                              "mean_time_to_travel": bench._f(st.mean_time_to_travel)})
        dist_rows.append({"strategy": strategy, "scenario": "average", "mean_min_distance": bench._f(res.avg_min_distance)})
        time_rows.append({"strategy": strategy, "scenario": "average",
                          "mean_time_to_travel": bench._f(res.avg_time_to_travel)})
    _write(out / "min_distance.csv", ["strategy", "scenario", "mean_min_distance"], dist_rows)
    _write(out / "time_to_travel.csv", ["strategy", "scenario", "mean_time_to_travel"], time_rows)


def _write(path: Path, columns: list[str], rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, columns, lineterminator="\n", restval="")
        w.writeheader()
        w.writerows(rows)


# --------------------------------------------------------------------------
# parser


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="YAML or JSON run configuration")
    p.add_argument("--out", default=argparse.SUPPRESS if suppress else "results", help="output directory (default: results)")
    p.add_argument("--seed", type=int, default=d, help="base seed for rollouts and solvers")
    p.add_argument("--backend", choices=("scripted", "remote"), default=d,
                   help="language-model backend (default: scripted)")
    p.add_argument("--fixtures", default=d, help="fixture directory for the scripted backend")
    p.add_argument("--log-level", default=argparse.SUPPRESS if suppress else "WARNING",
                   choices=("DEBUG", "INFO", "WARNING", "ERROR"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="riskadapt", description="Latent-risk-aware task planning with bi-level adaptation.",
                                 epilog="Environment: LLM_API_KEY, LLM_ENDPOINT, LLM_MODEL (flags take precedence).")
    ap.add_argument("--version", action="version", version=f"riskadapt {__version__}")
    _global_flags(ap, suppress=False)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run-robot", help="arm push case study")
    _global_flags(p, suppress=True)
    p.add_argument("--variant", choices=tuple(VARIANT_NAMES), default=None, help="adaptation variant (default: full)")
    p.set_defaults(func=cmd_run_robot)

    p = sub.add_parser("run-vehicle", help="latent-risk driving battery")
    _global_flags(p, suppress=True)
    p.add_argument("--strategy", action="append", type=str.lower, choices=tuple(STRATEGY_NAMES),
                   help="strategy to run; repeatable (default: all three)")
    p.add_argument("--seeds", type=int, default=None,
                   help=f"number of seeds per scenario (default: {DEFAULT_SEEDS})")
    p.set_defaults(func=cmd_run_vehicle)

    p = sub.add_parser("validate-plan", help="check a plan file")
    _global_flags(p, suppress=True)
    p.add_argument("path")
    p.set_defaults(func=cmd_validate_plan)

    p = sub.add_parser("emit-plots", help="write plot-ready CSVs from a result directory")
    _global_flags(p, suppress=True)
    p.add_argument("result_dir")
    p.set_defaults(func=cmd_emit_plots)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.out_given = any(a == "--out" or a.startswith("--out=") for a in argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"riskadapt: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as e:
        print(f"riskadapt: backend configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FixtureMiss as e:
        print(f"riskadapt: no fixture for {e.role} prompt, digest {e.digest} (expected {e.path})", file=sys.stderr)
        return EXIT_BACKEND
    except (LlmError, ParseError) as e:
        print(f"riskadapt: backend failure: {e}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
