"""Case-study harnesses: the arm push comparison and the latent-risk driving battery."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapt import (
    FrameworkResult,
    IterationRecord,
    LearningSchedule,
    evaluations_to_band,
    expected_loss,
    run_framework,
    write_learning_curve,
)
from .core import ConstraintSpec, Param, ParamVector, TaskPlan, dump_plan, pool_params
from .envs import Scenario, builtin_scenario, make_env, min_distance, observe_scene, time_to_travel
from .llm import LatentRiskAssessment, LlmPipeline
from .mpc import MpcConfig, RunResult, run_plan

ROBOT_INSTRUCTION = "push the box while maintaining a stable speed of 0.5 m/s"
STRATEGIES = ("Typical", "Conservative", "Proposed")
VEHICLE_SCENARIOS = ("school_bus", "teenagers", "adults")
BAND = 0.1


# --------------------------------------------------------------------------
# robot arm


@dataclass(frozen=True)
class RobotCaseConfig:
    schedule: LearningSchedule = LearningSchedule(rollouts_per_eval=1)
    mpc: MpcConfig = MpcConfig()
    parameter: str = "s2.theta_f"
    grid_step: float = 0.25
    scenario: str | Scenario = "robot_push"


@dataclass
class RobotCaseResult:
    variant: str
    records: list[IterationRecord]
    evaluations_to_band: int | None
    final_loss: float
    optimum_loss: float
    optimum_theta: float
    converged: bool
    evaluations: int
    parameter: str
    worst_success_margin: float = math.inf
    eq3_ok: bool = True
    warnings: list[str] = field(default_factory=list)

    @property
    def in_band(self) -> bool:
        return self.final_loss <= (1.0 + BAND) * self.optimum_loss

    def theta_curve(self) -> list[tuple[int, float]]:
        return [(k, r.theta.get(self.parameter, math.nan)) for k, r in enumerate(self.records)]

    def loss_curve(self) -> list[tuple[int, float]]:
        return [(k, r.loss) for k, r in enumerate(self.records)]


_GRID_CACHE: dict[tuple, tuple[float, float, list]] = {}


def grid_optimum(plan: TaskPlan, env_factory, schedule: LearningSchedule, mpc_cfg: MpcConfig,
                 parameter: str, step: float) -> tuple[float, float, list[tuple[float, float]]]:
    """Best loss over an evenly spaced grid of one pooled parameter within its bounds."""
    key = (dump_plan(plan, indent=None), schedule.seeds, mpc_cfg, parameter, step)
    if key in _GRID_CACHE:
        return _GRID_CACHE[key]
    pooled = pool_params(plan)
    idx = pooled.names.index(parameter)
    p = pooled.entries[idx]
    table = []
    for value in np.arange(p.lower, p.upper + 0.5 * step, step):
        values = pooled.values
        values[idx] = min(float(value), p.upper)
        est = expected_loss(plan, pooled.with_values(values), env_factory, schedule, mpc_cfg)
        table.append((float(values[idx]), est.value))
    best_theta, best_loss = min(table, key=lambda t: (t[1], t[0]))
    _GRID_CACHE[key] = (best_theta, best_loss, table)
    return _GRID_CACHE[key]


def robot_initial_plan(pipeline: LlmPipeline, scenario: Scenario):
    scene = observe_scene(scenario)
    assessment, solution, plan = pipeline.initial_plan(scenario.instruction, scene)
    return scene, plan


def run_robot_case(cfg: RobotCaseConfig, variant: str, pipeline: LlmPipeline) -> RobotCaseResult:
    scenario = builtin_scenario(cfg.scenario) if isinstance(cfg.scenario, str) else cfg.scenario
    scene, plan = robot_initial_plan(pipeline, scenario)
    factory = lambda seed: make_env(scenario, seed)  # noqa: E731
    theta_opt, loss_opt, _ = grid_optimum(plan, factory, cfg.schedule, cfg.mpc, cfg.parameter, cfg.grid_step)
    result: FrameworkResult = run_framework(scenario.instruction, plan, factory, cfg.schedule, variant,
                                            pipeline, cfg.mpc, scene.text)
    final = expected_loss(result.plan, None, factory, cfg.schedule, cfg.mpc)
    eq3 = all(r.trajectory.T == r.windows_total for r in final.runs)
    return RobotCaseResult(
        variant=variant,
        records=result.records,
        evaluations_to_band=evaluations_to_band(result.records, loss_opt, BAND),
        final_loss=final.value,
        optimum_loss=loss_opt,
        optimum_theta=theta_opt,
        converged=result.converged,
        evaluations=result.evaluations,
        parameter=cfg.parameter,
        worst_success_margin=final.worst_success_margin,
        eq3_ok=eq3,
        warnings=result.warnings,
    )


def write_robot_result(result: RobotCaseResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = result.variant.lower()
    curve = out / f"robot_{tag}_learning_curve.csv"
    write_learning_curve(result.records, curve)
    summary = out / f"robot_{tag}_summary.json"
    summary.write_text(json.dumps({
        "variant": result.variant,
        "parameter": result.parameter,
        "evaluations_to_band": result.evaluations_to_band,
        "final_loss": result.final_loss,
        "optimum_loss": result.optimum_loss,
        "optimum_theta": result.optimum_theta,
        "band": BAND,
        "in_band": result.in_band,
        "converged": result.converged,
        "evaluations": result.evaluations,
        "warnings": result.warnings,
    }, indent=2, sort_keys=True) + "\n")
    return [curve, summary]


# --------------------------------------------------------------------------
# latent-risk driving


VEHICLE_MPC = MpcConfig(horizon=10, starts=1)


@dataclass(frozen=True)
class VehicleCaseConfig:
    # longer horizon for braking; one warm-started basin keeps the battery fast
    mpc: MpcConfig = VEHICLE_MPC
    seeds: tuple[int, ...] = tuple(range(20))
    scenarios: tuple[str | Scenario, ...] = VEHICLE_SCENARIOS
    # worst-case limits imposed by the conservative strategy
    worst_speed: float = 3.0
    worst_distance: float = 6.0


def _strip_latent(plan: TaskPlan) -> TaskPlan:
    subtasks = tuple(replace(st, constraints=tuple(c for c in st.constraints if not c.latent))
                     for st in plan.subtasks)
    return replace(plan, subtasks=subtasks)


def apply_strategy(strategy: str, plan: TaskPlan, assessment: LatentRiskAssessment,
                   worst_speed: float = 3.0, worst_distance: float = 6.0) -> TaskPlan:
    """Typical drops latent constraints, Proposed keeps those of High/Medium objects,
    Conservative imposes fixed worst-case limits for every assessed object."""
    if strategy == "Typical":
        return replace(_strip_latent(plan), source=plan.source)
    if strategy == "Proposed":
        keep = lambda c: not c.latent or assessment.label_of(c.object) in ("High", "Medium")  # noqa: E731
        subtasks = tuple(replace(st, constraints=tuple(c for c in st.constraints if keep(c)))
                         for st in plan.subtasks)
        return replace(plan, subtasks=subtasks)
    if strategy == "Conservative":
        base = _strip_latent(plan)
        first = base.subtasks[0]
        names = set(first.params.names)
        added, params = [], list(first.params.entries)
        for k, obj in enumerate(o.object for o in assessment.objects):
            v_name, d_name = _fresh(f"v_worst_{k + 1}", names), _fresh(f"d_worst_{k + 1}", names)
            params += [Param(v_name, worst_speed, worst_speed, worst_speed),
                       Param(d_name, worst_distance, worst_distance, worst_distance)]
            added += [ConstraintSpec("SpeedLimit", {"threshold": v_name, "object": obj}, True),
                      ConstraintSpec("MinDistance", {"object": obj, "threshold": d_name}, True)]
        first = replace(first, constraints=first.constraints + tuple(added), params=ParamVector(tuple(params)))
        return replace(base, subtasks=(first,) + base.subtasks[1:])
    raise ValueError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")


def _fresh(name: str, taken: set[str]) -> str:
    out, k = name, 1
    while out in taken:
        k += 1
        out = f"{name}_{k}"
    taken.add(out)
    return out


@dataclass
class ScenarioStats:
    scenario: str
    seeds: tuple[int, ...]
    min_distances: list[float]
    times_to_travel: list[int]
    worst_success_margin: float = math.inf
    eq3_ok: bool = True

    @property
    def mean_min_distance(self) -> float:
        finite = [d for d in self.min_distances if math.isfinite(d)]
        return float(np.mean(finite)) if finite else math.inf

    @property
    def mean_time_to_travel(self) -> float:
        return float(np.mean(self.times_to_travel))


@dataclass
class VehicleCaseResult:
    strategy: str
    scenarios: dict[str, ScenarioStats]

    @property
    def avg_min_distance(self) -> float:
        """Unweighted mean of per-scenario means, over scenarios where anything entered."""
        finite = [s.mean_min_distance for s in self.scenarios.values() if math.isfinite(s.mean_min_distance)]
        return float(np.mean(finite)) if finite else math.inf

    @property
    def avg_time_to_travel(self) -> float:
        return float(np.mean([s.mean_time_to_travel for s in self.scenarios.values()]))

    @property
    def worst_success_margin(self) -> float:
        return min((s.worst_success_margin for s in self.scenarios.values()), default=math.inf)

    @property
    def eq3_ok(self) -> bool:
        return all(s.eq3_ok for s in self.scenarios.values())


@dataclass
class ScenarioPlan:
    scenario: Scenario
    assessment: LatentRiskAssessment
    plan: TaskPlan


def prepare_vehicle_plans(pipeline: LlmPipeline, names: Sequence[str | Scenario]) -> list[ScenarioPlan]:
    out = []
    for name in names:
        sc = name if isinstance(name, Scenario) else builtin_scenario(name)
        scene = observe_scene(sc)
        assessment, _, plan = pipeline.initial_plan(sc.instruction, scene)
        out.append(ScenarioPlan(sc, assessment, plan))
    return out


def run_vehicle_strategy(strategy: str, prepared: Sequence[ScenarioPlan], cfg: VehicleCaseConfig) -> VehicleCaseResult:
    stats = {}
    for sp in prepared:
        plan = apply_strategy(strategy, sp.plan, sp.assessment, cfg.worst_speed, cfg.worst_distance)
        target = sp.scenario.world.target
        dists, times, worst, eq3 = [], [], math.inf, True
        for seed in sorted(cfg.seeds):
            env = make_env(sp.scenario, seed)
            run: RunResult = run_plan(env, plan, cfg.mpc)
            dists.append(min_distance(run.trajectory, "any"))
            times.append(time_to_travel(run.trajectory, target, sp.scenario.tolerance, sp.scenario.episode_steps))
            eq3 &= run.trajectory.T == run.windows_total
            for o in run.outcomes:
                if o.success:
                    worst = min(worst, o.worst_margin)
        stats[sp.scenario.name] = ScenarioStats(sp.scenario.name, tuple(sorted(cfg.seeds)), dists, times, worst, eq3)
    return VehicleCaseResult(strategy, stats)


def run_vehicle_case(cfg: VehicleCaseConfig, strategy: str, pipeline: LlmPipeline) -> VehicleCaseResult:
    return run_vehicle_strategy(strategy, prepare_vehicle_plans(pipeline, cfg.scenarios), cfg)


def _f(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


def write_vehicle_result(result: VehicleCaseResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"vehicle_{result.strategy.lower()}.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "scenario", "seed", "min_distance", "time_to_travel"])
        for name, s in result.scenarios.items():
            for seed, d, t in zip(s.seeds, s.min_distances, s.times_to_travel):
                w.writerow([result.strategy, name, seed, _f(d), t])
    return path


def write_vehicle_comparison(results: Sequence[VehicleCaseResult], out_dir) -> Path:
    path = Path(out_dir) / "vehicle_comparison.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "scenario", "mean_min_distance", "mean_time_to_travel"])
        for r in results:
            for name, s in r.scenarios.items():
                w.writerow([r.strategy, name, _f(s.mean_min_distance), _f(s.mean_time_to_travel)])
            w.writerow([r.strategy, "average", _f(r.avg_min_distance), _f(r.avg_time_to_travel)])
    return path
