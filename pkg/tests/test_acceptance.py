"""End-to-end acceptance checks, one test per criterion, at the stated tolerances."""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from riskadapt import adapt, bench
from riskadapt.adapt import LearningSchedule, finite_diff_grad, sgd_update
from riskadapt.cli import EXIT_NONCONVERGENCE, EXIT_OK, FIXTURE_ROOT, main
from riskadapt.core import Param, ParamVector, eval_constraints
from riskadapt.envs import RobotArmConfig, RobotArmEnv, step_box
from riskadapt.llm import BackendConfig, BackendTimeout, LlmPipeline, RemoteBackend, ScriptedBackend
from riskadapt.llm.prompts import TEMPLATES
from riskadapt.mpc import MpcConfig, solve

from _instances import instance
from _stub import Stub, ok

INSTANCE_SEED = 0
N_INSTANCES = 50


class RunLog:
    """Wraps run_plan to check every trajectory the benchmarks produce."""

    def __init__(self, inner):
        self.inner = inner
        self.runs = 0
        self.eq3_failures = []
        self.worst_margin = math.inf
        self.successful_subtasks = 0
        self.check_seconds = 0.0

    def __call__(self, env, plan, cfg, *args, **kwargs):
        run = self.inner(env, plan, cfg, *args, **kwargs)
        t0 = time.perf_counter()
        traj = run.trajectory
        self.runs += 1
        windows = sum(o.realized_window for o in run.outcomes)
        if len(traj.controls) != windows:
            self.eq3_failures.append((len(traj.controls), windows))
        for out in run.outcomes:
            if not out.success:
                continue
            self.successful_subtasks += 1
            spec = run.plan.subtasks[out.index - 1]
            for t in range(out.start, out.end):
                phi = eval_constraints(spec, traj.states[t + 1], traj.controls[t], traj.observables[t + 1])
                if phi.size:
                    self.worst_margin = min(self.worst_margin, float(np.min(phi)))
        self.check_seconds += time.perf_counter() - t0
        return run


@pytest.fixture(scope="module")
def run_log():
    log = RunLog(adapt.run_plan)
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(adapt, "run_plan", log)
        mp.setattr(bench, "run_plan", log)
        yield log


@pytest.fixture(scope="module")
def robot_case(run_log):
    bench._GRID_CACHE.clear()
    before = run_log.check_seconds
    t0 = time.perf_counter()
    cfg = bench.RobotCaseConfig()
    results = {}
    for variant in ("Full", "SgdOnly", "LlmOnly"):
        fixture_set = "robot-llm-only" if variant == "LlmOnly" else "robot"
        pipeline = LlmPipeline(ScriptedBackend(FIXTURE_ROOT / fixture_set))
        results[variant] = bench.run_robot_case(cfg, variant, pipeline)
    seconds = time.perf_counter() - t0 - (run_log.check_seconds - before)
    return results, seconds


@pytest.fixture(scope="module")
def vehicle_case(run_log):
    before = run_log.check_seconds
    t0 = time.perf_counter()
    cfg = bench.VehicleCaseConfig()
    pipeline = LlmPipeline(ScriptedBackend(FIXTURE_ROOT / "vehicle"))
    prepared = bench.prepare_vehicle_plans(pipeline, bench.VEHICLE_SCENARIOS)
    results = {s: bench.run_vehicle_strategy(s, prepared, cfg) for s in bench.STRATEGIES}
    seconds = time.perf_counter() - t0 - (run_log.check_seconds - before)
    return results, seconds


def rel_err(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)) / np.maximum(np.abs(b), 1e-300)))


def test_criterion_01_gradient(record_property):
    """Finite-difference gradient matches closed forms."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(20):
        A = rng.normal(size=(3, 3))
        A = A + A.T
        b = rng.normal(size=3)
        x = rng.uniform(-2, 2, size=3)
        g = finite_diff_grad(lambda t: 0.5 * t @ A @ t + b @ t, x, 1e-3)
        worst = max(worst, rel_err(g, A @ x + b))
        u, v = rng.uniform(0.5, 3, size=2)
        g = finite_diff_grad(lambda t: 3.0 * t[0] * t[1], [u, v], 1e-3)
        worst = max(worst, rel_err(g, [3.0 * v, 3.0 * u]))
    seconds = time.perf_counter() - t0
    record_property("detail", f"worst rel err {worst:.2e}, {seconds:.3f} s")
    assert worst <= 1e-6
    assert seconds < 1.0


def test_criterion_02_mpc_oracle(record_property):
    """Shooting solver within 5% of the grid oracle."""
    rng = np.random.default_rng(INSTANCE_SEED)
    t0 = time.perf_counter()
    gaps = []
    for _ in range(N_INSTANCES):
        spec, env, world, tau = instance(rng)
        ours = solve(spec, env, world, MpcConfig(horizon=tau))
        oracle = solve(spec, env, world, MpcConfig(horizon=tau, solver="GridSearchOracle", grid_points=21))
        gaps.append((oracle.objective - ours.objective) / max(abs(oracle.objective), 1e-9))
    seconds = time.perf_counter() - t0
    record_property("detail", f"{N_INSTANCES} instances, worst gap {max(gaps):.2e}, {seconds:.1f} s")
    assert max(gaps) <= 0.05
    assert seconds < 30.0


def test_criterion_03_length_identity(robot_case, vehicle_case, run_log, record_property):
    """Trajectory length equals the sum of realized windows."""
    record_property("detail", f"{run_log.runs} runs, {len(run_log.eq3_failures)} mismatches")
    assert run_log.runs > 0
    assert run_log.eq3_failures == []


def test_criterion_04_safety(robot_case, vehicle_case, run_log, record_property):
    """Constraints hold on every successful subtask."""
    record_property("detail", f"{run_log.successful_subtasks} successful subtasks, "
                              f"worst margin {run_log.worst_margin:.3g}")
    assert run_log.successful_subtasks > 0
    assert run_log.worst_margin >= -1e-6


def test_criterion_05_robot_ordering(robot_case, record_property):
    """Full beats SgdOnly to the band; LlmOnly stays out."""
    results, seconds = robot_case
    full, sgd, llm = results["Full"], results["SgdOnly"], results["LlmOnly"]
    record_property("detail", f"optimum {full.optimum_loss:.4g} at {full.optimum_theta:g}; "
                              f"Full {full.evaluations_to_band} evals, SgdOnly {sgd.evaluations_to_band} evals, "
                              f"LlmOnly final {llm.final_loss:.4g}; {seconds:.0f} s")
    assert full.evaluations_to_band is not None and sgd.evaluations_to_band is not None
    assert full.evaluations_to_band < sgd.evaluations_to_band
    assert llm.evaluations_to_band is None and not llm.in_band
    assert seconds < 300.0


def test_criterion_06_vehicle_ordering(vehicle_case, record_property):
    """Proposed is safer than Typical and faster than Conservative."""
    results, seconds = vehicle_case
    typ, con, pro = results["Typical"], results["Conservative"], results["Proposed"]
    dist = {s: (pro.scenarios[s].mean_min_distance, typ.scenarios[s].mean_min_distance)
            for s in ("school_bus", "teenagers")}
    adults = (pro.scenarios["adults"].mean_time_to_travel, typ.scenarios["adults"].mean_time_to_travel)
    record_property("detail", "; ".join(f"{s} dist {p:.3g} vs {t:.3g}" for s, (p, t) in dist.items())
                    + f"; time {pro.avg_time_to_travel:.4g} vs {con.avg_time_to_travel:.4g}"
                    + f"; adults {adults[0]:.4g} vs {adults[1]:.4g}; {seconds:.0f} s")
    assert all(len(r.scenarios[s].seeds) == 20 for r in results.values() for s in r.scenarios)
    for p, t in dist.values():
        assert p >= t
    assert pro.avg_time_to_travel <= con.avg_time_to_travel
    assert abs(adults[0] - adults[1]) <= 1.0
    assert seconds < 300.0


def test_criterion_07_determinism(tmp_path, record_property):
    """Scripted runs are byte-identical on repeat."""
    cfg = tmp_path / "vehicle.yaml"
    cfg.write_text("seeds: 2\n")

    def snapshot(d: Path):
        return {p.name: p.read_bytes() for p in sorted(d.iterdir())}

    runs = {
        "run-robot full": (["run-robot", "--variant", "full"], EXIT_OK),
        "run-robot llm-only": (["run-robot", "--variant", "llm-only"], EXIT_NONCONVERGENCE),
        "run-vehicle": (["run-vehicle", "--config", str(cfg)], EXIT_OK),
    }
    identical = []
    for k, (name, (args, code)) in enumerate(runs.items()):
        a, b = tmp_path / f"{k}a", tmp_path / f"{k}b"
        assert main(args + ["--out", str(a)]) == code
        assert main(args + ["--out", str(b)]) == code
        if snapshot(a) == snapshot(b):
            identical.append(name)
    record_property("detail", f"identical: {', '.join(identical) or 'none'}")
    assert identical == list(runs)


def test_criterion_08_sgd_exact(record_property):
    """Single SGD steps land on the exact values."""
    theta = ParamVector((Param("theta", 1.0, -10.0, 10.0),))
    constant = sgd_update(theta, [2.0], LearningSchedule(eta0=0.1, gamma=0.0), 1)["theta"]
    decayed = sgd_update(theta, [2.0], LearningSchedule(eta0=0.1, gamma=math.log(2)), 1)["theta"]
    record_property("detail", f"{constant!r}, {decayed!r}")
    assert constant == 0.8
    assert decayed == 0.9


def test_criterion_09_impulse_balance(record_property):
    """Contact impulse balances momentum change plus friction."""
    rng = np.random.default_rng(5)
    worst, contacts = 0.0, 0
    for _ in range(200):
        cfg = RobotArmConfig(friction=float(rng.uniform(0, 1)))
        w = RobotArmEnv(cfg).reset()
        for u in rng.uniform(-0.2, 1.0, size=int(rng.integers(20, 80))):
            new, force = step_box(w, [u])
            if force > 0:
                contacts += 1
                dp = cfg.box_mass * (new.box_velocity - w.box_velocity)
                friction = cfg.friction_force * cfg.dt
                scale = max(abs(force * cfg.dt), abs(dp), friction)
                worst = max(worst, abs(force * cfg.dt - dp - friction) / scale)
            w = new
    record_property("detail", f"{contacts} contact steps, worst rel residual {worst:.2e}")
    assert contacts > 0
    assert worst <= 8 * np.finfo(float).eps


def test_criterion_10_remote_contract(monkeypatch, record_property):
    """Stub server exercises retry-on-429 and timeout."""
    monkeypatch.setenv("LLM_API_KEY", "stub-key")
    prompt = TEMPLATES["Correction"].render({"instruction": "push", "plan": "{}", "feedback": "ok"})

    def backend(url, **kwargs):
        delays = []
        return RemoteBackend(BackendConfig(kind="remote", endpoint=url, model="m", **kwargs),
                             sleep=delays.append), delays

    with Stub([(429, "slow down", 0), ok("after 429")]) as stub:
        b, delays = backend(stub.url, max_retries=1, backoff=0.25)
        out = b.complete(prompt)
    assert out.text == "after 429" and out.retries == 1 and delays == [0.25] and len(stub.requests) == 2

    with Stub([(200, "late", 1.0), ok("after timeout")]) as stub:
        b, _ = backend(stub.url, timeout=0.2, max_retries=1)
        out = b.complete(prompt)
    assert out.text == "after timeout" and out.retries == 1

    with Stub([(200, "late", 1.0)]) as stub:
        b, _ = backend(stub.url, timeout=0.2, max_retries=0)
        with pytest.raises(BackendTimeout):
            b.complete(prompt)
    record_property("detail", "429 retried with backoff, timeout retried, timeout exhaustion raised")
