import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskadapt.adapt import make_corrector
from riskadapt.core import eval_constraints, plan_from_dict, validate_plan
from riskadapt.envs import RobotArmEnv, builtin_scenario, make_env
from riskadapt.llm import LlmPipeline, ScriptedBackend
from riskadapt.mpc import MpcConfig, control_step, objective_value, run_plan, run_subtask, solve

from _fixtures import RecordingBackend
from _plans import fixed, robot_doc, robot_plan, single_subtask

TRACK = {"template": "QuadraticTracking", "args": {"target": "g", "state_index": 0}}
PUSH = {"template": "VelocityTracking", "args": {"target": "v"}}
FORCE = {"template": "ForceLimit", "args": {"threshold": "f"}, "latent": False}


def arm_task(goal, constraints=(), window=10, terminal=None, **params):
    return single_subtask(TRACK, constraints, {"g": fixed(goal), **params}, window, terminal).subtasks[0]


def push_task(threshold=None):
    params = {"v": fixed(0.5)}
    cons = []
    if threshold is not None:
        params["f"] = fixed(threshold)
        cons = [FORCE]
    return single_subtask(PUSH, cons, params).subtasks[0]


def at_box(v_box=0.0):
    env = RobotArmEnv()
    w = env.reset()
    return env, replace(w, arm_position=w.box_position, box_velocity=v_box)


class TestMpcConfig:
    @pytest.mark.parametrize("kwargs", [{"horizon": 0}, {"constraint_tolerance": -1.0},
                                        {"control_bounds": ((1.0, 1.0),)}, {"solver": "QP"},
                                        {"starts": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            MpcConfig(**kwargs)


class TestSolve:
    def test_rest_is_optimal(self):
        env = RobotArmEnv()
        sol = solve(arm_task(0.0), env, env.reset(), MpcConfig())
        assert np.max(np.abs(sol.controls)) < 1e-4
        assert sol.objective == pytest.approx(0.0, abs=1e-8)
        assert sol.controls.shape == (5, 1)

    def test_inactive_force_limit_matches_unconstrained(self):
        # the largest force a unit-speed command can demand is m*1/dt + F_s, about 12 N
        env, w = at_box()
        cfg = MpcConfig(horizon=3)
        free = solve(push_task(), env, w, cfg)
        capped = solve(push_task(100.0), env, w, cfg)
        assert abs(free.objective - capped.objective) <= 1e-6

    def test_tau2_matches_grid_oracle(self):
        env = RobotArmEnv()
        w = replace(env.reset(), arm_position=0.2)
        spec = arm_task(0.5)
        ours = solve(spec, env, w, MpcConfig(horizon=2))
        oracle = solve(spec, env, w, MpcConfig(horizon=2, solver="GridSearchOracle", grid_points=11))
        assert ours.objective >= oracle.objective - 0.05 * abs(oracle.objective)

    def test_oracle_limited_to_short_horizons(self):
        env = RobotArmEnv()
        with pytest.raises(ValueError):
            solve(arm_task(0.5), env, env.reset(), MpcConfig(horizon=4, solver="GridSearchOracle"))

    def test_infeasible_is_flagged_not_raised(self):
        sc = builtin_scenario("teenagers")
        env = make_env(sc, 0)
        w = replace(env.reset(), velocity=10.0)
        spec = single_subtask({"template": "VelocityTracking", "args": {"target": 10.0}},
                              [{"template": "SpeedLimit", "args": {"threshold": 2.0}, "latent": False}]).subtasks[0]
        sol = solve(spec, env, w, MpcConfig(horizon=3))
        assert not sol.feasible
        assert sol.controls.shape == (3, 1) and np.all(np.isfinite(sol.controls))

    def test_objective_value_matches_solution(self):
        env = RobotArmEnv()
        w = replace(env.reset(), arm_position=0.1)
        sol = solve(arm_task(0.4), env, w, MpcConfig(horizon=3))
        assert objective_value(arm_task(0.4), env, w, MpcConfig(horizon=3), sol.controls) == pytest.approx(
            sol.objective, abs=1e-12)


class TestControlStep:
    def test_horizon_one_is_single_step_argmax(self):
        # from 0 with target 0.05 the one-step optimum is u = 0.5 exactly
        env = RobotArmEnv()
        u, _ = control_step(arm_task(0.05), env, env.reset(), MpcConfig(horizon=1))
        assert float(u[0]) == pytest.approx(0.5, abs=1e-4)
        grid = np.linspace(-1.0, 1.0, 2001)
        best = max(objective_value(arm_task(0.05), env, env.reset(), MpcConfig(horizon=1), [g]) for g in grid)
        assert objective_value(arm_task(0.05), env, env.reset(), MpcConfig(horizon=1), u) >= best - 1e-9

    def test_deterministic(self):
        env, w = at_box(0.2)
        cfg = MpcConfig(horizon=4, seed=7)
        a, _ = control_step(push_task(6.0), env, w, cfg)
        b, _ = control_step(push_task(6.0), env, w, cfg)
        assert np.array_equal(a, b)

    @settings(max_examples=10, deadline=None)
    @given(x=st.floats(0.0, 0.5), vb=st.floats(0.0, 0.6), goal=st.floats(0.0, 1.0))
    def test_first_entry_of_solve(self, x, vb, goal):
        env = RobotArmEnv()
        w = replace(env.reset(), arm_position=x, box_velocity=vb)
        spec = arm_task(goal, [FORCE], f=fixed(4.0))
        u, sol = control_step(spec, env, w, MpcConfig(horizon=2))
        assert np.array_equal(u, solve(spec, env, w, MpcConfig(horizon=2)).controls[0])
        assert np.array_equal(u, sol.controls[0])

    def test_closed_loop_reaches_push_velocity(self):
        env, w = at_box()
        spec = push_task(20.0)
        speeds = []
        for _ in range(10):
            u, _ = control_step(spec, env, w, MpcConfig())
            w, _ = env.step(w, u)
            speeds.append(w.box_velocity)
        assert abs(speeds[-1] - 0.5) <= 1e-3


class TestRunSubtask:
    def test_terminal_already_holds(self):
        env = RobotArmEnv()
        term = {"kind": "StateWithinTolerance", "args": {"state_index": 0, "target": 0.0, "tol": 0.01}}
        out, _, traj = run_subtask(env, arm_task(0.0, terminal=term), env.reset(), MpcConfig())
        assert out.success and out.realized_window == 0 and traj.T == 0

    def test_unreachable_target_reports_residual(self):
        # at most 1 m/s for two 0.1 s steps: the arm ends at 0.2, 0.3 short of the target
        env = RobotArmEnv()
        term = {"kind": "StateWithinTolerance", "args": {"state_index": 0, "target": 0.5, "tol": 0.01}}
        out, _, _ = run_subtask(env, arm_task(0.5, window=2, terminal=term), env.reset(), MpcConfig())
        assert not out.success and out.realized_window == 2
        assert "residual -0.3 " in out.feedback.text
        assert "not reached" in out.feedback.text

    def test_reach_box(self):
        env = RobotArmEnv()
        plan = robot_plan()
        out, w, _ = run_subtask(env, plan.subtasks[0], env.reset(), MpcConfig())
        assert out.success
        assert out.realized_window <= plan.subtasks[0].window
        assert abs(w.arm_position - 0.5) <= 0.01


class TestRunPlan:
    def test_trivial_plan(self):
        env = RobotArmEnv()
        done = {"kind": "StateWithinTolerance", "args": {"state_index": 0, "target": 0.0, "tol": 0.01}}
        plan = single_subtask(TRACK, params={"g": fixed(0.0)}, terminal=done, done=done)
        run = run_plan(env, plan, MpcConfig())
        assert run.trajectory.T == 0 and run.completed

    def test_two_subtask_push(self):
        env = RobotArmEnv()
        run = run_plan(env, robot_plan(8.0), MpcConfig())
        assert [o.success for o in run.outcomes] == [True, True]
        assert run.completed
        traj = run.trajectory
        assert len(traj.controls) == len(traj.states) - 1 == sum(o.realized_window for o in run.outcomes)

    @settings(max_examples=6, deadline=None)
    @given(theta_f=st.sampled_from([2.0, 4.0, 6.0, 7.0, 9.0, 14.0]), window2=st.integers(5, 40))
    def test_length_identity_and_safety(self, theta_f, window2):
        env = RobotArmEnv()
        plan = robot_plan(theta_f, window2)
        run = run_plan(env, plan, MpcConfig())
        traj = run.trajectory
        assert len(traj.controls) == len(traj.states) - 1 == run.windows_total
        for out in run.outcomes:
            assert out.realized_window <= plan.subtasks[out.index - 1].window
            if not out.success:
                continue
            spec = plan.subtasks[out.index - 1]
            for t in range(out.start, out.end):
                phi = eval_constraints(spec, traj.states[t + 1], traj.controls[t], traj.observables[t + 1])
                assert np.all(phi >= -1e-6)

    def test_mid_run_correction_rewrites_later_subtasks(self, tmp_path):
        failing = robot_doc(8.0)
        failing["subtasks"][0]["window"] = 2
        rewritten = robot_doc(8.0, window2=30)

        def responder(role, slots):
            if role == "Correction":
                assert "residual" in slots["feedback"]
                return json.dumps({"command": "give the push 30 steps", "subtasks": [2]})
            assert role == "Coder"
            return json.dumps(rewritten)

        plan = validate_plan(plan_from_dict(failing))
        cfg = MpcConfig(allow_correction=True)
        recorded = run_plan(RobotArmEnv(), plan, cfg,
                            corrector=make_corrector(LlmPipeline(RecordingBackend(tmp_path, responder)), "push"))
        replayed = run_plan(RobotArmEnv(), plan, cfg,
                            corrector=make_corrector(LlmPipeline(ScriptedBackend(tmp_path)), "push"))
        for run in (recorded, replayed):
            assert not run.outcomes[0].success
            assert run.plan.source == "corrected:1" and run.corrections == ["corrected:1"]
            assert run.plan.subtasks[0] == plan.subtasks[0]
            assert run.plan.subtasks[1].window == 30
        assert np.array_equal(np.array(replayed.trajectory.controls), np.array(recorded.trajectory.controls))

    def test_correction_disabled_by_default(self):
        doc = robot_doc(8.0)
        doc["subtasks"][0]["window"] = 2
        plan = validate_plan(plan_from_dict(doc))

        def corrector(*_):
            raise AssertionError("must not be called")

        run = run_plan(RobotArmEnv(), plan, MpcConfig(), corrector=corrector)
        assert run.plan is plan and run.corrections == []
