import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskadapt.core import (
    DimensionMismatch,
    EmptyPlan,
    MissingObservable,
    LengthMismatch,
    NonContiguousIndices,
    Param,
    ParamVector,
    PlanValidationError,
    SchemaError,
    TerminalCondition,
    UnresolvedParamRef,
    check_terminal,
    dump_plan,
    eval_constraints,
    eval_reward,
    load_plan,
    plan_from_dict,
    plan_violations,
    pool_params,
    scatter_params,
    validate_plan,
)

from _plans import fixed, robot_doc, robot_plan, single_subtask


def quad(target=2.0, j=0, scale=1.0):
    args = {"target": "a", "state_index": j}
    if scale != 1.0:
        args["scale"] = scale
    return single_subtask({"template": "QuadraticTracking", "args": args}, params={"a": fixed(target)}).subtasks[0]


def with_constraint(template, args, params):
    return single_subtask({"template": "VelocityTracking", "args": {"target": 0.0}},
                          [{"template": template, "args": args, "latent": False}], params).subtasks[0]


class TestValidatePlan:
    def test_well_formed_plan_is_returned_unchanged(self):
        plan = plan_from_dict(robot_doc())
        assert validate_plan(plan) is plan

    def test_missing_force_threshold_param(self):
        doc = robot_doc()
        del doc["subtasks"][1]["params"]["theta_f"]
        with pytest.raises(PlanValidationError) as err:
            validate_plan(plan_from_dict(doc))
        assert any(isinstance(v, UnresolvedParamRef) and v.name == "theta_f" for v in err.value.violations)

    def test_non_contiguous_indices(self):
        doc = robot_doc()
        doc["subtasks"][1]["index"] = 3
        doc["whole_task_done"]["args"]["target"] = 1.5
        with pytest.raises(PlanValidationError) as err:
            validate_plan(plan_from_dict(doc))
        assert [type(v) for v in err.value.violations] == [NonContiguousIndices]

    def test_empty_plan(self):
        doc = robot_doc()
        doc["subtasks"] = []
        doc["whole_task_done"] = {"kind": "WindowElapsed", "args": {}}
        assert any(isinstance(v, EmptyPlan) for v in plan_violations(plan_from_dict(doc)))

    def test_every_violation_is_listed(self):
        doc = robot_doc()
        doc["subtasks"][0]["window"] = 0
        doc["subtasks"][1]["constraints"][0]["args"]["threshold"] = "missing"
        doc["subtasks"][1]["params"]["theta_f"]["value"] = 50.0
        violations = plan_violations(plan_from_dict(doc))
        assert len(violations) == 3

    def test_unknown_keys_rejected(self):
        doc = robot_doc()
        doc["subtasks"][0]["comment"] = "hi"
        with pytest.raises(SchemaError):
            plan_from_dict(doc)
        doc = robot_doc()
        doc["extra"] = 1
        with pytest.raises(SchemaError):
            plan_from_dict(doc)

    def test_unknown_template_rejected(self):
        doc = robot_doc()
        doc["subtasks"][1]["constraints"][0]["template"] = "TorqueLimit"
        with pytest.raises(PlanValidationError):
            validate_plan(plan_from_dict(doc))

    def test_dump_load_round_trip(self):
        plan = robot_plan(3.25)
        assert load_plan(dump_plan(plan)) == plan
        assert json.loads(dump_plan(plan)) == json.loads(dump_plan(load_plan(dump_plan(plan))))


class TestEvalReward:
    def test_zero_error(self):
        assert eval_reward(quad(), [2.0, 0.0], [0.0]) == 0.0

    def test_half_metre_error(self):
        assert eval_reward(quad(), [1.5, 0.0], [0.0]) == -0.25

    def test_velocity_tracking_at_target(self):
        spec = single_subtask({"template": "VelocityTracking", "args": {"target": "v"}},
                              params={"v": fixed(0.5)}).subtasks[0]
        assert eval_reward(spec, [3.0, 0.5], [0.5]) == 0.0

    def test_scale(self):
        assert eval_reward(quad(scale=4.0), [1.5, 0.0], [0.0]) == -1.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            eval_reward(quad(), [1.0, 0.0, 0.0], [0.0], n=2, m=1)
        with pytest.raises(DimensionMismatch):
            eval_reward(quad(), [1.0, 0.0], [0.0, 1.0], n=2, m=1)

    @given(target=st.floats(-5, 5), x=st.floats(-5, 5), delta=st.floats(-1, 1))
    def test_lipschitz_in_theta(self, target, x, delta):
        # |d/dtheta (theta - x)^2| <= 2 (|theta| + |x| + |delta|) on the sampled box
        r0 = eval_reward(quad(target), [x, 0.0], [0.0])
        r1 = eval_reward(quad(target + delta), [x, 0.0], [0.0])
        L = 2.0 * (abs(target) + abs(x) + abs(delta))
        assert abs(r1 - r0) <= L * abs(delta) + 1e-12


class TestEvalConstraints:
    def test_force_limit_slack(self):
        spec = with_constraint("ForceLimit", {"threshold": "f"}, {"f": fixed(10.0)})
        assert eval_constraints(spec, [0, 0], [0], {"contact_force": 4.0}).tolist() == [6.0]

    def test_force_limit_boundary(self):
        spec = with_constraint("ForceLimit", {"threshold": "f"}, {"f": fixed(10.0)})
        assert eval_constraints(spec, [0, 0], [0], {"contact_force": -10.0}).tolist() == [0.0]

    def test_min_distance_violated(self):
        spec = with_constraint("MinDistance", {"object": "child", "threshold": "d"}, {"d": fixed(5.0)})
        assert eval_constraints(spec, [0, 0], [0], {"gap/child": 3.0}).tolist() == [-2.0]

    def test_missing_observable(self):
        spec = with_constraint("ForceLimit", {"threshold": "f"}, {"f": fixed(10.0)})
        with pytest.raises(MissingObservable):
            eval_constraints(spec, [0, 0], [0], {})

    @given(thr=st.floats(0, 50), force=st.floats(-60, 60), gap=st.floats(-20, 80),
           v=st.floats(-15, 15), kind=st.sampled_from(["ForceLimit", "MinDistance", "SpeedLimit"]))
    def test_margin_matches_inline_formula(self, thr, force, gap, v, kind):
        args = {"threshold": "t"}
        if kind == "MinDistance":
            args["object"] = "teenager"
        spec = with_constraint(kind, args, {"t": fixed(thr)})
        got = float(eval_constraints(spec, [1.0, v], [0.0], {"contact_force": force, "gap/teenager": gap})[0])
        expected = {"ForceLimit": thr - abs(force), "MinDistance": gap - thr, "SpeedLimit": thr - abs(v)}[kind]
        assert got == expected
        assert (got >= 0) == (expected >= 0)


class TestTerminal:
    cond = TerminalCondition("StateWithinTolerance", {"state_index": 0, "target": 1.0, "tol": 0.05})

    def test_within(self):
        assert check_terminal(self.cond, [1.02, 0.0], 0, 10)

    def test_outside(self):
        assert not check_terminal(self.cond, [1.10, 0.0], 0, 10)

    def test_window_elapsed(self):
        assert check_terminal(TerminalCondition("WindowElapsed"), [0.0, 0.0], 7, 7)

    @given(window=st.integers(1, 100), e=st.integers(0, 200))
    def test_window_elapsed_monotone(self, window, e):
        cond = TerminalCondition("WindowElapsed")
        if check_terminal(cond, [0, 0], e, window):
            assert check_terminal(cond, [0, 0], e + 1, window)


class TestPooling:
    def two_param_plan(self, a=1.0, b=2.0):
        doc = robot_doc()
        doc["subtasks"][0]["params"] = {"a": {"value": a, "lower": -10, "upper": 10}}
        doc["subtasks"][0]["reward"]["args"]["target"] = "a"
        doc["subtasks"][0]["terminal"]["args"]["target"] = "a"
        doc["subtasks"][1]["params"] = {"b": {"value": b, "lower": -10, "upper": 10}}
        doc["subtasks"][1]["reward"]["args"]["target"] = "b"
        doc["subtasks"][1]["constraints"][0]["args"]["threshold"] = "b"
        doc["subtasks"][1]["terminal"]["args"]["target"] = "b"
        doc["whole_task_done"]["args"]["target"] = "s2.b"
        return validate_plan(plan_from_dict(doc))

    def test_pool_concatenates(self):
        pooled = pool_params(self.two_param_plan())
        assert pooled.names == ["s1.a", "s2.b"]
        assert pooled.values.tolist() == [1.0, 2.0]

    def test_scatter_updates_only_target(self):
        plan = self.two_param_plan()
        new = scatter_params(plan, pool_params(plan).with_values([1.0, 3.0]))
        assert new.subtasks[1].params["b"] == 3.0
        assert new.subtasks[0] == plan.subtasks[0]

    def test_scatter_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            scatter_params(self.two_param_plan(), [1.0])

    @settings(max_examples=60)
    @given(data=st.data())
    def test_round_trip_random_plans(self, data):
        n = data.draw(st.integers(1, 4))
        subtasks = []
        for i in range(1, n + 1):
            k = data.draw(st.integers(1, 3))
            params = {}
            for j in range(k):
                lo = data.draw(st.floats(-100, 100))
                hi = data.draw(st.floats(lo, lo + 100))
                val = data.draw(st.floats(lo, hi))
                params[f"p{j}"] = {"value": val, "lower": lo, "upper": hi}
            latent = data.draw(st.booleans())
            c_args = {"threshold": f"p{k - 1}", **({"object": "child"} if latent else {})}
            subtasks.append({"index": i, "reward": {"template": "VelocityTracking", "args": {"target": "p0"}},
                             "constraints": [{"template": "SpeedLimit", "args": c_args, "latent": latent}],
                             "params": params, "window": data.draw(st.integers(1, 50)),
                             "terminal": {"kind": "WindowElapsed", "args": {}}})
        plan = validate_plan(plan_from_dict({"subtasks": subtasks,
                                             "whole_task_done": {"kind": "WindowElapsed", "args": {}}}))
        assert scatter_params(plan, pool_params(plan)) == plan
        assert load_plan(dump_plan(plan)) == plan


class TestParamVector:
    def test_duplicate_names_rejected(self):
        with pytest.raises(Exception):
            ParamVector((Param("a", 0, 0, 1), Param("a", 1, 0, 1)))

    def test_clipped_respects_bounds(self):
        pv = ParamVector((Param("a", 0.5, 0, 1), Param("b", 0.0, -1, 1)))
        out = pv.clipped([2.0, -3.0])
        assert out.values.tolist() == [1.0, -1.0]
        assert math.isclose(pv["a"], 0.5)
        assert np.all(out.values <= out.upper) and np.all(out.values >= out.lower)
