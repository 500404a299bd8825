"""Typed task-plan model.

A plan is an ordered list of subtasks. Each subtask carries a reward template,
a list of constraint templates, a box-bounded parameter vector, an execution
window and a terminal condition. Templates come from a closed vocabulary so
that plans produced by a language model can be parsed strictly and evaluated
safely (no generated code is ever executed).

Template arguments that name a threshold or target are *references*: either a
parameter name of the owning subtask or a numeric literal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

REWARD_TEMPLATES = ("QuadraticTracking", "VelocityTracking")
CONSTRAINT_TEMPLATES = ("ForceLimit", "MinDistance", "SpeedLimit")
TERMINAL_KINDS = ("StateWithinTolerance", "WindowElapsed")

# State layout shared by both environments: [position, velocity].
VELOCITY_INDEX = 1

# Aliases accepted for object references in MinDistance / latent provenance.
OBJECT_ALIASES = {
    "child": "child",
    "children": "child",
    "kid": "child",
    "kids": "child",
    "teenager": "teenager",
    "teenagers": "teenager",
    "teen": "teenager",
    "teens": "teenager",
    "adult": "adult",
    "adults": "adult",
    "pedestrian": "adult",
    "pedestrians": "adult",
    "school_bus": "school_bus",
    "school bus": "school_bus",
    "bus": "school_bus",
    "box": "box",
    "any": "any",
}


def object_key(ref: str) -> str:
    """Normalise an object reference to the key used in observables."""
    key = ref.strip().lower()
    return OBJECT_ALIASES.get(key, key)


# --------------------------------------------------------------------------
# errors


class PlanError(Exception):
    """Base class for plan problems."""


class UnresolvedParamRef(PlanError):
    def __init__(self, name: str, subtask: int | None):
        self.name = name
        self.subtask = subtask
        where = "whole_task_done" if subtask is None else f"subtask {subtask}"
        super().__init__(f"unresolved parameter reference {name!r} in {where}")


class NonContiguousIndices(PlanError):
    def __init__(self, indices: Sequence[int]):
        self.indices = list(indices)
        super().__init__(f"subtask indices must be 1..N in order, got {self.indices}")


class EmptyPlan(PlanError):
    def __init__(self) -> None:
        super().__init__("plan has no subtasks")


class InvalidField(PlanError):
    """Any other structural violation (bounds, window, unknown template...)."""


class PlanValidationError(PlanError):
    """Raised by :func:`validate_plan`; ``violations`` lists every problem."""

    def __init__(self, violations: Sequence[PlanError]):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations)
        super().__init__(f"{len(self.violations)} plan violation(s): {lines}")


class SchemaError(PlanError):
    """The plan document does not follow the plan schema."""


class DimensionMismatch(ValueError):
    pass


class MissingObservable(KeyError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(name)

    def __str__(self) -> str:
        return f"missing observable {self.name!r}"


class LengthMismatch(ValueError):
    pass


# --------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class Param:
    name: str
    value: float
    lower: float
    upper: float

    @property
    def free(self) -> bool:
        return self.upper > self.lower


@dataclass(frozen=True)
class ParamVector:
    entries: tuple[Param, ...] = ()

    def __post_init__(self) -> None:
        names = [p.name for p in self.entries]
        if len(set(names)) != len(names):
            raise InvalidField(f"duplicate parameter names in {names}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, name: object) -> bool:
        return any(p.name == name for p in self.entries)

    def __getitem__(self, name: str) -> float:
        for p in self.entries:
            if p.name == name:
                return p.value
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.entries]

    @property
    def values(self) -> np.ndarray:
        return np.array([p.value for p in self.entries], dtype=float)

    @property
    def lower(self) -> np.ndarray:
        return np.array([p.lower for p in self.entries], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([p.upper for p in self.entries], dtype=float)

    def with_values(self, values: Iterable[float]) -> "ParamVector":
        values = list(values)
        if len(values) != len(self.entries):
            raise LengthMismatch(f"expected {len(self.entries)} values, got {len(values)}")
        return ParamVector(tuple(replace(p, value=float(v)) for p, v in zip(self.entries, values)))

    def clipped(self, values: Iterable[float]) -> "ParamVector":
        vals = np.clip(np.asarray(list(values), dtype=float), self.lower, self.upper)
        return self.with_values(vals)

    def as_dict(self) -> dict[str, float]:
        return {p.name: p.value for p in self.entries}


@dataclass(frozen=True)
class RewardSpec:
    template: str
    args: Mapping[str, Any] = field(default_factory=dict)

    @property
    def scale(self) -> float:
        return float(self.args.get("scale", 1.0))


@dataclass(frozen=True)
class ConstraintSpec:
    template: str
    args: Mapping[str, Any] = field(default_factory=dict)
    latent: bool = False

    @property
    def object(self) -> str | None:
        obj = self.args.get("object")
        return None if obj is None else object_key(str(obj))

    def label(self) -> str:
        parts = [f"{k}={v}" for k, v in sorted(self.args.items())]
        tag = ", latent" if self.latent else ""
        return f"{self.template}({', '.join(parts)}{tag})"


@dataclass(frozen=True)
class TerminalCondition:
    kind: str
    args: Mapping[str, Any] = field(default_factory=dict)

    @property
    def tol(self) -> float:
        return float(self.args.get("tol", 0.0))


@dataclass(frozen=True)
class SubtaskSpec:
    index: int
    reward: RewardSpec
    constraints: tuple[ConstraintSpec, ...]
    params: ParamVector
    window: int
    terminal: TerminalCondition

    def resolve(self, ref: Any) -> float:
        """Value of a template reference (parameter name or numeric literal)."""
        if isinstance(ref, bool):
            raise UnresolvedParamRef(str(ref), self.index)
        if isinstance(ref, (int, float)):
            return float(ref)
        if isinstance(ref, str) and ref in self.params:
            return self.params[ref]
        raise UnresolvedParamRef(str(ref), self.index)


@dataclass(frozen=True)
class TaskPlan:
    subtasks: tuple[SubtaskSpec, ...]
    whole_task_done: TerminalCondition
    # "llm", "fixture" or "corrected:<step>"; not part of the schema document
    source: str = field(default="fixture", compare=False)

    def __len__(self) -> int:
        return len(self.subtasks)

    def resolve(self, ref: Any) -> float:
        """Resolve a plan-level reference ``s<i>.<name>`` or literal."""
        if isinstance(ref, (int, float)) and not isinstance(ref, bool):
            return float(ref)
        if isinstance(ref, str) and "." in ref:
            head, name = ref.split(".", 1)
            if head.startswith("s") and head[1:].isdigit():
                i = int(head[1:])
                for st in self.subtasks:
                    if st.index == i and name in st.params:
                        return st.params[name]
        raise UnresolvedParamRef(str(ref), None)


# --------------------------------------------------------------------------
# validation


_REWARD_ARGS = {
    "QuadraticTracking": ({"target", "state_index"}, {"scale"}),
    "VelocityTracking": ({"target"}, {"scale"}),
}
_CONSTRAINT_ARGS = {
    "ForceLimit": ({"threshold"}, {"object"}),
    "MinDistance": ({"object", "threshold"}, set()),
    "SpeedLimit": ({"threshold"}, {"object"}),
}
_TERMINAL_ARGS = {
    "StateWithinTolerance": ({"state_index", "target", "tol"}, set()),
    "WindowElapsed": (set(), set()),
}
_REF_ARGS = {"target", "threshold"}


def _check_args(kind: str, args: Mapping[str, Any], table, where: str) -> list[PlanError]:
    if kind not in table:
        return [InvalidField(f"unknown template {kind!r} in {where}")]
    required, optional = table[kind]
    out: list[PlanError] = []
    missing = required - set(args)
    extra = set(args) - required - optional
    if missing:
        out.append(InvalidField(f"{kind} in {where} is missing args {sorted(missing)}"))
    if extra:
        out.append(InvalidField(f"{kind} in {where} has unknown args {sorted(extra)}"))
    return out


def _check_ref(st: SubtaskSpec, ref: Any) -> list[PlanError]:
    try:
        value = st.resolve(ref)
    except UnresolvedParamRef as e:
        return [e]
    if not math.isfinite(value):
        return [InvalidField(f"non-finite literal {ref!r} in subtask {st.index}")]
    return []


def plan_violations(plan: TaskPlan) -> list[PlanError]:
    """Every invariant violation of ``plan`` (empty list when valid)."""
    out: list[PlanError] = []
    if not plan.subtasks:
        return [EmptyPlan()]
    indices = [st.index for st in plan.subtasks]
    if indices != list(range(1, len(indices) + 1)):
        out.append(NonContiguousIndices(indices))
    for st in plan.subtasks:
        where = f"subtask {st.index}"
        for p in st.params:
            if not (math.isfinite(p.lower) and math.isfinite(p.upper) and math.isfinite(p.value)):
                out.append(InvalidField(f"parameter {p.name!r} in {where} is not finite"))
            elif not p.lower <= p.value <= p.upper:
                out.append(InvalidField(
                    f"parameter {p.name!r} in {where}: {p.value} outside [{p.lower}, {p.upper}]"))
        if not isinstance(st.window, int) or st.window < 1:
            out.append(InvalidField(f"window of {where} must be an integer >= 1"))
        rw = st.reward
        errs = _check_args(rw.template, rw.args, _REWARD_ARGS, where)
        out += errs
        if not errs:
            out += _check_ref(st, rw.args["target"])
            if rw.template == "QuadraticTracking" and rw.args["state_index"] not in (0, 1):
                out.append(InvalidField(f"state_index of {where} reward must be 0 or 1"))
        for c in st.constraints:
            errs = _check_args(c.template, c.args, _CONSTRAINT_ARGS, where)
            out += errs
            if not errs:
                out += _check_ref(st, c.args["threshold"])
                if c.latent and c.object is None:
                    out.append(InvalidField(f"latent {c.template} in {where} must name its object"))
        term = st.terminal
        errs = _check_args(term.kind, term.args, _TERMINAL_ARGS, where)
        out += errs
        if not errs and term.kind == "StateWithinTolerance":
            out += _check_ref(st, term.args["target"])
            if term.tol < 0:
                out.append(InvalidField(f"negative tolerance in {where} terminal"))
    done = plan.whole_task_done
    errs = _check_args(done.kind, done.args, _TERMINAL_ARGS, "whole_task_done")
    out += errs
    if not errs and done.kind == "StateWithinTolerance":
        try:
            plan.resolve(done.args["target"])
        except UnresolvedParamRef as e:
            out.append(e)
    return out


def validate_plan(plan: TaskPlan) -> TaskPlan:
    violations = plan_violations(plan)
    if violations:
        raise PlanValidationError(violations)
    return plan


# --------------------------------------------------------------------------
# evaluation (scalar API over the batched kernels below)


def _check_dims(state: np.ndarray, control: np.ndarray, n: int | None, m: int | None) -> None:
    if n is not None and state.shape[-1] != n:
        raise DimensionMismatch(f"state has length {state.shape[-1]}, expected {n}")
    if m is not None and control.shape[-1] != m:
        raise DimensionMismatch(f"control has length {control.shape[-1]}, expected {m}")


def reward_terms(spec: SubtaskSpec, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
    """Reward at each (state, control) pair; works on any leading batch shape."""
    rw = spec.reward
    target = spec.resolve(rw.args["target"])
    if rw.template == "QuadraticTracking":
        j = int(rw.args["state_index"])
    else:
        j = VELOCITY_INDEX
    err = target - states[..., j]
    return -rw.scale * err * err


def constraint_margins(
    spec: SubtaskSpec,
    states: np.ndarray,
    controls: np.ndarray,
    observables: Mapping[str, Any],
) -> np.ndarray:
    """Signed margins, shape ``states.shape[:-1] + (M,)``; >= 0 means satisfied."""
    cols = []
    for c in spec.constraints:
        threshold = spec.resolve(c.args["threshold"])
        if c.template == "ForceLimit":
            force = _observable(observables, "contact_force")
            cols.append(threshold - np.abs(force))
        elif c.template == "MinDistance":
            gap = _observable(observables, f"gap/{object_key(str(c.args['object']))}")
            cols.append(gap - threshold)
        else:  # SpeedLimit
            cols.append(threshold - np.abs(states[..., VELOCITY_INDEX]))
    shape = states.shape[:-1]
    if not cols:
        return np.zeros(shape + (0,))
    return np.stack([np.broadcast_to(np.asarray(col, dtype=float), shape) for col in cols], axis=-1)


def _observable(observables: Mapping[str, Any], name: str):
    try:
        return observables[name]
    except KeyError:
        raise MissingObservable(name) from None


def eval_reward(spec: SubtaskSpec, state, control, n: int | None = None, m: int | None = None) -> float:
    state = np.asarray(state, dtype=float)
    control = np.atleast_1d(np.asarray(control, dtype=float))
    _check_dims(state, control, n, m)
    if state.shape[-1] <= VELOCITY_INDEX:
        raise DimensionMismatch("state must hold position and velocity")
    return float(reward_terms(spec, state, control))


def eval_constraints(spec: SubtaskSpec, state, control, observables: Mapping[str, Any]) -> np.ndarray:
    state = np.asarray(state, dtype=float)
    control = np.atleast_1d(np.asarray(control, dtype=float))
    return constraint_margins(spec, state, control, observables)


def check_terminal(cond: TerminalCondition, state, elapsed: int, window: int,
                   resolve=None) -> bool:
    """Whether ``cond`` holds at ``state`` after ``elapsed`` steps of ``window``.

    ``resolve`` maps a target reference to a number (the owning subtask's or
    plan's ``resolve``); literals work without it.
    """
    if cond.kind == "WindowElapsed":
        return elapsed >= window
    target_ref = cond.args["target"]
    target = resolve(target_ref) if resolve is not None else float(target_ref)
    j = int(cond.args["state_index"])
    return bool(abs(float(np.asarray(state)[j]) - target) <= cond.tol)


def terminal_residual(cond: TerminalCondition, state, resolve=None) -> float:
    if cond.kind == "WindowElapsed":
        return 0.0
    target_ref = cond.args["target"]
    target = resolve(target_ref) if resolve is not None else float(target_ref)
    return float(np.asarray(state)[int(cond.args["state_index"])] - target)


# --------------------------------------------------------------------------
# pooled parameters


def pool_params(plan: TaskPlan) -> ParamVector:
    """Concatenate every subtask's parameters as ``s<i>.<name>`` entries."""
    entries = []
    for st in plan.subtasks:
        for p in st.params:
            entries.append(Param(f"s{st.index}.{p.name}", p.value, p.lower, p.upper))
    return ParamVector(tuple(entries))


def scatter_params(plan: TaskPlan, pooled: ParamVector | Sequence[float]) -> TaskPlan:
    """Inverse of :func:`pool_params`: write pooled values back into the plan."""
    values = pooled.values if isinstance(pooled, ParamVector) else np.asarray(pooled, dtype=float)
    total = sum(len(st.params) for st in plan.subtasks)
    if len(values) != total:
        raise LengthMismatch(f"pooled vector has {len(values)} entries, plan has {total}")
    if isinstance(pooled, ParamVector):
        expected = pool_params(plan).names
        if pooled.names != expected:
            raise LengthMismatch(f"pooled names {pooled.names} do not match plan {expected}")
    out = []
    k = 0
    for st in plan.subtasks:
        n = len(st.params)
        out.append(replace(st, params=st.params.with_values(values[k:k + n])))
        k += n
    return replace(plan, subtasks=tuple(out))


# --------------------------------------------------------------------------
# plan documents


_SUBTASK_KEYS = {"index", "reward", "constraints", "params", "window", "terminal"}
_PLAN_KEYS = {"subtasks", "whole_task_done"}


def _expect_keys(obj: Any, required: set[str], optional: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise SchemaError(f"{where} must be an object")
    missing = required - set(obj)
    extra = set(obj) - required - optional
    if missing:
        raise SchemaError(f"{where} is missing keys {sorted(missing)}")
    if extra:
        raise SchemaError(f"{where} has unknown keys {sorted(extra)}")


def _args(obj: dict, where: str) -> dict:
    args = obj.get("args", {})
    if not isinstance(args, dict):
        raise SchemaError(f"{where}.args must be an object")
    return dict(args)


def plan_from_dict(doc: Any, source: str = "fixture") -> TaskPlan:
    """Build a plan from a parsed schema document (strict about keys)."""
    _expect_keys(doc, _PLAN_KEYS, set(), "plan")
    if not isinstance(doc["subtasks"], list):
        raise SchemaError("plan.subtasks must be an array")
    subtasks = []
    for k, s in enumerate(doc["subtasks"]):
        where = f"subtasks[{k}]"
        _expect_keys(s, _SUBTASK_KEYS, set(), where)
        _expect_keys(s["reward"], {"template", "args"}, set(), f"{where}.reward")
        _expect_keys(s["terminal"], {"kind", "args"}, set(), f"{where}.terminal")
        if not isinstance(s["constraints"], list):
            raise SchemaError(f"{where}.constraints must be an array")
        constraints = []
        for j, c in enumerate(s["constraints"]):
            _expect_keys(c, {"template", "args", "latent"}, set(), f"{where}.constraints[{j}]")
            if not isinstance(c["latent"], bool):
                raise SchemaError(f"{where}.constraints[{j}].latent must be a boolean")
            constraints.append(ConstraintSpec(str(c["template"]), _args(c, where), c["latent"]))
        if not isinstance(s["params"], dict):
            raise SchemaError(f"{where}.params must be an object")
        params = []
        # canonical order, so documents differing only in key order give equal plans
        for name, p in sorted(s["params"].items()):
            _expect_keys(p, {"value", "lower", "upper"}, set(), f"{where}.params.{name}")
            try:
                params.append(Param(str(name), float(p["value"]), float(p["lower"]), float(p["upper"])))
            except (TypeError, ValueError):
                raise SchemaError(f"{where}.params.{name} must hold numbers") from None
        if not isinstance(s["index"], int) or isinstance(s["index"], bool):
            raise SchemaError(f"{where}.index must be an integer")
        if not isinstance(s["window"], int) or isinstance(s["window"], bool):
            raise SchemaError(f"{where}.window must be an integer")
        try:
            pv = ParamVector(tuple(params))
        except InvalidField as e:
            raise SchemaError(str(e)) from None
        subtasks.append(SubtaskSpec(
            index=s["index"],
            reward=RewardSpec(str(s["reward"]["template"]), _args(s["reward"], where)),
            constraints=tuple(constraints),
            params=pv,
            window=s["window"],
            terminal=TerminalCondition(str(s["terminal"]["kind"]), _args(s["terminal"], where)),
        ))
    done = doc["whole_task_done"]
    _expect_keys(done, {"kind", "args"}, set(), "whole_task_done")
    return TaskPlan(tuple(subtasks), TerminalCondition(str(done["kind"]), _args(done, "whole_task_done")),
                    source=source)


def plan_to_dict(plan: TaskPlan) -> dict:
    return {
        "subtasks": [
            {
                "index": st.index,
                "reward": {"template": st.reward.template, "args": dict(st.reward.args)},
                "constraints": [
                    {"template": c.template, "args": dict(c.args), "latent": c.latent}
                    for c in st.constraints
                ],
                "params": {p.name: {"value": p.value, "lower": p.lower, "upper": p.upper}
                           for p in st.params},
                "window": st.window,
                "terminal": {"kind": st.terminal.kind, "args": dict(st.terminal.args)},
            }
            for st in plan.subtasks
        ],
        "whole_task_done": {"kind": plan.whole_task_done.kind,
                            "args": dict(plan.whole_task_done.args)},
    }


def dump_plan(plan: TaskPlan, indent: int | None = 2) -> str:
    return json.dumps(plan_to_dict(plan), indent=indent, sort_keys=True)


def load_plan(text: str, source: str = "fixture") -> TaskPlan:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"plan is not valid JSON: {e}") from None
    return plan_from_dict(doc, source=source)
