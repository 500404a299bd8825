"""Contextual-reasoning pipeline: latent objects, risk handling, plan generation, correction.

Every response is parsed strictly.  A parse or validation failure raises
``ParseError`` carrying the raw text; no stage ever substitutes a plan of its own.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

from ..core import (
    PlanError,
    TaskPlan,
    dump_plan,
    object_key,
    plan_from_dict,
    validate_plan,
)
from ..envs import SceneDescription, observe_scene
from .backends import AuditLog, AuditedBackend
from .prompts import TEMPLATES, RenderedPrompt

LABELS = ("High", "Medium", "Low")
HINT_TEMPLATES = ("SpeedLimit", "MinDistance")
NO_CHANGE = "no change"


class ParseError(ValueError):
    def __init__(self, message: str, raw: str, role: str = ""):
        self.raw = raw
        self.role = role
        super().__init__(f"{role + ': ' if role else ''}{message}")


@dataclass(frozen=True)
class LatentObject:
    object: str
    probability: str
    rationale: str = ""


@dataclass(frozen=True)
class LatentRiskAssessment:
    objects: tuple[LatentObject, ...] = ()

    def label_of(self, obj: str) -> str | None:
        key = object_key(obj)
        for o in self.objects:
            if object_key(o.object) == key:
                return o.probability
        return None

    def to_dict(self) -> dict:
        return {"objects": [{"object": o.object, "probability": o.probability, "rationale": o.rationale}
                            for o in self.objects]}


@dataclass(frozen=True)
class ConstraintHint:
    template: str
    object: str
    threshold: float

    @property
    def key(self) -> tuple[str, str]:
        return self.template, object_key(self.object)


@dataclass(frozen=True)
class RiskHandlingSolution:
    text: str
    hints: tuple[ConstraintHint, ...] = ()

    def to_dict(self) -> dict:
        return {"solution": self.text,
                "hints": [{"template": h.template, "object": h.object, "threshold": h.threshold}
                          for h in self.hints]}


@dataclass(frozen=True)
class CorrectionCommand:
    text: str
    subtasks: tuple[int, ...] = ()
    seeds: Mapping[str, float] = field(default_factory=dict)

    @property
    def no_change(self) -> bool:
        return self.text.strip().lower() == NO_CHANGE and not self.seeds

    def to_dict(self) -> dict:
        return {"command": self.text, "subtasks": list(self.subtasks), "seeds": dict(self.seeds)}


# --------------------------------------------------------------------------
# parsing


def _json(raw: str, role: str) -> Any:
    text = raw.strip()
    if text.startswith("```"):
        # tolerate a single fenced block, nothing else
        lines = text.splitlines()
        if len(lines) >= 2 and lines[-1].strip() == "```":
            text = "\n".join(lines[1:-1])
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"response is not JSON ({e})", raw, role) from None


def _keys(obj: Any, required: set[str], where: str, raw: str, role: str, optional: set[str] = frozenset()):
    if not isinstance(obj, dict):
        raise ParseError(f"{where} must be an object", raw, role)
    missing = required - set(obj)
    extra = set(obj) - required - set(optional)
    if missing or extra:
        raise ParseError(f"{where}: missing {sorted(missing)}, unknown {sorted(extra)}", raw, role)


def _number(value: Any, where: str, raw: str, role: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ParseError(f"{where} must be a finite number", raw, role)
    return float(value)


def parse_assessment(raw: str) -> LatentRiskAssessment:
    role = "LatentObject"
    doc = _json(raw, role)
    _keys(doc, {"objects"}, "response", raw, role)
    if not isinstance(doc["objects"], list):
        raise ParseError("objects must be an array", raw, role)
    out = []
    for k, o in enumerate(doc["objects"]):
        _keys(o, {"object", "probability"}, f"objects[{k}]", raw, role, {"rationale"})
        if o["probability"] not in LABELS:
            raise ParseError(f"objects[{k}].probability must be one of {LABELS}", raw, role)
        if not isinstance(o["object"], str) or not o["object"].strip():
            raise ParseError(f"objects[{k}].object must be a nonempty string", raw, role)
        out.append(LatentObject(o["object"], o["probability"], str(o.get("rationale", ""))))
    return LatentRiskAssessment(tuple(out))


def parse_solution(raw: str, assessment: LatentRiskAssessment | None = None) -> RiskHandlingSolution:
    role = "RiskHandling"
    doc = _json(raw, role)
    _keys(doc, {"solution", "hints"}, "response", raw, role)
    if not isinstance(doc["solution"], str) or not isinstance(doc["hints"], list):
        raise ParseError("solution must be text and hints an array", raw, role)
    hints = []
    for k, h in enumerate(doc["hints"]):
        _keys(h, {"template", "object", "threshold"}, f"hints[{k}]", raw, role)
        if h["template"] not in HINT_TEMPLATES:
            raise ParseError(f"hints[{k}].template must be one of {HINT_TEMPLATES}", raw, role)
        if not isinstance(h["object"], str) or not h["object"].strip():
            raise ParseError(f"hints[{k}].object must be a nonempty string", raw, role)
        hints.append(ConstraintHint(h["template"], h["object"], _number(h["threshold"], f"hints[{k}].threshold", raw, role)))
    if assessment is not None:
        risky = any(o.probability in ("High", "Medium") for o in assessment.objects)
        if risky and not doc["solution"].strip():
            raise ParseError("solution text is empty although a High/Medium object exists", raw, role)
    return RiskHandlingSolution(doc["solution"], tuple(hints))


def parse_correction(raw: str, n_subtasks: int | None = None) -> CorrectionCommand:
    role = "Correction"
    doc = _json(raw, role)
    _keys(doc, {"command"}, "response", raw, role, {"subtasks", "seeds"})
    if not isinstance(doc["command"], str) or not doc["command"].strip():
        raise ParseError("command must be nonempty text", raw, role)
    subtasks = doc.get("subtasks", [])
    if not isinstance(subtasks, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in subtasks):
        raise ParseError("subtasks must be an array of integers", raw, role)
    if n_subtasks is not None and any(not 1 <= i <= n_subtasks for i in subtasks):
        raise ParseError(f"subtask indices must lie in 1..{n_subtasks}", raw, role)
    seeds = doc.get("seeds", {})
    if not isinstance(seeds, dict):
        raise ParseError("seeds must be an object", raw, role)
    clean = {str(k): _number(v, f"seeds.{k}", raw, role) for k, v in seeds.items()}
    return CorrectionCommand(doc["command"], tuple(subtasks), clean)


def parse_plan(raw: str, allowed_latent: set[tuple[str, str]] | None = None, source: str = "llm") -> TaskPlan:
    """Parse and validate a plan; latent constraints must trace to an allowed (template, object)."""
    role = "Coder"
    doc = _json(raw, role)
    try:
        plan = validate_plan(plan_from_dict(doc, source=source))
    except PlanError as e:
        raise ParseError(str(e), raw, role) from None
    allowed = allowed_latent or set()
    for st in plan.subtasks:
        for c in st.constraints:
            if c.latent and (c.template, c.object) not in allowed:
                raise ParseError(f"latent {c.label()} in subtask {st.index} has no matching hint", raw, role)
    return plan


def latent_keys(plan: TaskPlan) -> set[tuple[str, str]]:
    return {(c.template, c.object) for st in plan.subtasks for c in st.constraints if c.latent}



# --------------------------------------------------------------------------
# pipeline


class LlmPipeline:
    """Calls the four roles through one backend."""

    def __init__(self, backend, audit_log=None):
        self.backend = AuditedBackend(backend, AuditLog(audit_log)) if audit_log else backend
        self.calls: list[tuple[str, str]] = []

    def _ask(self, role: str, **slots) -> str:
        prompt: RenderedPrompt = TEMPLATES[role].render(slots)
        self.calls.append((role, prompt.digest))
        return self.backend.complete(prompt).text

    @staticmethod
    def describe_scene(scenario) -> SceneDescription:
        return observe_scene(scenario)

    def query_latent_objects(self, instruction: str, scene: SceneDescription | str) -> LatentRiskAssessment:
        text = scene.text if isinstance(scene, SceneDescription) else scene
        if not instruction.strip() or not text.strip():
            raise ValueError("instruction and scene must be nonempty")
        return parse_assessment(self._ask("LatentObject", instruction=instruction, scene=text))

    def propose_risk_handling(self, instruction: str, assessment: LatentRiskAssessment) -> RiskHandlingSolution:
        raw = self._ask("RiskHandling", instruction=instruction,
                        assessment=json.dumps(assessment.to_dict(), sort_keys=True))
        return parse_solution(raw, assessment)

    def generate_plan(self, instruction: str, guidance: str, scene: SceneDescription | str = "",
                      hints: tuple[ConstraintHint, ...] = (), current_plan: TaskPlan | None = None,
                      source: str = "llm") -> TaskPlan:
        if not instruction.strip():
            raise ValueError("instruction must be nonempty")
        text = scene.text if isinstance(scene, SceneDescription) else scene
        hint_doc = json.dumps([{"template": h.template, "object": h.object, "threshold": h.threshold}
                               for h in hints], sort_keys=True)
        raw = self._ask("Coder", instruction=instruction, scene=text or "none", guidance=guidance or "none",
                        hints=hint_doc,
                        current_plan=dump_plan(current_plan, indent=None) if current_plan else "none")
        allowed = {h.key for h in hints}
        if current_plan is not None:
            allowed |= latent_keys(current_plan)
        return parse_plan(raw, allowed, source)

    def correction(self, instruction: str, feedback: str, plan: TaskPlan) -> CorrectionCommand:
        if not str(feedback).strip():
            raise ValueError("feedback must be nonempty")
        raw = self._ask("Correction", instruction=instruction, feedback=str(feedback),
                        plan=dump_plan(plan, indent=None))
        return parse_correction(raw, len(plan.subtasks))

    def initial_plan(self, instruction: str, scene: SceneDescription):
        """Assessment, risk-handling solution and plan for a scene."""
        assessment = self.query_latent_objects(instruction, scene)
        solution = self.propose_risk_handling(instruction, assessment)
        plan = self.generate_plan(instruction, solution.text, scene, solution.hints)
        return assessment, solution, plan
