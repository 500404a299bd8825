"""Prompt templates for the four language-model roles and the fixture digest."""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass
from typing import Mapping

ROLES = ("Coder", "LatentObject", "RiskHandling", "Correction")


class MissingSlot(KeyError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    role: str
    system_text: str
    user_template: str

    @property
    def slots(self) -> frozenset[str]:
        return frozenset(name for _, name, _, _ in string.Formatter().parse(self.user_template) if name)

    def render(self, slots: Mapping[str, str]) -> "RenderedPrompt":
        missing = self.slots - set(slots)
        extra = set(slots) - self.slots
        if missing or extra:
            raise MissingSlot(f"{self.role} prompt: missing {sorted(missing)}, unexpected {sorted(extra)}")
        clean = {k: str(v) for k, v in slots.items()}
        user = self.user_template.format(**clean)
        return RenderedPrompt(self.role, self.system_text, user, clean)


@dataclass(frozen=True)
class RenderedPrompt:
    role: str
    system: str
    user: str
    slots: Mapping[str, str]

    @property
    def digest(self) -> str:
        return slot_digest(self.role, self.slots)


def slot_digest(role: str, slots: Mapping[str, str]) -> str:
    """Stable key of a prompt: hash of the role and its sorted slot values."""
    doc = json.dumps({"role": role, "slots": sorted((k, str(v)) for k, v in slots.items())},
                     ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(doc.encode("utf-8")).hexdigest()[:16]


_PLAN_SCHEMA = """\
Reply with one JSON object and nothing else:
{"subtasks": [{"index": 1,
               "reward": {"template": "QuadraticTracking" | "VelocityTracking", "args": {...}},
               "constraints": [{"template": "ForceLimit" | "MinDistance" | "SpeedLimit",
                                "args": {...}, "latent": false}],
               "params": {"<name>": {"value": v, "lower": lo, "upper": hi}},
               "window": <steps>,
               "terminal": {"kind": "StateWithinTolerance" | "WindowElapsed", "args": {...}}}],
 "whole_task_done": {"kind": "StateWithinTolerance", "args": {"state_index": 0, "target": "s<i>.<name>", "tol": t}}}
Template arguments:
  QuadraticTracking {target, state_index, scale?}; VelocityTracking {target, scale?}
  ForceLimit {threshold, object?}; MinDistance {object, threshold}; SpeedLimit {threshold, object?}
  StateWithinTolerance {state_index, target, tol}; WindowElapsed {}
A target or threshold is either a parameter name of the same subtask or a number.
Subtask indices run 1..N. A constraint added for a latent risk sets "latent": true and names its object.
No other keys are allowed."""

CODER = PromptTemplate(
    "Coder",
    "You turn a task instruction into an ordered list of subtasks for a model-predictive "
    "controller. Each subtask has a reward to maximize, safety constraints that must stay "
    "nonnegative, tunable parameters with bounds, a step budget and a completion test.\n"
    + _PLAN_SCHEMA,
    "Instruction: {instruction}\n"
    "Scene: {scene}\n"
    "Guidance: {guidance}\n"
    "Constraint hints for latent risks (JSON): {hints}\n"
    "Current plan (JSON, or none): {current_plan}",
)

LATENT_OBJECT = PromptTemplate(
    "LatentObject",
    "You assess a driving or manipulation scene for objects that are not a hazard yet but "
    "may become one, including objects that are likely present but hidden. Label each with "
    "the probability of becoming an apparent risk: High, Medium or Low.\n"
    'Reply with JSON only: {"objects": [{"object": name, "probability": "High"|"Medium"|"Low", '
    '"rationale": text}]}',
    "Instruction: {instruction}\nScene: {scene}",
)

RISK_HANDLING = PromptTemplate(
    "RiskHandling",
    "Given latent-risk objects, propose how the controlled system should act to stay safe "
    "without giving up efficiency. Add constraint hints only for High or Medium objects.\n"
    'Reply with JSON only: {"solution": text, "hints": [{"template": "SpeedLimit"|"MinDistance", '
    '"object": name, "threshold": number}]}',
    "Instruction: {instruction}\nLatent-risk assessment (JSON): {assessment}",
)

CORRECTION = PromptTemplate(
    "Correction",
    "You review feedback from executing a subtask plan and decide how to change it. You may "
    "rewrite subtasks or propose new parameter values. If nothing should change, the command "
    'is exactly "no change".\n'
    'Reply with JSON only: {"command": text, "subtasks": [indices to rewrite], '
    '"seeds": {"s<i>.<name>": value}}',
    "Instruction: {instruction}\nCurrent plan (JSON): {plan}\nFeedback:\n{feedback}",
)

TEMPLATES = {t.role: t for t in (CODER, LATENT_OBJECT, RISK_HANDLING, CORRECTION)}
