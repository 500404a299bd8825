from .backends import (
    AuditLog,
    BackendConfig,
    BackendTimeout,
    Completion,
    ConfigError,
    FixtureMiss,
    HttpError,
    LlmError,
    LlmUnavailable,
    RemoteBackend,
    ScriptedBackend,
    make_backend,
)
from .pipeline import (
    ConstraintHint,
    CorrectionCommand,
    LatentObject,
    LatentRiskAssessment,
    LlmPipeline,
    ParseError,
    RiskHandlingSolution,
    parse_assessment,
    parse_correction,
    parse_plan,
    parse_solution,
)
from .prompts import ROLES, TEMPLATES, PromptTemplate, RenderedPrompt, slot_digest

__all__ = [
    "AuditLog", "BackendConfig", "BackendTimeout", "Completion", "ConfigError", "ConstraintHint",
    "CorrectionCommand", "FixtureMiss", "HttpError", "LatentObject", "LatentRiskAssessment",
    "LlmError", "LlmPipeline", "LlmUnavailable", "ParseError", "PromptTemplate", "ROLES",
    "RemoteBackend", "RenderedPrompt", "RiskHandlingSolution", "ScriptedBackend", "TEMPLATES",
    "make_backend", "parse_assessment", "parse_correction", "parse_plan", "parse_solution", "slot_digest",
]
