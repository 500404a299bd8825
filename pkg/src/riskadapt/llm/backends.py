"""Backends that turn a rendered prompt into response text.

``ScriptedBackend`` replays fixture files keyed by the prompt digest;
``RemoteBackend`` calls an OpenAI-compatible chat-completion endpoint.
Every exchange can be appended to an NDJSON audit log.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import httpx

from .prompts import RenderedPrompt

log = logging.getLogger(__name__)

RETRY_STATUSES = frozenset({429, 500, 502, 503, 504})


class LlmError(Exception):
    pass


class LlmUnavailable(LlmError):
    """The remote service could not produce a response."""


class BackendTimeout(LlmUnavailable):
    pass


class HttpError(LlmUnavailable):
    def __init__(self, status: int, body: str = ""):
        self.status = status
        self.body = body
        super().__init__(f"HTTP {status}: {body[:200]}")


class FixtureMiss(LlmError):
    def __init__(self, digest: str, role: str, path: Path | None = None):
        self.digest = digest
        self.role = role
        self.path = path
        super().__init__(f"no {role} fixture for digest {digest}" + (f" ({path})" if path else ""))


class ConfigError(LlmError):
    pass


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "scripted"  # "scripted" or "remote"
    endpoint: str | None = None
    model: str | None = None
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 0.5
    temperature: float = 0.0
    fixture_dir: str | None = None
    api_key_env: str = "LLM_API_KEY"
    audit_log: str | None = None

    @classmethod
    def from_env(cls, **overrides) -> "BackendConfig":
        """Endpoint and model from LLM_ENDPOINT / LLM_MODEL unless given explicitly."""
        values = {"endpoint": os.environ.get("LLM_ENDPOINT"), "model": os.environ.get("LLM_MODEL")}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass(frozen=True)
class Completion:
    text: str
    retries: int = 0


class AuditLog:
    """Append-only newline-delimited record of every request and response."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def write(self, prompt: RenderedPrompt, backend: str, text: str | None,
              retries: int = 0, error: str | None = None) -> None:
        record = {
            "timestamp": time.time(),
            "role": prompt.role,
            "digest": prompt.digest,
            "backend": backend,
            "request": {"system": prompt.system, "user": prompt.user},
            "response": text,
            "retries": retries,
            "error": error,
        }
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")


class ScriptedBackend:
    name = "scripted"

    def __init__(self, fixture_dir):
        self.fixture_dir = Path(fixture_dir)
        if not self.fixture_dir.is_dir():
            raise ConfigError(f"fixture directory {self.fixture_dir} does not exist")

    def path_for(self, prompt: RenderedPrompt) -> Path:
        return self.fixture_dir / prompt.role / f"{prompt.digest}.txt"

    def complete(self, prompt: RenderedPrompt) -> Completion:
        path = self.path_for(prompt)
        try:
            return Completion(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise FixtureMiss(prompt.digest, prompt.role, path) from None


class RemoteBackend:
    name = "remote"

    def __init__(self, cfg: BackendConfig, client: httpx.Client | None = None, sleep=time.sleep):
        if not cfg.endpoint:
            raise ConfigError("remote backend needs an endpoint (LLM_ENDPOINT or --endpoint)")
        self.api_key = os.environ.get(cfg.api_key_env)
        if not self.api_key:
            raise ConfigError(f"remote backend needs a credential in ${cfg.api_key_env}")
        self.cfg = cfg
        self.client = client or httpx.Client(timeout=cfg.timeout)
        self._sleep = sleep
        self.last_retries = 0

    @property
    def url(self) -> str:
        base = self.cfg.endpoint.rstrip("/")
        return base if base.endswith("/chat/completions") else base + "/chat/completions"

    def complete(self, prompt: RenderedPrompt) -> Completion:
        body = {
            "model": self.cfg.model or "gpt-4",
            "temperature": self.cfg.temperature,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.user},
            ],
        }
        headers = {"Authorization": f"Bearer {self.api_key}"}
        retries = 0
        while True:
            try:
                resp = self.client.post(self.url, json=body, headers=headers, timeout=self.cfg.timeout)
            except httpx.TimeoutException as e:
                if retries >= self.cfg.max_retries:
                    self.last_retries = retries
                    raise BackendTimeout(f"request timed out after {retries} retries: {e}") from None
            except httpx.HTTPError as e:
                self.last_retries = retries
                raise LlmUnavailable(f"transport error: {e}") from None
            else:
                if resp.status_code == 200:
                    self.last_retries = retries
                    return Completion(self._content(resp), retries)
                if resp.status_code not in RETRY_STATUSES or retries >= self.cfg.max_retries:
                    self.last_retries = retries
                    raise HttpError(resp.status_code, resp.text)
            delay = self.cfg.backoff * 2 ** retries
            retries += 1
            log.warning("%s request failed, retry %d in %.2fs", prompt.role, retries, delay)
            self._sleep(delay)

    @staticmethod
    def _content(resp: httpx.Response) -> str:
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise HttpError(resp.status_code, "malformed completion body: " + resp.text) from None


class AuditedBackend:
    """Wraps a backend and logs every exchange, including failures."""

    def __init__(self, inner, audit: AuditLog):
        self.inner = inner
        self.audit = audit
        self.name = inner.name

    def complete(self, prompt: RenderedPrompt) -> Completion:
        try:
            out = self.inner.complete(prompt)
        except LlmError as e:
            self.audit.write(prompt, self.name, None, getattr(self.inner, "last_retries", 0), str(e))
            raise
        self.audit.write(prompt, self.name, out.text, out.retries)
        return out


def make_backend(cfg: BackendConfig):
    if cfg.kind == "scripted":
        if not cfg.fixture_dir:
            raise ConfigError("scripted backend needs a fixture directory")
        backend = ScriptedBackend(cfg.fixture_dir)
    elif cfg.kind == "remote":
        backend = RemoteBackend(cfg)
    else:
        raise ConfigError(f"unknown backend kind {cfg.kind!r}")
    if cfg.audit_log:
        backend = AuditedBackend(backend, AuditLog(cfg.audit_log))
    return backend
