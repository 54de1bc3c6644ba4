"""Model backends: a uniform invocation contract over scripted, replay and HTTP chat models."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Union

import requests
from tenacity import (
    Retrying,
    before_sleep_log,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from hierkd.config import BackendConfig, BackendKind, settings
from hierkd.core.errors import (
    BackendError,
    BackendRefusalError,
    BackendTimeoutError,
    ConfigError,
    InstanceError,
    ReplayMissError,
    TransientBackendError,
)
from hierkd.core.models import LevelQuestion, ModelRequest, ModelResponse, VqaInstance
from hierkd.processing.prompting import NO_FACTS, render_options

logger = logging.getLogger(__name__)


class ModelBackend(ABC):
    """A model that answers prompts. Implementations must be thread-safe."""

    name: str = "backend"

    def prepare(self, instances: Iterable[VqaInstance]) -> None:
        """Hook called by the harness before a run. Gold-aware mocks index instances here."""

    @abstractmethod
    def complete(self, request: ModelRequest) -> ModelResponse:
        ...

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.name}

    def close(self) -> None:
        pass


def invoke(backend: ModelBackend, req: ModelRequest) -> ModelResponse:
    """Send one request through a backend.

    Raises:
        TransientBackendError: transport failure after retries are exhausted.
        BackendTimeoutError: the request timed out.
        BackendRefusalError: the server rejected the request.
        ReplayMissError: a replay backend has no record of the request.
    """
    response = backend.complete(req)
    if response.text is None:
        raise BackendError(f"{backend.name} returned no text")
    return response


def request_hash(req: ModelRequest) -> str:
    """Replay key: sha256 over prompt, image reference and decode config."""
    payload = json.dumps(
        {"prompt": req.prompt, "image_ref": req.image_ref, "decode": req.decode.model_dump()},
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# Gold lookup for scripted and simulated backends
@dataclass(frozen=True)
class LocatedRequest:
    instance: VqaInstance
    joint: bool
    question: Optional[LevelQuestion] = None
    known_facts: List[str] = field(default_factory=list)


class GoldIndex:
    """Finds the instance and level a rendered prompt asks about."""

    def __init__(self, instances: Iterable[VqaInstance] = ()):
        self._by_image: Dict[str, VqaInstance] = {}
        self._lock = threading.Lock()
        self.add(instances)

    def add(self, instances: Iterable[VqaInstance]) -> None:
        with self._lock:
            for instance in instances:
                known = self._by_image.get(instance.image_ref)
                if known is not None and known.instance_id != instance.instance_id:
                    raise InstanceError(
                        "image shared by two instances",
                        detail=f"{instance.image_ref}: {known.instance_id}, {instance.instance_id}",
                    )
                self._by_image[instance.image_ref] = instance

    def __len__(self) -> int:
        return len(self._by_image)

    @staticmethod
    def parse_known_facts(line: str) -> List[str]:
        body = line.removeprefix("Known facts:").strip()
        if body == NO_FACTS or not body:
            return []
        labels = []
        for entry in body.rstrip(".").split("; "):
            _, _, label = entry.partition(" = ")
            labels.append(label)
        return labels

    def locate(self, request: ModelRequest) -> LocatedRequest:
        instance = self._by_image.get(request.image_ref)
        if instance is None:
            raise BackendError("no instance registered for image", detail=request.image_ref)
        lines = request.prompt.split("\n")
        if lines[0].startswith("Known facts:"):
            return LocatedRequest(instance=instance, joint=True)
        known = self.parse_known_facts(lines[1])
        options_line = lines[4] if len(lines) > 4 else ""
        for question in instance.per_level:
            if render_options(question.options) == options_line:
                return LocatedRequest(instance=instance, joint=False, question=question, known_facts=known)
        raise BackendError("prompt does not match any level of the instance", detail=instance.instance_id)


class ScriptedBackend(ModelBackend):
    """Answers through a user-supplied function of the request."""

    name = "scripted"

    def __init__(self, script: Callable[[ModelRequest], Union[str, ModelResponse]], name: str = "scripted"):
        self._script = script
        self.name = name

    def complete(self, request: ModelRequest) -> ModelResponse:
        out = self._script(request)
        if isinstance(out, ModelResponse):
            return out
        return ModelResponse(text=out)


class GoldBackend(ScriptedBackend):
    """Scripted to answer every question with its gold letter."""

    def __init__(self, instances: Iterable[VqaInstance] = ()):
        self.index = GoldIndex(instances)
        super().__init__(self._answer, name=BackendKind.GOLD.value)

    def prepare(self, instances: Iterable[VqaInstance]) -> None:
        self.index.add(instances)

    def _answer(self, request: ModelRequest) -> str:
        located = self.index.locate(request)
        if located.joint:
            return " ".join(located.instance.gold_letters)
        assert located.question is not None
        return located.question.gold_letter


def gold_scripted_backend(instances: Iterable[VqaInstance] = ()) -> GoldBackend:
    return GoldBackend(instances)


# Replay
class ReplayBackend(ModelBackend):
    """Serves stored responses keyed by request hash; never fabricates output."""

    name = BackendKind.REPLAY.value

    def __init__(self, log_path: Union[str, Path]):
        self.log_path = Path(log_path)
        self._responses: Dict[str, str] = {}
        try:
            lines = self.log_path.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise ConfigError(f"cannot read replay log {log_path}", detail=str(e)) from e
        for line in lines:
            if line.strip():
                record = json.loads(line)
                self._responses[record["request_hash"]] = record["text"]
        logger.info("Loaded %d replay records from %s", len(self._responses), self.log_path)

    def complete(self, request: ModelRequest) -> ModelResponse:
        key = request_hash(request)
        if key not in self._responses:
            logger.warning("Replay miss for %s", key[:12])
            raise ReplayMissError(key)
        return ModelResponse(text=self._responses[key], latency_ms=0.0)

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.name, "replay_log": str(self.log_path)}


class RecordingBackend(ModelBackend):
    """Wraps a backend and writes a replay log of every successful call on close."""

    def __init__(self, inner: ModelBackend, log_path: Union[str, Path]):
        self.inner = inner
        self.log_path = Path(log_path)
        self.name = inner.name
        self._records: Dict[str, Dict[str, str]] = {}
        self._lock = threading.Lock()

    def prepare(self, instances: Iterable[VqaInstance]) -> None:
        self.inner.prepare(instances)

    def complete(self, request: ModelRequest) -> ModelResponse:
        response = self.inner.complete(request)
        key = request_hash(request)
        with self._lock:
            self._records[key] = {"request_hash": key, "prompt": request.prompt, "text": response.text}
        return response

    def describe(self) -> Dict[str, Any]:
        return {**self.inner.describe(), "record_log": str(self.log_path)}

    def close(self) -> None:
        with self._lock:
            with self.log_path.open("w", encoding="utf-8") as fh:
                for key in sorted(self._records):
                    fh.write(json.dumps(self._records[key], ensure_ascii=False) + "\n")
        logger.info("Wrote %d replay records to %s", len(self._records), self.log_path)
        self.inner.close()


# HTTP chat-completions
class HttpChatBackend(ModelBackend):
    """Chat-completions client with bounded in-flight requests and retry on transient errors."""

    name = BackendKind.HTTP.value

    def __init__(
        self,
        config: BackendConfig,
        session: Optional[requests.Session] = None,
        backoff_min_s: Optional[float] = None,
        backoff_max_s: Optional[float] = None,
    ):
        self.base_url = (config.base_url or settings.api_base_url).rstrip("/")
        self.model = config.model or settings.api_model
        self.timeout_s = config.timeout_s or settings.request_timeout_s
        self.max_retries = settings.max_retries if config.max_retries is None else config.max_retries
        self.max_in_flight = config.max_in_flight or settings.max_in_flight
        self.backoff_min_s = settings.backoff_min_s if backoff_min_s is None else backoff_min_s
        self.backoff_max_s = settings.backoff_max_s if backoff_max_s is None else backoff_max_s
        self.api_key_env = config.api_key_env or settings.api_key_env

        self.session = session or requests.Session()
        self._in_flight = threading.BoundedSemaphore(self.max_in_flight)

        token = os.environ.get(self.api_key_env)
        self._headers = {"Content-Type": "application/json"}
        if token:
            self._headers["Authorization"] = f"Bearer {token}"
        else:
            logger.warning("%s is not set; sending requests without a bearer token", self.api_key_env)

    @property
    def url(self) -> str:
        return f"{self.base_url}/chat/completions"

    def build_body(self, request: ModelRequest) -> Dict[str, Any]:
        content: List[Dict[str, Any]] = [{"type": "text", "text": request.prompt}]
        if request.image_ref:
            content.append({"type": "image_url", "image_url": {"url": request.image_ref}})
        decode = request.decode
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": 0.0 if decode.greedy else decode.temperature,
            "top_p": 1.0 if decode.greedy else decode.top_p,
            "max_tokens": decode.max_new_tokens,
        }

    def _post(self, body: Dict[str, Any]) -> str:
        with self._in_flight:
            try:
                response = self.session.post(self.url, json=body, headers=self._headers, timeout=self.timeout_s)
            except requests.Timeout as e:
                raise BackendTimeoutError("request timed out", detail=str(e)) from e
            except requests.ConnectionError as e:
                raise TransientBackendError("connection failed", detail=str(e)) from e
            except requests.RequestException as e:
                raise TransientBackendError(f"transport error ({type(e).__name__})", detail=str(e)) from e

        status = response.status_code
        if status == 429 or status >= 500:
            raise TransientBackendError(f"server returned {status}", detail=response.text[:200])
        if status >= 400:
            raise BackendRefusalError(f"server refused request ({status})", status_code=status, detail=response.text[:200])

        try:
            content = response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise BackendError("malformed chat-completions response", detail=str(e)) from e
        if isinstance(content, list):
            content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
        if content is None:
            raise BackendError("response has no content")
        return str(content)

    def complete(self, request: ModelRequest) -> ModelResponse:
        body = self.build_body(request)
        started = time.perf_counter()
        attempts = 0
        retrying = Retrying(
            stop=stop_after_attempt(self.max_retries + 1),
            wait=wait_exponential(multiplier=self.backoff_min_s, max=self.backoff_max_s),
            retry=retry_if_exception_type(TransientBackendError),
            before_sleep=before_sleep_log(logger, logging.WARNING),
            reraise=True,
        )
        try:
            for attempt in retrying:
                with attempt:
                    attempts = attempt.retry_state.attempt_number
                    text = self._post(body)
        except BackendError as e:
            e.attempts = attempts
            raise
        latency_ms = (time.perf_counter() - started) * 1000.0
        return ModelResponse(text=text, latency_ms=latency_ms, attempts=attempts)

    def describe(self) -> Dict[str, Any]:
        return {
            "kind": self.name,
            "base_url": self.base_url,
            "model": self.model,
            "max_retries": self.max_retries,
            "max_in_flight": self.max_in_flight,
        }

    def close(self) -> None:
        self.session.close()


def build_backend(config: BackendConfig) -> ModelBackend:
    """Instantiate the backend a config describes."""
    from hierkd.services.mock_backends import mock_conditional

    backend: ModelBackend
    if config.kind == BackendKind.GOLD:
        backend = gold_scripted_backend()
    elif config.kind == BackendKind.MOCK_CONDITIONAL:
        backend = mock_conditional(
            config.accuracy_with_parent,
            config.accuracy_without,
            config.seed,
            joint_collapse=config.joint_collapse,
        )
    elif config.kind == BackendKind.REPLAY:
        if not config.replay_log:
            raise ConfigError("replay backend needs replay_log")
        backend = ReplayBackend(config.replay_log)
    elif config.kind == BackendKind.HTTP:
        backend = HttpChatBackend(config)
    else:
        raise ConfigError(f"unknown backend kind {config.kind}")

    if config.record_log:
        backend = RecordingBackend(backend, config.record_log)
    return backend
