"""Uniform access to text and vision model backends.

One gateway instance serves every agent role in a run. Each role carries
its own sampling configuration; requests are retried with exponential
backoff on transient failures and rate-limited client-side. The mock
backend (mock_backend module) plugs in behind the same interface and makes
whole runs deterministic.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Protocol, Sequence

import requests

from .errors import (
    EmptyCompletion,
    GatewayError,
    ImageNotAllowed,
    MalformedReview,
    RateLimited,
)
from .prompts import REVIEW_JSON_KEYS, render

logger = logging.getLogger(__name__)


class ModelRole(str, Enum):
    CODE_GENERATION = "code_generation"
    FEEDBACK_AGENT = "feedback_agent"
    VLM_FEEDBACK = "vlm_feedback"
    SUMMARY_REPORT = "summary_report"
    EVALUATOR = "evaluator"
    WRITEUP = "writeup"


# Roles whose requests may carry image attachments.
IMAGE_ROLES = frozenset({ModelRole.VLM_FEEDBACK, ModelRole.WRITEUP})


@dataclass
class ModelRoleConfig:
    role: ModelRole
    model_id: str = "mock-model"
    max_tokens: int = 8192
    temperature: float = 0.5


def default_role_configs() -> dict[ModelRole, ModelRoleConfig]:
    """Per-role sampling defaults for a stock run."""
    return {
        ModelRole.CODE_GENERATION: ModelRoleConfig(
            ModelRole.CODE_GENERATION, max_tokens=8192, temperature=0.5
        ),
        ModelRole.FEEDBACK_AGENT: ModelRoleConfig(
            ModelRole.FEEDBACK_AGENT, max_tokens=8192, temperature=0.5
        ),
        ModelRole.VLM_FEEDBACK: ModelRoleConfig(
            ModelRole.VLM_FEEDBACK, max_tokens=8192, temperature=0.5
        ),
        ModelRole.SUMMARY_REPORT: ModelRoleConfig(
            ModelRole.SUMMARY_REPORT, max_tokens=8192, temperature=1.0
        ),
        ModelRole.EVALUATOR: ModelRoleConfig(
            ModelRole.EVALUATOR, max_tokens=8192, temperature=0.5
        ),
        ModelRole.WRITEUP: ModelRoleConfig(
            ModelRole.WRITEUP, max_tokens=8192, temperature=1.0
        ),
    }


@dataclass
class ModelMessage:
    text: str
    images: list[bytes] = field(default_factory=list)


@dataclass
class ModelRequest:
    role: ModelRole
    messages: list[ModelMessage]
    seed: Optional[int] = None

    def has_images(self) -> bool:
        return any(m.images for m in self.messages)


@dataclass
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass
class ModelResponse:
    text: str
    usage: Usage
    backend: str


def request_digest(request: ModelRequest) -> str:
    """Stable content digest over role, messages, attachments, and seed."""
    hasher = hashlib.sha256()
    hasher.update(request.role.value.encode())
    for message in request.messages:
        hasher.update(b"\x1e")
        hasher.update(message.text.encode())
        for image in message.images:
            hasher.update(b"\x1f")
            hasher.update(hashlib.sha256(image).digest())
    hasher.update(str(request.seed).encode())
    return hasher.hexdigest()


class TransientBackendError(GatewayError):
    """Retryable backend failure (connection trouble, 5xx)."""


class Backend(Protocol):
    name: str

    def complete(self, request: ModelRequest, config: ModelRoleConfig) -> ModelResponse:
        ...


# --- completion post-processing ---------------------------------------------

_FENCE_RE = re.compile(r"```([A-Za-z0-9_+-]*)[ \t]*\n(.*?)```", re.DOTALL)


def extract_fenced_blocks(text: str, language: Optional[str] = None) -> list[str]:
    blocks = []
    for match in _FENCE_RE.finditer(text):
        tag, body = match.group(1), match.group(2)
        if language is None or tag == language:
            blocks.append(body.strip("\n"))
    return blocks


def last_fenced_block(text: str, language: Optional[str] = None) -> str:
    """The last fenced code block of a completion; raises EmptyCompletion."""
    blocks = extract_fenced_blocks(text, language)
    if language is not None and not blocks:
        blocks = extract_fenced_blocks(text)
    if not blocks:
        raise EmptyCompletion("completion contained no fenced code block")
    return blocks[-1]


def text_before_last_block(text: str) -> str:
    matches = list(_FENCE_RE.finditer(text))
    if not matches:
        return text.strip()
    return text[: matches[-1].start()].strip()


# --- client-side rate limiting ----------------------------------------------


class TokenBucket:
    """Simple token bucket; acquire() blocks until a token is available."""

    def __init__(self, rate_per_second: float, capacity: int = 4):
        self.rate = rate_per_second
        self.capacity = float(capacity)
        self._tokens = float(capacity)
        self._updated = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(
                    self.capacity, self._tokens + (now - self._updated) * self.rate
                )
                self._updated = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            time.sleep(wait)


# --- literature search --------------------------------------------------------


@dataclass
class LiteratureResult:
    title: str
    year: int
    venue: str
    snippet: str
    external_id: str

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "year": self.year,
            "venue": self.venue,
            "snippet": self.snippet,
            "external_id": self.external_id,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LiteratureResult":
        return cls(
            title=data["title"],
            year=data["year"],
            venue=data["venue"],
            snippet=data["snippet"],
            external_id=data["external_id"],
        )


class LiteratureClient(Protocol):
    def search(self, query: str, limit: int) -> list[LiteratureResult]:
        ...


def literature_query_key(query: str) -> str:
    return hashlib.sha256(query.strip().lower().encode()).hexdigest()[:16]


class FixtureLiteratureStore:
    """Offline replay of recorded scholarly-search responses.

    One JSON file per query, named by the query digest, each holding a
    list of result records.
    """

    def __init__(self, directory: str):
        self.directory = directory

    def path_for(self, query: str) -> str:
        return os.path.join(self.directory, literature_query_key(query) + ".json")

    def save(self, query: str, results: Sequence[LiteratureResult]) -> str:
        path = self.path_for(query)
        os.makedirs(self.directory, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump([r.to_dict() for r in results], fh, indent=2, sort_keys=True)
        return path

    def search(self, query: str, limit: int) -> list[LiteratureResult]:
        path = self.path_for(query)
        if not os.path.exists(path):
            raise GatewayError(f"no recorded literature fixture for query {query!r}")
        with open(path, encoding="utf-8") as fh:
            records = json.load(fh)
        return [LiteratureResult.from_dict(r) for r in records[:limit]]


class SynthesizedLiteratureClient:
    """Deterministic offline stand-in when no fixture store is configured."""

    def search(self, query: str, limit: int) -> list[LiteratureResult]:
        results = []
        for index in range(min(limit, 5)):
            key = hashlib.sha256(f"{query}|{index}".encode()).hexdigest()
            results.append(
                LiteratureResult(
                    title=f"A study of {query} ({key[:6]})",
                    year=2018 + index,
                    venue="Synthetic Proceedings",
                    snippet=(
                        f"This work examines {query} and reports findings "
                        f"indexed by {key[:10]}."
                    ),
                    external_id=key[:20],
                )
            )
        return results


class HttpLiteratureClient:
    """Client for a public scholarly-search HTTP API."""

    def __init__(self, base_url: str, credential_env: Optional[str] = None, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.credential_env = credential_env
        self.timeout = timeout

    def search(self, query: str, limit: int) -> list[LiteratureResult]:
        headers = {}
        if self.credential_env and os.environ.get(self.credential_env):
            headers["x-api-key"] = os.environ[self.credential_env]
        try:
            response = requests.get(
                f"{self.base_url}/paper/search",
                params={
                    "query": query,
                    "limit": limit,
                    "fields": "title,year,venue,abstract,externalIds",
                },
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransientBackendError(f"literature search failed: {exc}") from exc
        if response.status_code == 429:
            raise RateLimited("literature API rate limit")
        if response.status_code >= 500:
            raise TransientBackendError(f"literature API {response.status_code}")
        if response.status_code != 200:
            raise GatewayError(f"literature API {response.status_code}: {response.text[:200]}")
        payload = response.json()
        results = []
        for item in payload.get("data", [])[:limit]:
            results.append(
                LiteratureResult(
                    title=item.get("title") or "",
                    year=item.get("year") or 0,
                    venue=item.get("venue") or "",
                    snippet=(item.get("abstract") or "")[:400],
                    external_id=str(
                        item.get("paperId")
                        or (item.get("externalIds") or {}).get("DOI")
                        or ""
                    ),
                )
            )
        return results


# --- HTTP chat backend --------------------------------------------------------


class HttpBackend:
    """Chat-completion backend with a configurable base URL."""

    def __init__(self, base_url: str, credential_env: str = "", timeout: float = 120.0):
        self.base_url = base_url.rstrip("/")
        self.credential_env = credential_env
        self.timeout = timeout
        self.name = "http"

    def _encode_message(self, message: ModelMessage) -> dict:
        if not message.images:
            return {"role": "user", "content": message.text}
        import base64

        content: list[dict] = [{"type": "text", "text": message.text}]
        for image in message.images:
            encoded = base64.b64encode(image).decode()
            content.append(
                {
                    "type": "image_url",
                    "image_url": {"url": f"data:image/png;base64,{encoded}"},
                }
            )
        return {"role": "user", "content": content}

    def complete(self, request: ModelRequest, config: ModelRoleConfig) -> ModelResponse:
        headers = {"Content-Type": "application/json"}
        if self.credential_env and os.environ.get(self.credential_env):
            headers["Authorization"] = f"Bearer {os.environ[self.credential_env]}"
        body = {
            "model": config.model_id,
            "messages": [self._encode_message(m) for m in request.messages],
            "temperature": config.temperature,
            "max_tokens": config.max_tokens,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        try:
            response = requests.post(
                f"{self.base_url}/chat/completions",
                json=body,
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransientBackendError(f"backend unreachable: {exc}") from exc
        if response.status_code == 429:
            raise RateLimited("backend rate limit")
        if response.status_code >= 500:
            raise TransientBackendError(f"backend error {response.status_code}")
        if response.status_code != 200:
            raise GatewayError(f"backend {response.status_code}: {response.text[:200]}")
        payload = response.json()
        try:
            text = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError) as exc:
            raise GatewayError(f"malformed backend response: {exc}") from exc
        usage = payload.get("usage", {})
        return ModelResponse(
            text=text,
            usage=Usage(
                prompt_tokens=usage.get("prompt_tokens", 0),
                completion_tokens=usage.get("completion_tokens", 0),
            ),
            backend=config.model_id,
        )


# --- the gateway ---------------------------------------------------------------


@dataclass
class GatewaySettings:
    retry_attempts: int = 3
    backoff_seconds: float = 1.0
    max_in_flight: int = 8
    rate_per_second: Optional[float] = None


class ModelGateway:
    """Thread-safe handle shared by every agent in a run."""

    def __init__(
        self,
        backend: Backend,
        role_configs: Optional[dict[ModelRole, ModelRoleConfig]] = None,
        literature: Optional[LiteratureClient] = None,
        settings: Optional[GatewaySettings] = None,
    ):
        self.backend = backend
        self.role_configs = role_configs or default_role_configs()
        self.literature = literature or SynthesizedLiteratureClient()
        self.settings = settings or GatewaySettings()
        self._in_flight = threading.BoundedSemaphore(self.settings.max_in_flight)
        self._bucket = (
            TokenBucket(self.settings.rate_per_second)
            if self.settings.rate_per_second
            else None
        )

    def config_for(self, role: ModelRole) -> ModelRoleConfig:
        try:
            return self.role_configs[role]
        except KeyError:
            raise GatewayError(f"no configuration for role {role.value}") from None

    def complete(
        self, request: ModelRequest, config: Optional[ModelRoleConfig] = None
    ) -> ModelResponse:
        config = config or self.config_for(request.role)
        if request.has_images() and request.role not in IMAGE_ROLES:
            raise ImageNotAllowed(
                f"role {request.role.value} does not accept image attachments"
            )
        attempts = self.settings.retry_attempts
        last_error: Optional[Exception] = None
        with self._in_flight:
            for attempt in range(1, attempts + 1):
                if self._bucket is not None:
                    self._bucket.acquire()
                try:
                    return self.backend.complete(request, config)
                except (TransientBackendError, RateLimited) as exc:
                    last_error = exc
                    if attempt < attempts:
                        delay = self.settings.backoff_seconds * (2 ** (attempt - 1))
                        logger.warning(
                            "backend attempt %d/%d failed (%s); retrying in %.2fs",
                            attempt,
                            attempts,
                            exc,
                            delay,
                        )
                        time.sleep(delay)
        raise GatewayError(
            f"backend failed after {attempts} attempts: {last_error}"
        ) from last_error

    def ask(self, role: ModelRole, text: str, seed: Optional[int] = None) -> str:
        """Single-message convenience wrapper returning the raw text."""
        request = ModelRequest(role=role, messages=[ModelMessage(text=text)], seed=seed)
        return self.complete(request).text

    # --- structured image review -------------------------------------------

    def review_image(
        self,
        image: bytes,
        caption: str,
        figrefs: Sequence[str],
        abstract: str = "",
        seed: Optional[int] = None,
    ) -> dict[str, str]:
        """Review one figure; returns the four-field structured review."""
        prompt = render(
            "vlm_image_review",
            abstract=abstract or "(no abstract available)",
            caption=caption or "(no caption)",
            figrefs="\n".join(figrefs) if figrefs else "(none)",
        )
        request = ModelRequest(
            role=ModelRole.VLM_FEEDBACK,
            messages=[ModelMessage(text=prompt, images=[image])],
            seed=seed,
        )
        response = self.complete(request)
        review = _parse_review_json(response.text)
        if review is not None:
            return review
        retry_prompt = (
            prompt
            + "\n\nYour previous reply could not be parsed. Respond again with a "
            "valid REVIEW JSON block containing all four fields."
        )
        retry_request = ModelRequest(
            role=ModelRole.VLM_FEEDBACK,
            messages=[ModelMessage(text=retry_prompt, images=[image])],
            seed=seed,
        )
        response = self.complete(retry_request)
        review = _parse_review_json(response.text)
        if review is None:
            raise MalformedReview("image review had no parseable review JSON")
        return review

    # --- literature search ---------------------------------------------------

    def search_literature(self, query: str, limit: int) -> list[LiteratureResult]:
        if not query.strip():
            raise ValueError("literature query must be nonempty")
        if limit <= 0:
            return []
        attempts = self.settings.retry_attempts
        last_error: Optional[Exception] = None
        for attempt in range(1, attempts + 1):
            try:
                return self.literature.search(query, limit)
            except (TransientBackendError, RateLimited) as exc:
                last_error = exc
                if attempt < attempts:
                    time.sleep(self.settings.backoff_seconds * (2 ** (attempt - 1)))
        raise GatewayError(
            f"literature search failed after {attempts} attempts: {last_error}"
        ) from last_error


def _parse_review_json(text: str) -> Optional[dict[str, str]]:
    blocks = extract_fenced_blocks(text, "json")
    if not blocks:
        return None
    try:
        data = json.loads(blocks[-1])
    except json.JSONDecodeError:
        return None
    if not isinstance(data, dict):
        return None
    review = {key: data.get(key) for key in REVIEW_JSON_KEYS}
    if any(not isinstance(v, str) or not v.strip() for v in review.values()):
        return None
    return review  # type: ignore[return-value]
