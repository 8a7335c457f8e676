"""Model access: embeddings, abstraction summaries and role-tagged chat calls.

Two families of backend live here. The offline family (``HashingEmbedder``,
``TruncatingSummarizer`` and the rule-driven chat stub in :mod:`.stubs`) is
deterministic and needs no network. ``RemoteBackend`` talks to any server
exposing an OpenAI-style ``/chat/completions`` and ``/embeddings`` API.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Protocol

import httpx
import numpy as np

from .errors import (
    BackendError,
    BackendHTTPError,
    BackendTimeout,
    InvalidInputError,
    MalformedReplyError,
)

logger = logging.getLogger(__name__)


class ModelRole(str, Enum):
    PLANNER = "planner"
    NAVIGATOR = "navigator"
    RETRIEVER = "retriever"
    VERIFIER = "verifier"
    REASONER = "reasoner"
    SUMMARIZER = "summarizer"
    EMBEDDER = "embedder"

    @property
    def is_large(self) -> bool:
        return self is ModelRole.REASONER


@dataclass(frozen=True)
class ChatRequest:
    role: ModelRole
    user: str
    system: Optional[str] = None
    temperature: float = 0.0

    def messages(self) -> list[dict[str, str]]:
        msgs = []
        if self.system:
            msgs.append({"role": "system", "content": self.system})
        msgs.append({"role": "user", "content": self.user})
        return msgs


@dataclass(frozen=True)
class ChatReply:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise InvalidInputError("token counts must be non-negative")


def count_tokens(text: str) -> int:
    return len(text.split())


class ChatBackend(Protocol):
    def chat(self, request: ChatRequest) -> ChatReply: ...


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


class Summarizer(Protocol):
    def summarize(self, children: list[str], level: str) -> str: ...


def normalize(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        return vec.astype(np.float32)
    return (vec / norm).astype(np.float32)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


class HashingEmbedder:
    """Character-trigram feature hashing into a fixed number of buckets.

    Counts are non-negative, so cosine similarity between any two outputs
    lies in [0, 1] and shared trigrams always raise it.
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        if dim < 1:
            raise InvalidInputError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self._key = seed.to_bytes(8, "little", signed=True)
        self._buckets: dict[str, int] = {}

    def _bucket(self, gram: str) -> int:
        idx = self._buckets.get(gram)
        if idx is None:
            digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=self._key).digest()
            idx = int.from_bytes(digest, "little") % self.dim
            self._buckets[gram] = idx
        return idx

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise InvalidInputError("cannot embed empty text")
        padded = " " + " ".join(text.lower().split()) + " "
        vec = np.zeros(self.dim, dtype=np.float64)
        for i in range(len(padded) - 2):
            vec[self._bucket(padded[i:i + 3])] += 1.0
        return normalize(vec)


_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")
_LEVEL_TAG = re.compile(r"^\[(mid|high|root)\]\s*")
LEVELS = ("mid", "high", "root")


def first_sentence(text: str) -> str:
    text = " ".join(text.split())
    return _SENTENCE_END.split(text, maxsplit=1)[0] if text else ""


class TruncatingSummarizer:
    """Offline abstraction: level tag plus each child's leading sentence, capped."""

    def __init__(self, cap: int = 512):
        if cap < 16:
            raise InvalidInputError("summary cap too small")
        self.cap = cap

    def summarize(self, children: list[str], level: str) -> str:
        if not children:
            raise InvalidInputError("summarize needs at least one child")
        if level not in LEVELS:
            raise InvalidInputError(f"unknown abstraction level {level!r}")
        leads = []
        for child in children:
            lead = first_sentence(_LEVEL_TAG.sub("", child.strip()))
            if lead and lead not in leads:
                leads.append(lead)
        text = f"[{level}] " + " ".join(leads)
        return text[: self.cap].rstrip()


SUMMARY_PROMPT = (
    "Write a concise {kind} abstraction of the passages below. Keep the named "
    "entities and relations needed to route questions to them. At most {cap} characters.\n\n"
    "{children}\n\nAbstraction:"
)
_KIND = {"mid": "entity-relation", "high": "topic-level", "root": "corpus-level"}


class ChatSummarizer:
    """Abstractions generated by a small chat model."""

    def __init__(self, backend: ChatBackend, cap: int = 512):
        self.backend = backend
        self.cap = cap

    def summarize(self, children: list[str], level: str) -> str:
        if not children:
            raise InvalidInputError("summarize needs at least one child")
        body = "\n".join(f"- {' '.join(c.split())}" for c in children)
        prompt = SUMMARY_PROMPT.format(kind=_KIND.get(level, level), cap=self.cap, children=body)
        reply = self.backend.chat(ChatRequest(ModelRole.SUMMARIZER, prompt))
        text = reply.text.strip()[: self.cap].rstrip()
        if not text:
            raise MalformedReplyError("summarizer returned empty text")
        return text


@dataclass
class RemoteConfig:
    base_url: str = "http://localhost:8000/v1"
    models: dict[str, str] = field(default_factory=dict)
    default_model: str = "default"
    api_key_env: str = "STATEFULRAG_API_KEY"
    timeout_s: float = 60.0
    retries: int = 2
    backoff_s: float = 0.5

    def model_for(self, role: ModelRole) -> str:
        return self.models.get(role.value, self.default_model)


class RemoteBackend:
    """Client for an OpenAI-style HTTP serving endpoint.

    Request body for chat::

        {"model": ..., "messages": [{"role": "system"|"user", "content": ...}],
         "temperature": 0.0}

    The reply must carry ``choices[0].message.content`` and ``usage`` with
    ``prompt_tokens`` / ``completion_tokens``. Embeddings post
    ``{"model": ..., "input": text}`` and read ``data[0].embedding``.
    """

    def __init__(self, config: RemoteConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(config.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(
            base_url=config.base_url, headers=headers, timeout=config.timeout_s, transport=transport
        )
        self.dim = 0

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, payload: dict) -> dict:
        attempts = 0
        last: BackendError | None = None
        while attempts <= self.config.retries:
            attempts += 1
            try:
                resp = self._client.post(path, json=payload)
            except httpx.TimeoutException as exc:
                last = BackendTimeout(f"timeout calling {path}: {exc}", attempts, retryable=True)
            except httpx.TransportError as exc:
                last = BackendError(f"transport failure calling {path}: {exc}", attempts, retryable=True)
            else:
                if resp.status_code >= 400:
                    retryable = resp.status_code == 429 or resp.status_code >= 500
                    last = BackendHTTPError(
                        f"HTTP {resp.status_code} from {path}", resp.status_code, attempts, retryable
                    )
                    if not retryable:
                        raise last
                else:
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise MalformedReplyError(f"non-JSON reply from {path}", attempts) from exc
            logger.warning("remote call failed (attempt %d): %s", attempts, last)
            if attempts <= self.config.retries and self.config.backoff_s > 0:
                time.sleep(self.config.backoff_s * attempts)
        assert last is not None
        last.attempts = attempts
        raise last

    def chat(self, request: ChatRequest) -> ChatReply:
        payload = {
            "model": self.config.model_for(request.role),
            "messages": request.messages(),
            "temperature": request.temperature,
        }
        data = self._post("/chat/completions", payload)
        try:
            text = data["choices"][0]["message"]["content"]
            usage = data.get("usage") or {}
            prompt_tokens = int(usage.get("prompt_tokens", 0))
            completion_tokens = int(usage.get("completion_tokens", 0))
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise MalformedReplyError(f"unexpected chat reply shape: {exc!r}") from exc
        if not isinstance(text, str):
            raise MalformedReplyError("chat reply content is not text")
        return ChatReply(text, prompt_tokens, completion_tokens)

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise InvalidInputError("cannot embed empty text")
        data = self._post("/embeddings", {"model": self.config.model_for(ModelRole.EMBEDDER), "input": text})
        try:
            vec = np.asarray(data["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise MalformedReplyError(f"unexpected embedding reply shape: {exc!r}") from exc
        if vec.ndim != 1 or vec.size == 0:
            raise MalformedReplyError("embedding is not a non-empty vector")
        if self.dim and vec.size != self.dim:
            raise MalformedReplyError(f"embedding dimension changed from {self.dim} to {vec.size}")
        self.dim = vec.size
        return normalize(vec)


@dataclass
class Backends:
    """The model services one pipeline instance uses.

    ``small`` serves planner/navigator/retriever/verifier (and rewrites);
    ``large`` serves only the reasoner.
    """

    small: ChatBackend
    large: ChatBackend
    embedder: Embedder
    summarizer: Summarizer

    def chat(self, request: ChatRequest) -> ChatReply:
        backend = self.large if request.role.is_large else self.small
        return backend.chat(request)
