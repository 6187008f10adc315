"""Text generation and text embedding clients, plus the transcript cache.

Only :class:`ScriptedClient` and :class:`HashEmbedder` are used in tests;
:class:`ChatCompletionClient` talks to an OpenAI-compatible endpoint.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Protocol

import numpy as np

from .errors import CacheError, DegenerateInputError, FixtureError, FormatError, TransportError

log = logging.getLogger(__name__)

API_KEY_ENV = "JOINTGUIDE_API_KEY"


@dataclass
class DialogueTranscript:
    class_index: int
    class_name: str
    epoch: int
    client_id: str
    turns: list[tuple[str, str]] = field(default_factory=list)

    @property
    def next_step(self) -> int:
        return len(self.turns) + 1

    def extended(self, prompt: str, response: str) -> "DialogueTranscript":
        return DialogueTranscript(self.class_index, self.class_name, self.epoch,
                                  self.client_id, [*self.turns, (prompt, response)])


class CompletionClient(Protocol):
    identity: str
    supports_history: bool

    def complete(self, history: DialogueTranscript, prompt: str) -> str:  # pragma: no cover - interface
        ...


class TextEmbedder(Protocol):
    identity: str
    dim: int

    def embed(self, text: str) -> np.ndarray:  # pragma: no cover - interface
        ...


class ScriptedClient:
    """Replays responses keyed by (class name, step) from a fixture script.

    The step of a prompt is its 1-based position in the dialogue, so the
    context-aware question that follows a five-step chain is step 6.
    """

    supports_history = True

    def __init__(self, responses: dict[str, dict[int, str]], identity: str = "scripted"):
        self.responses = responses
        self.identity = identity

    @classmethod
    def from_file(cls, path) -> "ScriptedClient":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("version") != 1:
            raise FormatError(f"{path}: unsupported script version {doc.get('version')!r}")
        responses = {
            name: {int(step): text for step, text in steps.items()}
            for name, steps in doc["responses"].items()
        }
        return cls(responses, identity=doc.get("client", "scripted"))

    @classmethod
    def default(cls) -> "ScriptedClient":
        from importlib.resources import as_file, files

        with as_file(files("jointguide.resources").joinpath("desk_script.json")) as p:
            return cls.from_file(p)

    def complete(self, history: DialogueTranscript, prompt: str) -> str:
        if not prompt.strip():
            raise ValueError("prompt must be nonempty")
        key = (history.class_name, history.next_step)
        try:
            return self.responses[key[0]][key[1]]
        except KeyError:
            raise FixtureError(f"scripted client has no response for {key!r}") from None


class TokenBucket:
    """Blocking rate limiter: ``rate`` tokens per second, burst ``capacity``."""

    def __init__(self, rate: float = 1.0, capacity: float = 1.0,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.rate = rate
        self.capacity = capacity
        self._tokens = capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self):
        with self._lock:
            while True:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                self._sleep((1.0 - self._tokens) / self.rate)


class ChatCompletionClient:
    """OpenAI-compatible chat completions over HTTP.

    The API key is read from ``$JOINTGUIDE_API_KEY`` and is never logged.
    """

    supports_history = True

    def __init__(self, model: str = "gpt-4o", endpoint: str = "https://api.openai.com/v1",
                 timeout: float = 60.0, max_attempts: int = 4, backoff: float = 1.0,
                 limiter: TokenBucket | None = None, opener=None, sleep=time.sleep):
        self.model = model
        self.endpoint = endpoint.rstrip("/")
        self.identity = f"chat:{model}"
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.limiter = limiter or TokenBucket()
        self._open = opener or urllib.request.urlopen
        self._sleep = sleep

    def _messages(self, history: DialogueTranscript, prompt: str) -> list[dict]:
        msgs = []
        for q, a in history.turns:
            msgs.append({"role": "user", "content": q})
            msgs.append({"role": "assistant", "content": a})
        msgs.append({"role": "user", "content": prompt})
        return msgs

    def complete(self, history: DialogueTranscript, prompt: str) -> str:
        if not prompt.strip():
            raise ValueError("prompt must be nonempty")
        key = os.environ.get(API_KEY_ENV)
        if not key:
            raise TransportError(f"${API_KEY_ENV} is not set", attempts=0)
        body = json.dumps({"model": self.model, "messages": self._messages(history, prompt),
                           "temperature": 0}).encode()
        last = None
        for attempt in range(1, self.max_attempts + 1):
            self.limiter.acquire()
            req = urllib.request.Request(
                f"{self.endpoint}/chat/completions", data=body, method="POST",
                headers={"Content-Type": "application/json", "Authorization": f"Bearer {key}"},
            )
            try:
                with self._open(req, timeout=self.timeout) as resp:
                    doc = json.loads(resp.read().decode("utf-8"))
                text = doc["choices"][0]["message"]["content"]
                if text and text.strip():
                    return text
                last = "empty completion"
            except (urllib.error.URLError, TimeoutError, OSError, KeyError, ValueError) as exc:
                last = f"{type(exc).__name__}: {exc}"
            log.warning("completion attempt %d/%d failed: %s", attempt, self.max_attempts, last)
            if attempt < self.max_attempts:
                self._sleep(self.backoff * 2 ** (attempt - 1))
        raise TransportError(f"completion failed: {last}", attempts=self.max_attempts)


_TOKEN = re.compile(r"[a-z0-9]+")


class HashEmbedder:
    """Signed bag-of-tokens hashed into ``dim`` buckets, L2-normalized."""

    def __init__(self, dim: int = 64):
        self.dim = dim
        self.identity = f"hash-bow:{dim}"

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        vec = np.zeros(self.dim)
        for tok in _TOKEN.findall(text.lower()):
            h = int.from_bytes(hashlib.blake2b(tok.encode(), digest_size=8).digest(), "little")
            vec[h % self.dim] += 1.0 if (h >> 32) & 1 else -1.0
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise DegenerateInputError(f"text {text[:40]!r} hashes to the zero vector")
        return vec / norm


class CacheKey(NamedTuple):
    client_id: str
    class_index: int
    epoch: int
    step: int
    prompt_digest: str

    @classmethod
    def for_prompt(cls, client_id, class_index, epoch, step, prompt: str) -> "CacheKey":
        return cls(client_id, int(class_index), int(epoch), int(step),
                   hashlib.sha256(prompt.encode("utf-8")).hexdigest())


class TranscriptCache:
    """Append-only response cache, one record per line::

        v1 <TAB> client <TAB> class <TAB> epoch <TAB> step <TAB> sha256(prompt) <TAB> nbytes <TAB> json-string

    ``nbytes`` is the UTF-8 length of the JSON payload, so truncated or
    edited records are detected and reported by line number.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._records: dict[CacheKey, str] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self):
        with open(self.path, encoding="utf-8", newline="\n") as fh:
            for n, line in enumerate(fh, start=1):
                if not line.endswith("\n"):
                    raise CacheError("record is not newline-terminated (truncated file?)", n)
                parts = line[:-1].split("\t", 7)
                if len(parts) != 8 or parts[0] != "v1":
                    raise CacheError("malformed record", n)
                try:
                    key = CacheKey(parts[1], int(parts[2]), int(parts[3]), int(parts[4]), parts[5])
                    nbytes = int(parts[6])
                except ValueError:
                    raise CacheError("non-integer key field", n) from None
                payload = parts[7]
                if len(payload.encode("utf-8")) != nbytes:
                    raise CacheError(f"payload length {len(payload.encode())} != declared {nbytes}", n)
                try:
                    response = json.loads(payload)
                except json.JSONDecodeError:
                    raise CacheError("payload is not a JSON string", n) from None
                if not isinstance(response, str):
                    raise CacheError("payload is not a JSON string", n)
                self._records[key] = response

    def lookup(self, key: CacheKey) -> str | None:
        return self._records.get(key)

    def store(self, key: CacheKey, response: str):
        if any(ch in key.client_id for ch in "\t\n"):
            raise ValueError("client id may not contain tabs or newlines")
        with self._lock:
            if key in self._records:
                return
            self._records[key] = response
            if self.path is not None:
                payload = json.dumps(response, ensure_ascii=False)
                line = "\t".join([
                    "v1", key.client_id, str(key.class_index), str(key.epoch), str(key.step),
                    key.prompt_digest, str(len(payload.encode("utf-8"))), payload,
                ])
                with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                    fh.write(line + "\n")

    def __len__(self):
        return len(self._records)


def complete_cached(client: CompletionClient, history: DialogueTranscript, prompt: str,
                    cache: TranscriptCache | None = None) -> str:
    """``client.complete`` with an optional cache in front of it."""
    if cache is None:
        return client.complete(history, prompt)
    key = CacheKey.for_prompt(client.identity, history.class_index, history.epoch,
                              history.next_step, prompt)
    hit = cache.lookup(key)
    if hit is not None:
        return hit
    response = client.complete(history, prompt)
    if not response.strip():
        raise TransportError("client returned an empty response", attempts=1)
    cache.store(key, response)
    return response
