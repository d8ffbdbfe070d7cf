"""Provider clients for chat, embedding, rerank scoring, and token logprobs.

Each remote call is wrapped in a ProviderExchange: failures are recorded, never
raised past the exchange, so that downstream aggregation can count request
success per trial. Deterministic stub providers mirror every interface for
offline runs and tests; stubs are pure functions of (seed, input).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
from collections import Counter
from dataclasses import dataclass, field

import requests

from .textproc import count_tokens


class ProviderError(RuntimeError):
    """Raised only for precondition/capability violations, not transport failures."""


class CapabilityError(ProviderError):
    """The endpoint cannot serve the requested operation (e.g. no logprobs)."""


@dataclass(frozen=True)
class EndpointConfig:
    """Where and how to reach an OpenAI-compatible service.

    The API key is read from the environment variable named by api_key_env and
    is never written into reports or exchange records.
    """

    base_url: str = ""
    api_key_env: str = "OPENAI_API_KEY"
    model: str = ""
    timeout_s: float = 60.0
    max_attempts: int = 3
    backoff_s: float = 0.5
    concurrency: int = 4
    cache_enabled: bool = False

    def api_key(self) -> str:
        return os.environ.get(self.api_key_env, "")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    context_window: int = 4096

    def __post_init__(self):
        for role, _ in self.messages:
            if role not in ("system", "user", "assistant"):
                raise ProviderError(f"invalid message role {role!r}")
        if self.temperature < 0:
            raise ProviderError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ProviderError("max_tokens must be positive")
        prompt_tokens = sum(count_tokens(text) for _, text in self.messages)
        if prompt_tokens + self.max_tokens > self.context_window:
            raise ProviderError(
                f"prompt ({prompt_tokens} tokens) + max_tokens ({self.max_tokens}) "
                f"exceeds context window of {self.context_window}"
            )

    def prompt_tokens(self) -> int:
        return sum(count_tokens(text) for _, text in self.messages)


def user_request(text: str, **kwargs) -> ChatRequest:
    return ChatRequest(messages=(("user", text),), **kwargs)


@dataclass
class ProviderExchange:
    """One request/response against a provider, success flag included."""

    kind: str  # chat | embed | rerank | logprob
    request_summary: str
    response_text: str = ""
    error: str = ""
    success: bool = True
    latency_s: float = 0.0
    prompt_tokens: int = 0
    response_tokens: int = 0
    attempts: int = 1

    def __post_init__(self):
        if not self.success and not self.error:
            raise ValueError("failed exchange must carry an error")


class ExchangeLedger:
    """Append-only record of exchanges; safe for concurrent writers."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: list[ProviderExchange] = []

    def append(self, exchange: ProviderExchange) -> None:
        with self._lock:
            self._entries.append(exchange)

    def entries(self) -> list[ProviderExchange]:
        with self._lock:
            return list(self._entries)

    def success_count(self) -> int:
        with self._lock:
            return sum(1 for e in self._entries if e.success)


@dataclass
class EvalRunStats:
    """Per-trial success accounting consumed by the judge-metric aggregation."""

    e_no: int
    e_sp: int
    per_trial_success: list[int] = field(default_factory=list)

    def record_trial(self, successes: int) -> None:
        if not 0 <= successes <= self.e_sp:
            raise ValueError(f"successes {successes} outside [0, {self.e_sp}]")
        self.per_trial_success.append(successes)


class ResponseCache:
    """Opt-in response cache keyed by (endpoint, request hash); optional JSON file."""

    def __init__(self, path=None):
        self._path = path
        self._data: dict[str, str] = {}
        self._lock = threading.Lock()
        if path is not None and os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                self._data = json.load(fh)

    @staticmethod
    def key(endpoint: EndpointConfig, payload: dict) -> str:
        raw = json.dumps(
            {"base": endpoint.base_url, "model": endpoint.model, "payload": payload},
            sort_keys=True,
        )
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()

    def get(self, key: str) -> str | None:
        with self._lock:
            return self._data.get(key)

    def put(self, key: str, value: str) -> None:
        with self._lock:
            self._data[key] = value
            if self._path is not None:
                tmp = f"{self._path}.tmp"
                with open(tmp, "w", encoding="utf-8") as fh:
                    json.dump(self._data, fh, ensure_ascii=False, sort_keys=True)
                os.replace(tmp, self._path)


def _post_with_retries(endpoint: EndpointConfig, url: str, payload: dict):
    """POST with bounded retries/backoff. Returns (json, attempts) or raises the last error."""
    last_exc: Exception | None = None
    for attempt in range(1, endpoint.max_attempts + 1):
        try:
            headers = {"Content-Type": "application/json"}
            key = endpoint.api_key()
            if key:
                headers["Authorization"] = f"Bearer {key}"
            resp = requests.post(url, json=payload, headers=headers, timeout=endpoint.timeout_s)
            resp.raise_for_status()
            return resp.json(), attempt
        except Exception as exc:  # noqa: BLE001 - every failure becomes a ledger entry
            last_exc = exc
            if attempt < endpoint.max_attempts:
                time.sleep(endpoint.backoff_s * (2 ** (attempt - 1)))
    raise RuntimeError(f"request failed after {endpoint.max_attempts} attempts: {last_exc}")


class HttpChatProvider:
    """Chat completion against the common chat-completions JSON shape."""

    def __init__(self, endpoint: EndpointConfig, ledger: ExchangeLedger | None = None,
                 cache: ResponseCache | None = None):
        self.endpoint = endpoint
        self.ledger = ledger if ledger is not None else ExchangeLedger()
        self.cache = cache if endpoint.cache_enabled else None

    def complete(self, req: ChatRequest) -> ProviderExchange:
        payload = {
            "model": self.endpoint.model,
            "messages": [{"role": r, "content": t} for r, t in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        summary = req.messages[-1][1][:200] if req.messages else ""
        cache_key = ResponseCache.key(self.endpoint, payload) if self.cache else None
        if self.cache is not None:
            hit = self.cache.get(cache_key)
            if hit is not None:
                ex = ProviderExchange(
                    kind="chat", request_summary=summary, response_text=hit,
                    prompt_tokens=req.prompt_tokens(), response_tokens=count_tokens(hit),
                )
                self.ledger.append(ex)
                return ex
        start = time.monotonic()
        try:
            body, attempts = _post_with_retries(
                self.endpoint, f"{self.endpoint.base_url.rstrip('/')}/chat/completions", payload
            )
            text = body["choices"][0]["message"]["content"]
            if not text:
                raise RuntimeError("empty completion")
            ex = ProviderExchange(
                kind="chat", request_summary=summary, response_text=text,
                latency_s=time.monotonic() - start,
                prompt_tokens=req.prompt_tokens(), response_tokens=count_tokens(text),
                attempts=attempts,
            )
        except Exception as exc:  # noqa: BLE001
            ex = ProviderExchange(
                kind="chat", request_summary=summary, error=str(exc), success=False,
                latency_s=time.monotonic() - start,
                prompt_tokens=req.prompt_tokens(), attempts=self.endpoint.max_attempts,
            )
        self.ledger.append(ex)
        if ex.success and self.cache is not None:
            self.cache.put(cache_key, ex.response_text)
        return ex


class HttpEmbeddingProvider:
    def __init__(self, endpoint: EndpointConfig, ledger: ExchangeLedger | None = None):
        self.endpoint = endpoint
        self.ledger = ledger if ledger is not None else ExchangeLedger()

    def embed(self, texts: list[str]) -> list[list[float]]:
        if not texts:
            raise ProviderError("embed() requires at least one text")
        payload = {"model": self.endpoint.model, "input": texts}
        start = time.monotonic()
        body, attempts = _post_with_retries(
            self.endpoint, f"{self.endpoint.base_url.rstrip('/')}/embeddings", payload
        )
        vectors = [row["embedding"] for row in body["data"]]
        dims = {len(v) for v in vectors}
        if len(dims) != 1:
            raise ProviderError(f"inconsistent embedding dimensions {sorted(dims)}")
        self.ledger.append(
            ProviderExchange(
                kind="embed", request_summary=f"{len(texts)} texts",
                response_text=f"{len(vectors)} vectors",
                latency_s=time.monotonic() - start, attempts=attempts,
            )
        )
        return vectors


class StubChatProvider:
    """Deterministic chat stub.

    ``reply`` may be a fixed string, a list consumed in order, or a callable
    over the message list. ``fail_first`` makes the first N calls fail the way
    a flaky endpoint would (counted attempts, success=False).
    """

    def __init__(self, reply="OK", fail_first: int = 0, fail_always: bool = False,
                 ledger: ExchangeLedger | None = None, max_attempts: int = 3):
        self._reply = reply
        self._fail_first = fail_first
        self._fail_always = fail_always
        self._lock = threading.Lock()
        self._calls = 0
        self.ledger = ledger if ledger is not None else ExchangeLedger()
        self.max_attempts = max_attempts

    @property
    def calls(self) -> int:
        return self._calls

    def _next_text(self, messages) -> str:
        if callable(self._reply):
            return self._reply(messages)
        if isinstance(self._reply, (list, tuple)):
            return self._reply[min(self._calls - 1, len(self._reply) - 1)]
        return self._reply

    def complete(self, req: ChatRequest) -> ProviderExchange:
        with self._lock:
            self._calls += 1
            call_no = self._calls
        summary = req.messages[-1][1][:200] if req.messages else ""
        if self._fail_always or call_no <= self._fail_first:
            ex = ProviderExchange(
                kind="chat", request_summary=summary, error="stub failure",
                success=False, attempts=self.max_attempts,
                prompt_tokens=req.prompt_tokens(),
            )
        else:
            text = self._next_text([{"role": r, "content": t} for r, t in req.messages])
            ex = ProviderExchange(
                kind="chat", request_summary=summary, response_text=text,
                prompt_tokens=req.prompt_tokens(), response_tokens=count_tokens(text),
            )
        self.ledger.append(ex)
        return ex


class StubEmbeddingProvider:
    """Seeded hash projection of character 3-grams, unit-normalized.

    Pure function of (seed, text): identical inputs give identical vectors in
    any process, with no dependence on interpreter hash randomization.
    """

    def __init__(self, dim: int = 768, seed: int = 0, ledger: ExchangeLedger | None = None):
        if dim <= 0:
            raise ProviderError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self.ledger = ledger if ledger is not None else ExchangeLedger()

    def _embed_one(self, text: str) -> list[float]:
        padded = f" {text} "
        acc = [0.0] * self.dim
        for i in range(len(padded) - 2):
            gram = padded[i : i + 3]
            digest = hashlib.blake2b(
                f"{self.seed}:{gram}".encode("utf-8"), digest_size=8
            ).digest()
            value = int.from_bytes(digest, "little")
            idx = value % self.dim
            sign = 1.0 if (value >> 32) & 1 else -1.0
            acc[idx] += sign
        norm = math.sqrt(sum(x * x for x in acc))
        if norm == 0.0:
            acc[0] = 1.0
            norm = 1.0
        return [x / norm for x in acc]

    def embed(self, texts: list[str]) -> list[list[float]]:
        if not texts:
            raise ProviderError("embed() requires at least one text")
        vectors = [self._embed_one(t) for t in texts]
        self.ledger.append(
            ProviderExchange(kind="embed", request_summary=f"{len(texts)} texts",
                             response_text=f"{len(vectors)} vectors")
        )
        return vectors


class OracleRerankProvider:
    """Scores 1.0 for passages whose doc_id is in the injected golden set, else 0.0."""

    def __init__(self, golden_ids: set[str]):
        self.golden_ids = set(golden_ids)

    def score_nodes(self, query: str, nodes) -> list[float]:
        if not nodes:
            raise ProviderError("rerank requires at least one passage")
        return [1.0 if node.doc_id in self.golden_ids else 0.0 for node in nodes]


class StubRerankProvider:
    """Deterministic lexical-overlap scorer; a stand-in for a cross-encoder."""

    def __init__(self, fail_always: bool = False):
        self.fail_always = fail_always

    def score_nodes(self, query: str, nodes) -> list[float]:
        if not nodes:
            raise ProviderError("rerank requires at least one passage")
        if self.fail_always:
            raise RuntimeError("stub rerank outage")
        q_terms = set(query.lower().split())
        scores = []
        for node in nodes:
            terms = set(node.text.lower().split())
            scores.append(len(q_terms & terms) / max(len(q_terms), 1))
        return scores


class HttpRerankProvider:
    """Cross-encoder scoring over a rerank endpoint; one finite score per passage."""

    def __init__(self, endpoint: EndpointConfig, ledger: ExchangeLedger | None = None):
        self.endpoint = endpoint
        self.ledger = ledger if ledger is not None else ExchangeLedger()

    def score_texts(self, query: str, passages: list[str]) -> list[float]:
        if not passages:
            raise ProviderError("rerank requires at least one passage")
        payload = {"model": self.endpoint.model, "query": query, "documents": passages}
        start = time.monotonic()
        body, attempts = _post_with_retries(
            self.endpoint, f"{self.endpoint.base_url.rstrip('/')}/rerank", payload
        )
        by_index = {row["index"]: float(row["relevance_score"]) for row in body["results"]}
        scores = [by_index[i] for i in range(len(passages))]
        self.ledger.append(
            ProviderExchange(kind="rerank", request_summary=f"{len(passages)} passages",
                             response_text=f"{len(scores)} scores",
                             latency_s=time.monotonic() - start, attempts=attempts)
        )
        return scores

    def score_nodes(self, query: str, nodes) -> list[float]:
        return self.score_texts(query, [node.text for node in nodes])


class StubLogprobProvider:
    """Character-unigram model fit on the input itself; logprobs are exact.

    Each character c of the text scores ln(count(c) / len(text)), so the
    resulting perplexity has a closed form that tests can recompute.
    """

    def token_logprobs(self, text: str) -> list[float]:
        if not text:
            raise ProviderError("token_logprobs requires non-empty text")
        counts = Counter(text)
        total = len(text)
        return [math.log(counts[ch] / total) for ch in text]


class NoLogprobProvider:
    """A provider without logprob capability; PPL must be reported unavailable."""

    def token_logprobs(self, text: str) -> list[float]:
        raise CapabilityError("endpoint does not expose token logprobs")
