"""Provider gateway for the three LLM capabilities the workflow needs:
chat completion, sentence embedding, and per-token log-prob scoring.

Adds request hashing, an append-only record/replay cache, bounded retries,
and cost accounting on top of any provider object.
"""

from __future__ import annotations

import json
import hashlib
import math
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence


class GatewayError(Exception):
    """Base class for provider/gateway failures."""


class NetworkError(GatewayError):
    """Transient transport failure; eligible for retry."""


class AuthError(GatewayError):
    """Credential rejected; never retried."""


class ReplayMissError(GatewayError):
    """Replay mode was asked for a request that was never recorded."""


class FixtureMissingError(GatewayError):
    """The mock provider has no fixture for this request."""


class ProviderUnsupportedError(GatewayError):
    """The provider cannot serve the requested capability (e.g. no log-probs)."""


class ContextOverflowError(GatewayError):
    """The scored text exceeds the provider's context window."""


class DimensionMismatchError(GatewayError):
    """The provider returned embedding vectors of inconsistent length."""


# A single newline joins prefix and target in scored blocks; fixing the
# separator keeps PMI values comparable across runs.
SCORE_SEPARATOR = "\n"


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    system_prompt: str
    user_prompt: str
    temperature: float = 0.0
    max_tokens: int = 1024
    expects_json: bool = False

    def __post_init__(self):
        if not self.system_prompt or not self.user_prompt:
            raise ValueError("prompts must be nonempty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class LlmTranscript:
    request_hash: str
    response_text: str
    prompt_tokens: int
    completion_tokens: int
    latency_ms: int
    provider: str


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    model_id: str

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("embedding values must be finite")


@dataclass(frozen=True)
class ScoredSequence:
    """Per-token log-probs over "prefix + separator + target"."""

    token_texts: tuple[str, ...]
    token_logprobs: tuple[float, ...]
    prefix_length: int

    def __post_init__(self):
        if len(self.token_texts) != len(self.token_logprobs):
            raise ValueError("token_texts and token_logprobs must have equal length")
        if any(lp > 0.0 for lp in self.token_logprobs):
            raise ValueError("log probabilities must be <= 0")
        if not 0 <= self.prefix_length <= len(self.token_texts):
            raise ValueError("prefix_length out of range")

    @property
    def target_logprob_sum(self) -> float:
        return math.fsum(self.token_logprobs[self.prefix_length:])


def canonical_json(obj) -> str:
    """Stable serialization used for request hashing and cache keys."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def request_hash(canonical: str) -> str:
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def chat_request_dict(req: ChatRequest) -> dict:
    return {
        "kind": "chat",
        "model_id": req.model_id,
        "system_prompt": req.system_prompt,
        "user_prompt": req.user_prompt,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
        "expects_json": req.expects_json,
    }


def embed_request_dict(texts: Sequence[str], model_id: str) -> dict:
    return {"kind": "embed", "model_id": model_id, "texts": list(texts)}


def score_request_dict(prefix: str, target: str, model_id: str) -> dict:
    return {
        "kind": "score",
        "model_id": model_id,
        "prefix": prefix,
        "separator": SCORE_SEPARATOR,
        "target": target,
    }


def load_price_table(path: str | Path) -> dict:
    """Read a model -> {prompt_per_1k, completion_per_1k} price table (USD)."""
    table = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(table, dict):
        raise ValueError("price table must be a JSON object")
    return table


class CostMeter:
    """Accumulates metered token cost across a run. Updates are atomic."""

    def __init__(self, price_table: Mapping | None = None):
        self._prices = dict(price_table or {})
        self._lock = threading.Lock()
        self.total_usd = 0.0
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self.calls = 0

    def price_for(self, model_id: str) -> tuple[float, float]:
        entry = self._prices.get(model_id, {})
        return (
            float(entry.get("prompt_per_1k", 0.0)),
            float(entry.get("completion_per_1k", 0.0)),
        )

    def cost_of(self, model_id: str, prompt_tokens: int, completion_tokens: int) -> float:
        prompt_price, completion_price = self.price_for(model_id)
        return (prompt_tokens * prompt_price + completion_tokens * completion_price) / 1000.0

    def record(self, model_id: str, prompt_tokens: int, completion_tokens: int) -> float:
        cost = self.cost_of(model_id, prompt_tokens, completion_tokens)
        with self._lock:
            self.total_usd += cost
            self.prompt_tokens += prompt_tokens
            self.completion_tokens += completion_tokens
            self.calls += 1
        return cost


class TranscriptCache:
    """Append-only directory of <request-hash>.json entries."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._lock = threading.Lock()

    def path_for(self, digest: str) -> Path:
        return self.directory / f"{digest}.json"

    def get(self, digest: str) -> dict | None:
        path = self.path_for(digest)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def put(self, digest: str, request: dict, response_text: str,
            prompt_tokens: int, completion_tokens: int) -> None:
        entry = {
            "request": request,
            "response_text": response_text,
            "prompt_tokens": int(prompt_tokens),
            "completion_tokens": int(completion_tokens),
        }
        with self._lock:
            path = self.path_for(digest)
            if path.exists():
                return  # append-only: first write wins
            self.directory.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(f".tmp-{threading.get_ident()}")
            tmp.write_text(json.dumps(entry, indent=2, sort_keys=True) + "\n", encoding="utf-8")
            tmp.rename(path)


CACHE_MODES = ("live", "record", "replay")


class Gateway:
    """Front door for all provider calls.

    Modes: "live" never touches the cache, "record" reads through and stores
    misses, "replay" serves only recorded entries and performs zero network
    calls. Safe for concurrent use.
    """

    def __init__(
        self,
        provider=None,
        *,
        scorer=None,
        cache_dir: str | Path | None = None,
        mode: str = "live",
        meter: CostMeter | None = None,
        embed_model_id: str = "mock-embed",
        scorer_model_id: str = "mock-scorer",
        max_attempts: int = 3,
        backoff_s: float = 1.0,
        sleep=time.sleep,
    ):
        if mode not in CACHE_MODES:
            raise ValueError(f"cache mode must be one of {CACHE_MODES}, got {mode!r}")
        if mode in ("record", "replay") and cache_dir is None:
            raise ValueError(f"cache mode {mode!r} requires a cache directory")
        self.provider = provider
        self.scorer = scorer if scorer is not None else provider
        self.cache = TranscriptCache(cache_dir) if cache_dir is not None else None
        self.mode = mode
        self.meter = meter
        self.embed_model_id = embed_model_id
        self.scorer_model_id = scorer_model_id
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self._sleep = sleep
        self.transcripts: list[LlmTranscript] = []
        self._lock = threading.Lock()

    # -- internals ---------------------------------------------------------

    def _record_transcript(self, transcript: LlmTranscript, model_id: str) -> LlmTranscript:
        if self.meter is not None:
            self.meter.record(model_id, transcript.prompt_tokens, transcript.completion_tokens)
        with self._lock:
            self.transcripts.append(transcript)
        return transcript

    def _call_with_retry(self, fn):
        delay = self.backoff_s
        last: Exception | None = None
        for attempt in range(self.max_attempts):
            try:
                return fn()
            except NetworkError as exc:
                last = exc
                if attempt + 1 < self.max_attempts:
                    self._sleep(delay)
                    delay *= 2
        raise NetworkError(f"giving up after {self.max_attempts} attempts: {last}")

    def _cached_exchange(self, request: dict, fetch, model_id: str) -> LlmTranscript:
        """Shared cache/record/replay path; fetch() -> (text, pt, ct)."""
        canonical = canonical_json(request)
        digest = request_hash(canonical)
        if self.mode in ("record", "replay") and self.cache is not None:
            entry = self.cache.get(digest)
            if entry is not None:
                transcript = LlmTranscript(
                    request_hash=digest,
                    response_text=entry["response_text"],
                    prompt_tokens=int(entry["prompt_tokens"]),
                    completion_tokens=int(entry["completion_tokens"]),
                    latency_ms=0,
                    provider="cache",
                )
                return self._record_transcript(transcript, model_id)
            if self.mode == "replay":
                raise ReplayMissError(
                    f"no cached entry for {request['kind']} request {digest} (model {model_id})"
                )
        if self.provider is None and self.scorer is None:
            raise GatewayError("no provider configured and no cache entry available")

        start = time.monotonic()
        text, prompt_tokens, completion_tokens = self._call_with_retry(fetch)
        latency_ms = int((time.monotonic() - start) * 1000)
        if self.mode == "record" and self.cache is not None:
            self.cache.put(digest, request, text, prompt_tokens, completion_tokens)
        transcript = LlmTranscript(
            request_hash=digest,
            response_text=text,
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            latency_ms=latency_ms,
            provider=getattr(self.provider, "name", "unknown"),
        )
        return self._record_transcript(transcript, model_id)

    # -- capabilities ------------------------------------------------------

    def chat(self, req: ChatRequest) -> LlmTranscript:
        def fetch():
            if self.provider is None:
                raise GatewayError("no chat provider configured")
            return self.provider.chat_raw(req)

        return self._cached_exchange(chat_request_dict(req), fetch, req.model_id)

    def embed(self, texts: Sequence[str], model_id: str | None = None) -> list[EmbeddingVector]:
        """Embed texts, preserving order; vectors are L2-normalized here so
        Euclidean clustering downstream behaves like cosine clustering."""
        if not texts:
            raise ValueError("embed requires a nonempty list of texts")
        if any(not t for t in texts):
            raise ValueError("embed texts must be nonempty")
        model_id = model_id or self.embed_model_id

        def fetch():
            if self.provider is None:
                raise GatewayError("no embedding provider configured")
            vectors, prompt_tokens = self.provider.embed_raw(list(texts), model_id)
            return canonical_json({"vectors": vectors}), prompt_tokens, 0

        transcript = self._cached_exchange(embed_request_dict(texts, model_id), fetch, model_id)
        vectors = json.loads(transcript.response_text)["vectors"]
        if len(vectors) != len(texts):
            raise GatewayError(
                f"provider returned {len(vectors)} vectors for {len(texts)} texts"
            )
        lengths = {len(v) for v in vectors}
        if len(lengths) != 1:
            raise DimensionMismatchError(f"ragged embedding lengths: {sorted(lengths)}")
        out = []
        for vector in vectors:
            norm = math.sqrt(math.fsum(v * v for v in vector))
            if norm == 0.0:
                raise GatewayError("provider returned a zero embedding vector")
            out.append(EmbeddingVector(tuple(v / norm for v in vector), model_id))
        return out

    def score_continuation(self, prefix: str, target: str,
                           model_id: str | None = None) -> ScoredSequence:
        """Token log-probs of target conditioned on prefix (empty prefix means
        unconditioned). prefix_length marks where target tokens begin."""
        if not target:
            raise ValueError("score_continuation target must be nonempty")
        model_id = model_id or self.scorer_model_id
        block = f"{prefix}{SCORE_SEPARATOR}{target}" if prefix else target
        boundary = len(prefix) + len(SCORE_SEPARATOR) if prefix else 0

        def fetch():
            scorer = self.scorer
            if scorer is None:
                raise GatewayError("no scoring provider configured")
            tokens, logprobs, offsets = scorer.score_raw(block, model_id)
            payload = canonical_json(
                {"tokens": tokens, "logprobs": logprobs, "offsets": offsets}
            )
            return payload, len(tokens), 0

        transcript = self._cached_exchange(
            score_request_dict(prefix, target, model_id), fetch, model_id
        )
        payload = json.loads(transcript.response_text)
        tokens = payload["tokens"]
        logprobs = [min(float(lp), 0.0) for lp in payload["logprobs"]]
        offsets = payload["offsets"]
        prefix_length = sum(1 for off in offsets if off < boundary)
        return ScoredSequence(
            token_texts=tuple(tokens),
            token_logprobs=tuple(logprobs),
            prefix_length=prefix_length,
        )
