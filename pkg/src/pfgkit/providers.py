"""Concrete providers: an OpenAI-compatible HTTP backend and an offline
deterministic mock backend (fixture chat, seeded embeddings, seeded scorer)."""

from __future__ import annotations

import hashlib
import json
import os
import re
from pathlib import Path
from typing import Sequence

import numpy as np
import requests

from .gateway import (
    AuthError,
    ChatRequest,
    ContextOverflowError,
    FixtureMissingError,
    GatewayError,
    NetworkError,
    ProviderUnsupportedError,
    chat_request_dict,
    canonical_json,
    request_hash,
)

ENV_API_BASE = "PFG_API_BASE"
ENV_API_KEY = "PFG_API_KEY"
ENV_SCORER_BASE = "PFG_SCORER_BASE"


class HttpProvider:
    """OpenAI-compatible endpoints: chat completions, embeddings, and
    completions-with-logprobs (echo mode) for scoring."""

    name = "openai-compat"

    def __init__(self, base_url: str, api_key: str = "", *,
                 scorer_base_url: str | None = None,
                 timeout_s: float = 120.0, session=None):
        if not base_url:
            raise ValueError("base_url must be nonempty")
        self.base_url = base_url.rstrip("/")
        self.scorer_base_url = (scorer_base_url or base_url).rstrip("/")
        self.api_key = api_key
        self.timeout_s = timeout_s
        self._session = session or requests.Session()

    @classmethod
    def from_env(cls) -> "HttpProvider":
        base = os.environ.get(ENV_API_BASE, "")
        if not base:
            raise GatewayError(f"{ENV_API_BASE} is not set")
        return cls(
            base,
            api_key=os.environ.get(ENV_API_KEY, ""),
            scorer_base_url=os.environ.get(ENV_SCORER_BASE) or None,
        )

    def _post(self, url: str, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            response = self._session.post(url, json=payload, headers=headers,
                                          timeout=self.timeout_s)
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise NetworkError(f"transport failure for {url}: {exc}") from exc
        if response.status_code in (401, 403):
            raise AuthError(f"auth failure ({response.status_code}) for {url}")
        if response.status_code in (408, 429) or response.status_code >= 500:
            raise NetworkError(f"transient HTTP {response.status_code} from {url}")
        if response.status_code >= 400:
            body = response.text[:300]
            if "context" in body.lower() and "length" in body.lower():
                raise ContextOverflowError(body)
            raise GatewayError(f"HTTP {response.status_code} from {url}: {body}")
        return response.json()

    def chat_raw(self, req: ChatRequest) -> tuple[str, int, int]:
        payload = {
            "model": req.model_id,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        data = self._post(f"{self.base_url}/chat/completions", payload)
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"malformed chat completion payload: {exc}") from exc
        usage = data.get("usage") or {}
        return (
            text,
            int(usage.get("prompt_tokens", 0)),
            int(usage.get("completion_tokens", 0)),
        )

    def embed_raw(self, texts: Sequence[str], model_id: str) -> tuple[list[list[float]], int]:
        data = self._post(f"{self.base_url}/embeddings",
                          {"model": model_id, "input": list(texts)})
        try:
            items = sorted(data["data"], key=lambda d: d["index"])
            vectors = [list(map(float, item["embedding"])) for item in items]
        except (KeyError, TypeError) as exc:
            raise GatewayError(f"malformed embeddings payload: {exc}") from exc
        usage = data.get("usage") or {}
        return vectors, int(usage.get("prompt_tokens", 0))

    def score_raw(self, block: str, model_id: str) -> tuple[list[str], list[float], list[int]]:
        payload = {
            "model": model_id,
            "prompt": block,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 0,
        }
        data = self._post(f"{self.scorer_base_url}/completions", payload)
        try:
            lp = data["choices"][0]["logprobs"]
            tokens = list(lp["tokens"])
            # The first echoed token has no conditioning context; providers
            # report null for it.
            logprobs = [0.0 if v is None else float(v) for v in lp["token_logprobs"]]
            offsets = [int(v) for v in lp["text_offset"]]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderUnsupportedError(
                f"provider did not return echoed token logprobs: {exc}"
            ) from exc
        return tokens, logprobs, offsets


_TOKEN_RE = re.compile(r"\S+")


def _stable_unit_interval(*parts) -> float:
    """Deterministic hash of the parts onto [0, 1)."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


class MockProvider:
    """Offline deterministic provider for tests and fixtures.

    Chat answers come from fixture files keyed by request hash (optionally
    synthesized when no fixture exists); embeddings come from a seeded
    hash-to-vector map with optional exact-text overrides; the scorer assigns
    per-token log-probs from a seeded deterministic function.
    """

    name = "mock"

    def __init__(
        self,
        *,
        seed: int = 0,
        embed_dim: int = 16,
        fixture_dir: str | Path | None = None,
        synthesize: bool = False,
        embed_table: dict | None = None,
        score_repeat_aware: bool = True,
        score_base_logprob: float | None = None,
        score_conditioned_logprob: float | None = None,
    ):
        if score_base_logprob is not None and score_base_logprob > 0:
            raise ValueError("score_base_logprob must be <= 0")
        if score_conditioned_logprob is not None and score_conditioned_logprob > 0:
            raise ValueError("score_conditioned_logprob must be <= 0")
        self.seed = seed
        self.embed_dim = embed_dim
        self.fixture_dir = Path(fixture_dir) if fixture_dir is not None else None
        self.synthesize = synthesize
        self.embed_table = dict(embed_table or {})
        self.score_repeat_aware = score_repeat_aware
        self.score_base_logprob = score_base_logprob
        self.score_conditioned_logprob = score_conditioned_logprob
        self._synthesizer = None

    def chat_raw(self, req: ChatRequest) -> tuple[str, int, int]:
        digest = request_hash(canonical_json(chat_request_dict(req)))
        if self.fixture_dir is not None:
            path = self.fixture_dir / f"{digest}.json"
            if path.exists():
                entry = json.loads(path.read_text(encoding="utf-8"))
                return (
                    entry["response_text"],
                    int(entry.get("prompt_tokens", 0)),
                    int(entry.get("completion_tokens", 0)),
                )
        if self.synthesize:
            if self._synthesizer is None:
                from .synthetic import SyntheticLlm

                self._synthesizer = SyntheticLlm(seed=self.seed)
            text = self._synthesizer.respond(req)
            prompt_tokens = len(req.system_prompt.split()) + len(req.user_prompt.split())
            return text, prompt_tokens, len(text.split())
        raise FixtureMissingError(f"no chat fixture for request {digest}")

    def _hashed_vector(self, text: str, model_id: str) -> list[float]:
        raw = hashlib.sha256(f"{self.seed}|{model_id}|{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(raw[:8], "big"))
        return [float(v) for v in rng.standard_normal(self.embed_dim)]

    def embed_raw(self, texts: Sequence[str], model_id: str) -> tuple[list[list[float]], int]:
        vectors = []
        for text in texts:
            if text in self.embed_table:
                vectors.append([float(v) for v in self.embed_table[text]])
            else:
                vectors.append(self._hashed_vector(text, model_id))
        return vectors, sum(len(t.split()) for t in texts)

    def _base_logprob(self, token: str) -> float:
        if self.score_base_logprob is not None:
            return self.score_base_logprob
        return -(1.0 + _stable_unit_interval(self.seed, token))

    def score_raw(self, block: str, model_id: str) -> tuple[list[str], list[float], list[int]]:
        tokens, offsets, logprobs = [], [], []
        seen: set[str] = set()
        for match in _TOKEN_RE.finditer(block):
            token = match.group(0)
            base = self._base_logprob(token)
            if self.score_repeat_aware and token in seen:
                lp = (
                    self.score_conditioned_logprob
                    if self.score_conditioned_logprob is not None
                    else base * 0.5
                )
            else:
                lp = base
            tokens.append(token)
            offsets.append(match.start())
            logprobs.append(lp)
            seen.add(token)
        return tokens, logprobs, offsets
