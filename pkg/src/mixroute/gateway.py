"""Provider access: chat/embedding calls, replay fixtures, cost ledger.

The Gateway front door pairs a model registry (profiles with prices)
with a backend that actually serves calls. Backends implement two
methods and nothing else:

    chat(model_id, prompt, sampling) -> (text, prompt_tokens, completion_tokens)
    embed(text) -> sequence of floats

Shipped backends: ``HttpBackend`` speaks the common OpenAI-style wire
protocol; ``ReplayBackend`` serves recorded fixtures and fails loudly
on anything unrecorded, which is what makes evaluation runs
reproducible byte for byte. ``RecordingGateway`` wraps any gateway and
captures traffic into a replayable fixture.

Money is tracked in integer micro-dollars. A call's price is computed
once from exact Decimal arithmetic, rounded half-even to the
micro-dollar, and appended to the ledger exactly once (retries happen
before the ledger sees anything). Embedding calls are not metered; the
ledger tracks chat spending.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import httpx

from .bank import ModelProfile
from .errors import (
    GatewayUnavailable,
    ProviderError,
    ProviderTimeout,
    RateLimited,
    UnknownModel,
)

_MICRO = Decimal("0.000001")


@dataclass(frozen=True)
class Sampling:
    """Decoding parameters forwarded to chat providers."""

    temperature: float = 0.2
    top_p: float = 1.0


@dataclass(frozen=True)
class ChatResult:
    model_id: str
    text: str
    prompt_tokens: int
    completion_tokens: int


def price(profile: ModelProfile, prompt_tokens: int, completion_tokens: int) -> Decimal:
    """Exact dollar cost of one call, half-even rounded to 6 places.

    The two per-Mtok terms are summed exactly before the single
    rounding step; rounding each term separately would drift.
    """
    if prompt_tokens < 0 or completion_tokens < 0:
        raise ValueError("token counts must be non-negative")
    exact = (
        Decimal(prompt_tokens) * profile.input_price_per_mtok
        + Decimal(completion_tokens) * profile.output_price_per_mtok
    ).scaleb(-6)
    return exact.quantize(_MICRO, rounding=ROUND_HALF_EVEN)


def microdollars(profile: ModelProfile, prompt_tokens: int, completion_tokens: int) -> int:
    return int(price(profile, prompt_tokens, completion_tokens).scaleb(6))


@dataclass(frozen=True)
class LedgerEntry:
    model_id: str
    prompt_tokens: int
    completion_tokens: int
    microdollars: int


class CostLedger:
    """Append-only chat spend log; safe under concurrent appends."""

    def __init__(self):
        self._entries: list[LedgerEntry] = []
        self._lock = threading.Lock()

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    def record_chat(self, profile: ModelProfile, prompt_tokens: int, completion_tokens: int) -> LedgerEntry:
        entry = LedgerEntry(
            model_id=profile.model_id,
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            microdollars=microdollars(profile, prompt_tokens, completion_tokens),
        )
        with self._lock:
            self._entries.append(entry)
        return entry

    def merge(self, other: "CostLedger") -> None:
        """Append another ledger's entries in their recorded order."""
        incoming = other.entries
        with self._lock:
            self._entries.extend(incoming)

    def total_microdollars(self) -> int:
        return sum(e.microdollars for e in self.entries)

    def per_model_microdollars(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.model_id] = out.get(e.model_id, 0) + e.microdollars
        return out

    def total_usd(self) -> Decimal:
        return Decimal(self.total_microdollars()).scaleb(-6)

    def snapshot(self) -> dict:
        """Deterministic summary; totals are order-independent."""
        per_model = self.per_model_microdollars()
        return {
            "entries": len(self.entries),
            "total_usd": str(Decimal(self.total_microdollars()).scaleb(-6).quantize(_MICRO)),
            "per_model_usd": {
                mid: str(Decimal(v).scaleb(-6).quantize(_MICRO))
                for mid, v in sorted(per_model.items())
            },
        }


# ---- replay ----

class ReplayBackend:
    """Fixture-backed provider: serves only what was recorded.

    Fixture files are line-delimited JSON. Chat rows key on
    sha256(model_id NUL prompt), embed rows on sha256(text). Judgment
    rows let evaluation score aggregated outputs; they key on
    query_id|aggregator|sorted aggregatee ids. Unknown kinds are
    skipped so fixtures stay forward compatible.
    """

    input_char_limit: int | None = None

    def __init__(self):
        self._chat: dict[str, tuple[str, int, int]] = {}
        self._embed: dict[str, list[float]] = {}
        self._judgments: dict[str, int] = {}
        self._lock = threading.Lock()

    @staticmethod
    def chat_key(model_id: str, prompt: str) -> str:
        return hashlib.sha256((model_id + "\x00" + prompt).encode("utf-8")).hexdigest()

    @staticmethod
    def embed_key(text: str) -> str:
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    @staticmethod
    def judgment_key(query_id: str, aggregator_id: str, aggregatee_ids: Iterable[str]) -> str:
        return f"{query_id}|{aggregator_id}|{','.join(sorted(aggregatee_ids))}"

    def add_chat(self, model_id: str, prompt: str, text: str, *, prompt_tokens: int, completion_tokens: int) -> None:
        with self._lock:
            self._chat[self.chat_key(model_id, prompt)] = (text, prompt_tokens, completion_tokens)

    def add_embed(self, text: str, vector: Sequence[float]) -> None:
        with self._lock:
            self._embed[self.embed_key(text)] = [float(x) for x in vector]

    def add_judgment(self, query_id: str, aggregator_id: str, aggregatee_ids: Iterable[str], correct: int) -> None:
        with self._lock:
            self._judgments[self.judgment_key(query_id, aggregator_id, aggregatee_ids)] = int(correct)

    def has_chat(self, model_id: str, prompt: str) -> bool:
        return self.chat_key(model_id, prompt) in self._chat

    def has_embed(self, text: str) -> bool:
        return self.embed_key(text) in self._embed

    def chat(self, model_id: str, prompt: str, sampling: Sampling) -> tuple[str, int, int]:
        try:
            return self._chat[self.chat_key(model_id, prompt)]
        except KeyError:
            raise ProviderError(
                f"chat not in fixture: model={model_id!r} prompt={prompt[:80]!r}"
            ) from None

    def embed(self, text: str) -> list[float]:
        try:
            return list(self._embed[self.embed_key(text)])
        except KeyError:
            raise ProviderError(f"embedding not in fixture: text={text[:80]!r}") from None

    def judgment(self, query_id: str, aggregator_id: str, aggregatee_ids: Iterable[str]) -> int | None:
        return self._judgments.get(self.judgment_key(query_id, aggregator_id, aggregatee_ids))

    def save(self, path: str | Path) -> None:
        """Write the fixture; rows are sorted so equal content means equal bytes."""
        rows: list[dict] = []
        for key, (text, pt, ct) in self._chat.items():
            rows.append({"kind": "chat", "key": key, "text": text,
                         "prompt_tokens": pt, "completion_tokens": ct})
        for key, vec in self._embed.items():
            rows.append({"kind": "embed", "key": key, "vector": vec})
        for key, correct in self._judgments.items():
            rows.append({"kind": "judgment", "key": key, "correct": correct})
        rows.sort(key=lambda r: (r["kind"], r["key"]))
        with open(path, "w", encoding="utf-8") as f:
            for row in rows:
                f.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ReplayBackend":
        backend = cls()
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ProviderError(f"{path}:{lineno}: malformed fixture line: {exc}") from exc
                kind = row.get("kind")
                if kind == "chat":
                    backend._chat[row["key"]] = (
                        row["text"], int(row.get("prompt_tokens", 0)),
                        int(row.get("completion_tokens", 0)),
                    )
                elif kind == "embed":
                    backend._embed[row["key"]] = [float(x) for x in row["vector"]]
                elif kind == "judgment":
                    backend._judgments[row["key"]] = int(row["correct"])
                # anything else: future kinds ride along, ignored
        return backend


# ---- live http ----

@dataclass(frozen=True)
class HttpBinding:
    """Where one model lives and how to authenticate.

    API keys are never stored; ``api_key_env`` names the environment
    variable read at call time.
    """

    base_url: str
    api_key_env: str
    model_name: str
    input_char_limit: int | None = None


class HttpBackend:
    """OpenAI-style wire protocol over httpx.

    ``chat_bindings`` maps registry model_ids to provider endpoints;
    ``embed_binding`` serves all embedding calls. A custom transport
    slot exists for tests.
    """

    def __init__(
        self,
        chat_bindings: Mapping[str, HttpBinding],
        embed_binding: HttpBinding | None,
        *,
        timeout: float = 30.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self._chat_bindings = dict(chat_bindings)
        self._embed_binding = embed_binding
        self._client = httpx.Client(timeout=timeout, transport=transport)

    @property
    def input_char_limit(self) -> int | None:
        return self._embed_binding.input_char_limit if self._embed_binding else None

    def _headers(self, binding: HttpBinding) -> dict[str, str]:
        key = os.environ.get(binding.api_key_env)
        if not key:
            raise ProviderError(f"api key env var {binding.api_key_env!r} is not set")
        return {"Authorization": f"Bearer {key}"}

    def _post(self, binding: HttpBinding, path: str, body: dict) -> dict:
        url = binding.base_url.rstrip("/") + path
        try:
            response = self._client.post(url, json=body, headers=self._headers(binding))
        except httpx.TimeoutException as exc:
            raise ProviderTimeout(f"{url}: {exc}") from exc
        except httpx.HTTPError as exc:
            raise ProviderError(f"{url}: {exc}") from exc
        if response.status_code == 429:
            raise RateLimited(f"{url}: rate limited")
        if response.status_code >= 400:
            raise ProviderError(
                f"{url}: status {response.status_code}", status=response.status_code
            )
        try:
            return response.json()
        except (json.JSONDecodeError, ValueError) as exc:
            raise ProviderError(f"{url}: non-JSON body") from exc

    def chat(self, model_id: str, prompt: str, sampling: Sampling) -> tuple[str, int, int]:
        binding = self._chat_bindings.get(model_id)
        if binding is None:
            raise UnknownModel(f"no HTTP binding for model {model_id!r}")
        payload = {
            "model": binding.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": sampling.temperature,
            "top_p": sampling.top_p,
        }
        body = self._post(binding, "/chat/completions", payload)
        try:
            text = body["choices"][0]["message"]["content"]
            usage = body.get("usage", {})
            return (
                str(text),
                int(usage.get("prompt_tokens", 0)),
                int(usage.get("completion_tokens", 0)),
            )
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed chat response: {exc}") from exc

    def embed(self, text: str) -> list[float]:
        if self._embed_binding is None:
            raise ProviderError("no embedding binding configured")
        body = self._post(
            self._embed_binding, "/embeddings",
            {"model": self._embed_binding.model_name, "input": text},
        )
        try:
            return [float(x) for x in body["data"][0]["embedding"]]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed embedding response: {exc}") from exc


# ---- front door ----

@dataclass(frozen=True)
class RetryPolicy:
    """Capped exponential backoff for rate limits and timeouts."""

    max_attempts: int = 3
    base_delay: float = 0.5
    max_delay: float = 8.0
    sleep: Callable[[float], None] = time.sleep


class Gateway:
    """Registry + backend + ledger, with retry around every call."""

    def __init__(
        self,
        registry: Sequence[ModelProfile] | Mapping[str, ModelProfile],
        backend,
        *,
        ledger: CostLedger | None = None,
        retry: RetryPolicy | None = None,
        sampling: Sampling | None = None,
    ):
        if isinstance(registry, Mapping):
            self.registry: dict[str, ModelProfile] = dict(registry)
        else:
            self.registry = {p.model_id: p for p in registry}
        self.backend = backend
        self.ledger = ledger if ledger is not None else CostLedger()
        self.retry = retry if retry is not None else RetryPolicy()
        self.sampling = sampling if sampling is not None else Sampling()

    @property
    def input_char_limit(self) -> int | None:
        return getattr(self.backend, "input_char_limit", None)

    def with_ledger(self, ledger: CostLedger) -> "Gateway":
        """View over the same backend and registry writing elsewhere."""
        return Gateway(
            self.registry, self.backend,
            ledger=ledger, retry=self.retry, sampling=self.sampling,
        )

    def _retrying(self, fn: Callable, what: str):
        attempt = 1
        while True:
            try:
                return fn()
            except (RateLimited, ProviderTimeout) as exc:
                if attempt >= self.retry.max_attempts:
                    raise GatewayUnavailable(
                        f"{what} failed after {attempt} attempts: {exc}"
                    ) from exc
                delay = min(self.retry.max_delay, self.retry.base_delay * 2 ** (attempt - 1))
                self.retry.sleep(delay)
                attempt += 1

    def chat(self, model_id: str, prompt: str, sampling: Sampling | None = None) -> ChatResult:
        profile = self.registry.get(model_id)
        if profile is None:
            raise UnknownModel(f"model {model_id!r} is not in the registry")
        s = sampling if sampling is not None else self.sampling
        text, pt, ct = self._retrying(
            lambda: self.backend.chat(model_id, prompt, s), f"chat({model_id})"
        )
        self.ledger.record_chat(profile, pt, ct)
        return ChatResult(model_id=model_id, text=text, prompt_tokens=pt, completion_tokens=ct)

    def embed(self, text: str) -> list[float]:
        return list(self._retrying(lambda: self.backend.embed(text), "embed"))

    def price(self, model_id: str, prompt_tokens: int, completion_tokens: int) -> Decimal:
        profile = self.registry.get(model_id)
        if profile is None:
            raise UnknownModel(f"model {model_id!r} is not in the registry")
        return price(profile, prompt_tokens, completion_tokens)


class RecordingGateway:
    """Wraps a gateway and captures every served call into a fixture.

    The fixture can be saved and replayed later through ReplayBackend,
    which is how live traffic becomes a deterministic evaluation input.
    """

    def __init__(self, inner: Gateway, fixture: ReplayBackend | None = None):
        self.inner = inner
        self.fixture = fixture if fixture is not None else ReplayBackend()

    @property
    def registry(self) -> dict[str, ModelProfile]:
        return self.inner.registry

    @property
    def ledger(self) -> CostLedger:
        return self.inner.ledger

    @property
    def input_char_limit(self) -> int | None:
        return self.inner.input_char_limit

    def with_ledger(self, ledger: CostLedger) -> "RecordingGateway":
        return RecordingGateway(self.inner.with_ledger(ledger), fixture=self.fixture)

    def chat(self, model_id: str, prompt: str, sampling: Sampling | None = None) -> ChatResult:
        result = self.inner.chat(model_id, prompt, sampling)
        self.fixture.add_chat(
            model_id, prompt, result.text,
            prompt_tokens=result.prompt_tokens, completion_tokens=result.completion_tokens,
        )
        return result

    def embed(self, text: str) -> list[float]:
        vector = self.inner.embed(text)
        self.fixture.add_embed(text, vector)
        return vector

    def price(self, model_id: str, prompt_tokens: int, completion_tokens: int) -> Decimal:
        return self.inner.price(model_id, prompt_tokens, completion_tokens)
