"""HTTP front end: route queries, inspect the pool, extend the bank.

The service wraps one loaded bank and one gateway behind a small JSON
API:

    GET  /healthz          liveness plus bank shape
    GET  /v1/models        registry with prices and bank coverage
    GET  /v1/ledger        cumulative spend since startup
    POST /v1/route         route one query (JSON body)
    POST /v1/bank/extend   multipart records/profiles, new bank version

Bank extension is copy-on-write: the grown bank is persisted to a
sibling directory ``<bank>.v<n>`` and swapped in atomically; the
directory the service was started from is never modified. One
extension runs at a time; a second concurrent request is refused with
409 rather than queued.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

from fastapi import FastAPI, File, Request, UploadFile
from fastapi.responses import JSONResponse

from .bank import EmbeddingBank, ModelProfile, QueryRecord, extend_bank, load_bank
from .errors import (
    ConfigError,
    DuplicateModel,
    GatewayError,
    GatewayUnavailable,
    IncompleteCoverage,
    MissingModelResponse,
)
from .gateway import (
    CostLedger,
    Gateway,
    HttpBackend,
    HttpBinding,
    ReplayBackend,
    RetryPolicy,
    Sampling,
)
from .orchestrator import OrchestratorConfig, RoutingDecision, infer

MODE_REPLAY = "replay"
MODE_HTTP = "http"


@dataclass(frozen=True)
class ServiceConfig:
    """Startup configuration, normally loaded from a JSON file.

    ``providers`` maps model_id to a chat binding; ``embedding`` is the
    embedder binding. Both bindings name the environment variable that
    holds the API key; keys never appear in the file itself. Prices are
    not configured here: they live on the model profiles inside the
    bank manifest.
    """

    bank_path: str
    mode: str = MODE_REPLAY
    replay_fixture: str | None = None
    providers: Mapping[str, Mapping] = field(default_factory=dict)
    embedding: Mapping | None = None
    orchestrator: Mapping = field(default_factory=dict)
    retry: Mapping = field(default_factory=dict)
    sampling: Mapping = field(default_factory=dict)
    trace_path: str | None = None
    max_parallel: int = 4
    timeout: float = 30.0

    def __post_init__(self):
        if not self.bank_path:
            raise ConfigError("bank_path is required")
        if self.mode not in (MODE_REPLAY, MODE_HTTP):
            raise ConfigError(f"mode must be {MODE_REPLAY!r} or {MODE_HTTP!r}, got {self.mode!r}")
        if self.mode == MODE_REPLAY and not self.replay_fixture:
            raise ConfigError("replay mode needs replay_fixture")
        if self.mode == MODE_HTTP and self.embedding is None:
            raise ConfigError("http mode needs an embedding binding")
        if self.max_parallel < 1:
            raise ConfigError("max_parallel must be >= 1")

    @classmethod
    def from_dict(cls, data: Mapping) -> "ServiceConfig":
        known = {
            "bank_path", "mode", "replay_fixture", "providers", "embedding",
            "orchestrator", "retry", "sampling", "trace_path", "max_parallel", "timeout",
        }
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown service option(s): {sorted(unknown)}")
        if "bank_path" not in data:
            raise ConfigError("bank_path is required")
        return cls(**{k: data[k] for k in data})

    @classmethod
    def load(cls, path: str | Path) -> "ServiceConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read service config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("service config must be a JSON object")
        return cls.from_dict(data)


def _binding_from(data: Mapping, what: str) -> HttpBinding:
    for key in ("base_url", "api_key_env", "model"):
        if key not in data:
            raise ConfigError(f"{what} binding needs {key!r}")
    return HttpBinding(
        base_url=data["base_url"],
        api_key_env=data["api_key_env"],
        model_name=data["model"],
        input_char_limit=data.get("input_char_limit"),
    )


def build_backend(config: ServiceConfig):
    if config.mode == MODE_REPLAY:
        return ReplayBackend.load(config.replay_fixture)
    chat_bindings = {
        mid: _binding_from(binding, f"provider {mid!r}")
        for mid, binding in config.providers.items()
    }
    return HttpBackend(
        chat_bindings,
        _binding_from(config.embedding, "embedding"),
        timeout=config.timeout,
    )


class DecisionTrace:
    """Append-only JSONL sink for routing decisions."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, decision: RoutingDecision, microdollars: int) -> None:
        entry = {"decision": decision.to_dict(), "microdollars": microdollars}
        line = json.dumps(entry, sort_keys=True) + "\n"
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line)


class RouterState:
    """Everything the HTTP handlers share: bank, gateway, trace, locks."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.bank: EmbeddingBank = load_bank(config.bank_path)
        self.current_bank_path = Path(config.bank_path)
        self.backend = build_backend(config)
        self.retry = RetryPolicy(**dict(config.retry)) if config.retry else RetryPolicy()
        self.sampling = Sampling(**dict(config.sampling)) if config.sampling else Sampling()
        self.gateway = Gateway(
            self.bank.models, self.backend, retry=self.retry, sampling=self.sampling
        )
        self.orchestrator_config = OrchestratorConfig.from_dict(config.orchestrator)
        self.trace = DecisionTrace(config.trace_path) if config.trace_path else None
        self._bank_lock = threading.Lock()      # guards bank/gateway swap
        self._extend_lock = threading.Lock()    # one extension at a time

    def snapshot(self) -> tuple[EmbeddingBank, Gateway]:
        with self._bank_lock:
            return self.bank, self.gateway

    def route(
        self,
        query: str,
        *,
        query_id: str | None = None,
        router_only: bool = False,
        explain: bool = False,
        overrides: Mapping | None = None,
        trace: bool = True,
    ) -> tuple[RoutingDecision, int, OrchestratorConfig]:
        cfg = self.orchestrator_config.with_overrides(overrides or {})
        bank, gateway = self.snapshot()
        request_ledger = CostLedger()
        decision = infer(
            query, bank, cfg, gateway.with_ledger(request_ledger),
            query_id=query_id, router_only=router_only, explain=explain,
            max_parallel=self.config.max_parallel,
        )
        gateway.ledger.merge(request_ledger)
        cost = request_ledger.total_microdollars()
        if trace and self.trace is not None:
            self.trace.append(decision, cost)
        return decision, cost, cfg

    def _next_version_path(self) -> Path:
        base = Path(self.config.bank_path)
        n = 2
        while Path(f"{base}.v{n}").exists():
            n += 1
        return Path(f"{base}.v{n}")

    def extend(
        self, records: list[QueryRecord], profiles: list[ModelProfile]
    ) -> tuple[Path, EmbeddingBank]:
        """Grow the bank, persist the result as a new version, swap it in.

        Raises BusyExtending when another extension is in flight.
        """
        from .bank import save_bank

        if not self._extend_lock.acquire(blocking=False):
            raise BusyExtending("another bank extension is in progress")
        try:
            bank, gateway = self.snapshot()
            grown = extend_bank(bank, records, profiles, gateway)
            target = self._next_version_path()
            save_bank(grown, target)
            new_gateway = Gateway(
                grown.models, self.backend,
                ledger=gateway.ledger, retry=self.retry, sampling=self.sampling,
            )
            with self._bank_lock:
                self.bank = grown
                self.gateway = new_gateway
                self.current_bank_path = target
            return target, grown
        finally:
            self._extend_lock.release()


class BusyExtending(Exception):
    pass


def parse_records_jsonl(raw: bytes) -> list[QueryRecord]:
    records = []
    for i, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(QueryRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"records line {i}: {exc}") from exc
    return records


def parse_profiles_json(raw: bytes) -> list[ModelProfile]:
    try:
        data = json.loads(raw.decode("utf-8"))
        if not isinstance(data, list):
            raise ValueError("profiles file must hold a JSON list")
        return [ModelProfile.from_dict(d) for d in data]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValueError(f"profiles file: {exc}") from exc


def create_app(state: RouterState) -> FastAPI:
    """Build the FastAPI application around a RouterState."""
    app = FastAPI(title="mixroute", version="1")
    app.state.router = state

    def error(status: int, exc: Exception) -> JSONResponse:
        return JSONResponse(
            status_code=status, content={"error": type(exc).__name__, "detail": str(exc)}
        )

    @app.get("/healthz")
    def healthz():
        bank, _ = state.snapshot()
        return {
            "status": "ok",
            "bank_path": str(state.current_bank_path),
            "n_records": bank.n_records,
            "n_models": bank.n_models,
        }

    @app.get("/v1/models")
    def models():
        bank, _ = state.snapshot()
        return {
            "models": [p.to_dict() for p in bank.models],
            "n_records": bank.n_records,
            "dim": bank.dim,
        }

    @app.get("/v1/ledger")
    def ledger():
        _, gateway = state.snapshot()
        return gateway.ledger.snapshot()

    @app.post("/v1/route")
    async def route(request: Request):
        try:
            body = await request.json()
        except Exception as exc:
            return error(400, exc)
        if not isinstance(body, dict) or not isinstance(body.get("query"), str) or not body["query"]:
            return error(400, ValueError("body must be a JSON object with a non-empty 'query'"))
        try:
            decision, cost, cfg = state.route(
                body["query"],
                query_id=body.get("query_id"),
                router_only=bool(body.get("router_only", False)),
                explain=bool(body.get("explain", False)),
                overrides=body.get("overrides"),
                trace=bool(body.get("trace", True)),
            )
        except ConfigError as exc:
            return error(400, exc)
        except GatewayUnavailable as exc:
            return error(503, exc)
        except GatewayError as exc:
            return error(502, exc)
        return {
            "query_id": decision.query_id,
            "verdict": decision.verdict,
            "final_response": decision.final_response,
            "models": list(decision.final_aggregatee_ids),
            "aggregator_id": decision.aggregator_id,
            "microdollars": cost,
            "config": cfg.to_dict(),
            "decision": decision.to_dict(),
        }

    @app.post("/v1/bank/extend")
    async def bank_extend(
        records: UploadFile = File(...),
        profiles: Optional[UploadFile] = File(default=None),
    ):
        try:
            new_records = parse_records_jsonl(await records.read())
            new_profiles = parse_profiles_json(await profiles.read()) if profiles else []
        except ValueError as exc:
            return error(400, exc)
        try:
            target, grown = state.extend(new_records, new_profiles)
        except BusyExtending as exc:
            return error(409, exc)
        except DuplicateModel as exc:
            return error(409, exc)
        except IncompleteCoverage as exc:
            return error(400, exc)
        except (MissingModelResponse, ValueError) as exc:
            return error(400, exc)
        except GatewayError as exc:
            return error(502, exc)
        return {
            "bank_path": str(target),
            "n_records": grown.n_records,
            "n_models": grown.n_models,
            "model_ids": list(grown.model_ids),
        }

    return app


def create_app_from_config(path: str | Path):
    return create_app(RouterState(ServiceConfig.load(path)))
