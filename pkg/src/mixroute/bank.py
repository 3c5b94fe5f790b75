"""Embedding bank: the frozen memory the router scores against.

A bank is built once from a corpus of answered queries and holds, per
query row: a unit-norm question embedding, one unit-norm response
embedding per registered model, a correctness bit per model, and a
completion-token count per model. Rows are ordered; row i of every
array describes ``records[i]``. Model column j always refers to
``models[j]``.

Embeddings are stored float32; all scoring happens in float64 after an
explicit cast. Banks are immutable once constructed, which is what
makes concurrent routing against a shared bank safe.

On disk a bank is a directory of flat sidecar files plus a manifest
carrying shapes, the model registry, and a SHA-256 per sidecar:

    manifest.json     shapes, registry, digests, truncation flags
    eq.f32            N x d question embeddings, little-endian float32
    er.f32            N x M x d response embeddings, little-endian float32
    capability.bits   M x N correctness bits, row-major, packed 8/byte
    costs.u32         N x M completion token counts, little-endian uint32
    records.jsonl     one source record per line, row order
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ChecksumMismatch,
    DuplicateModel,
    EmbedderFailure,
    EmptyBank,
    FormatVersionMismatch,
    IncompleteCoverage,
    MalformedBank,
    MissingModelResponse,
    TruncatedFile,
    ZeroVector,
)

FORMAT_VERSION = 1
UNIT_NORM_TOL = 1e-6

_SIDECARS = ("eq.f32", "er.f32", "capability.bits", "costs.u32", "records.jsonl")


@dataclass(frozen=True)
class ModelProfile:
    """Registry entry for one model in the pool.

    Prices are per million tokens, kept as Decimal so ledger math stays
    exact. ``endpoint`` is the provider base URL; empty for replay-only
    setups.
    """

    model_id: str
    display_name: str = ""
    endpoint: str = ""
    input_price_per_mtok: Decimal = Decimal("0")
    output_price_per_mtok: Decimal = Decimal("0")

    def __post_init__(self):
        if not self.model_id:
            raise ValueError("model_id must be non-empty")
        for name in ("input_price_per_mtok", "output_price_per_mtok"):
            value = getattr(self, name)
            if not isinstance(value, Decimal):
                object.__setattr__(self, name, Decimal(str(value)))
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "display_name": self.display_name,
            "endpoint": self.endpoint,
            "input_price_per_mtok": str(self.input_price_per_mtok),
            "output_price_per_mtok": str(self.output_price_per_mtok),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelProfile":
        return cls(
            model_id=data["model_id"],
            display_name=data.get("display_name", ""),
            endpoint=data.get("endpoint", ""),
            input_price_per_mtok=Decimal(str(data.get("input_price_per_mtok", "0"))),
            output_price_per_mtok=Decimal(str(data.get("output_price_per_mtok", "0"))),
        )


@dataclass(frozen=True)
class QueryRecord:
    """One answered query: the raw material of a bank row.

    The three per-model maps must share an identical key set. Records
    may cover more models than a given bank registers; the extra
    entries ride along untouched.
    """

    query_id: str
    question_text: str
    label_text: str
    responses: Mapping[str, str]
    correctness: Mapping[str, int]
    completion_tokens: Mapping[str, int]
    source_tag: str = "default"

    def __post_init__(self):
        if not self.query_id:
            raise ValueError("query_id must be non-empty")
        keys = set(self.responses)
        if set(self.correctness) != keys or set(self.completion_tokens) != keys:
            raise ValueError(
                f"record {self.query_id!r}: responses, correctness and "
                "completion_tokens must cover the same model ids"
            )
        for m, bit in self.correctness.items():
            if bit not in (0, 1):
                raise ValueError(f"record {self.query_id!r}: correctness[{m!r}] must be 0 or 1")
        for m, tok in self.completion_tokens.items():
            if not isinstance(tok, int) or tok < 0:
                raise ValueError(
                    f"record {self.query_id!r}: completion_tokens[{m!r}] must be a non-negative int"
                )

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "question_text": self.question_text,
            "label_text": self.label_text,
            "responses": dict(self.responses),
            "correctness": {k: int(v) for k, v in self.correctness.items()},
            "completion_tokens": {k: int(v) for k, v in self.completion_tokens.items()},
            "source_tag": self.source_tag,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "QueryRecord":
        return cls(
            query_id=data["query_id"],
            question_text=data["question_text"],
            label_text=data.get("label_text", ""),
            responses=dict(data["responses"]),
            correctness={k: int(v) for k, v in data["correctness"].items()},
            completion_tokens={k: int(v) for k, v in data["completion_tokens"].items()},
            source_tag=data.get("source_tag", "default"),
        )


@dataclass(frozen=True)
class EmbeddingBank:
    """Immutable scoring memory. See module docstring for layout."""

    dim: int
    models: tuple[ModelProfile, ...]
    query_embeddings: np.ndarray    # (N, d) float32, unit rows
    response_embeddings: np.ndarray  # (N, M, d) float32, unit rows
    capability: np.ndarray          # (M, N) uint8, 0/1
    costs: np.ndarray               # (N, M) uint32
    records: tuple[QueryRecord, ...]
    truncations: tuple[tuple[str, str | None], ...] = ()

    def __post_init__(self):
        for arr in (self.query_embeddings, self.response_embeddings, self.capability, self.costs):
            arr.setflags(write=False)

    @property
    def n_records(self) -> int:
        return len(self.records)

    @property
    def n_models(self) -> int:
        return len(self.models)

    @property
    def model_ids(self) -> tuple[str, ...]:
        return tuple(p.model_id for p in self.models)

    def model_index(self, model_id: str) -> int:
        try:
            return self.model_ids.index(model_id)
        except ValueError:
            raise KeyError(f"model {model_id!r} not in bank") from None

    def record_index(self, query_id: str) -> int:
        for i, rec in enumerate(self.records):
            if rec.query_id == query_id:
                return i
        raise KeyError(f"query {query_id!r} not in bank")

    def validate(self) -> None:
        """Check structural invariants; raises ValueError on violation."""
        n, m, d = self.n_records, self.n_models, self.dim
        if self.query_embeddings.shape != (n, d):
            raise ValueError("query_embeddings shape mismatch")
        if self.response_embeddings.shape != (n, m, d):
            raise ValueError("response_embeddings shape mismatch")
        if self.capability.shape != (m, n):
            raise ValueError("capability shape mismatch")
        if self.costs.shape != (n, m):
            raise ValueError("costs shape mismatch")
        if not np.isin(self.capability, (0, 1)).all():
            raise ValueError("capability entries must be 0 or 1")
        qn = np.linalg.norm(self.query_embeddings.astype(np.float64), axis=1)
        rn = np.linalg.norm(self.response_embeddings.astype(np.float64), axis=2)
        if n and not np.allclose(qn, 1.0, atol=UNIT_NORM_TOL, rtol=0):
            raise ValueError("query embedding rows must be unit norm")
        if n and m and not np.allclose(rn, 1.0, atol=UNIT_NORM_TOL, rtol=0):
            raise ValueError("response embedding rows must be unit norm")
        ids = [r.query_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("query_ids must be unique")


def normalize_embedding(vector: Sequence[float] | np.ndarray) -> np.ndarray:
    """Scale a raw embedding to unit Euclidean norm (float64).

    Raises ZeroVector when the norm is below 1e-12; a zero direction
    carries no similarity signal and would poison every cosine.
    """
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("expected a 1-d vector")
    norm = float(np.linalg.norm(v))
    if norm < 1e-12:
        raise ZeroVector(f"cannot normalize vector with norm {norm!r}")
    return v / norm


# ---- construction ----

Embedder = Callable[[str], Sequence[float]]


def _resolve_embed(embedder) -> tuple[Callable[[str], Sequence[float]], int | None]:
    fn = embedder.embed if hasattr(embedder, "embed") else embedder
    limit = getattr(embedder, "input_char_limit", None)
    return fn, limit


def _embed_unit(fn, limit, text: str, what: str, dim: int | None) -> tuple[np.ndarray, bool, int]:
    """Embed one text, enforcing the input limit and unit norm.

    Returns (float32 unit vector, truncated flag, dimension).
    """
    truncated = False
    if limit is not None and len(text) > limit:
        text = text[:limit]
        truncated = True
    try:
        raw = fn(text)
    except Exception as exc:  # provider errors surface with the offending id
        raise EmbedderFailure(what, exc) from exc
    vec = normalize_embedding(np.asarray(raw, dtype=np.float64))
    if dim is not None and vec.shape[0] != dim:
        raise EmbedderFailure(f"{what}: expected dim {dim}, got {vec.shape[0]}")
    return vec.astype(np.float32), truncated, vec.shape[0]


def _check_coverage(records: Sequence[QueryRecord], model_ids: Sequence[str]) -> None:
    for rec in records:
        for mid in model_ids:
            if mid not in rec.responses:
                raise MissingModelResponse(rec.query_id, mid)


def build_bank(
    records: Sequence[QueryRecord],
    profiles: Sequence[ModelProfile],
    embedder,
    *,
    max_workers: int = 8,
) -> EmbeddingBank:
    """Embed a record corpus into a scoring bank.

    Parameters
    ----------
    records : answered queries; every record must cover every profile.
    profiles : ordered model registry; order fixes column order forever.
    embedder : callable ``text -> vector`` or object with ``.embed``.
        An optional ``input_char_limit`` attribute caps input length;
        longer texts are embedded truncated and flagged in the bank.
    max_workers : bound on concurrent embedding calls.

    Question and response embeddings are normalized in float64 and
    stored float32. Row order follows ``records``; assembly is keyed by
    (row, column) so the thread schedule never changes the result.
    """
    if not records:
        raise EmptyBank("cannot build a bank from zero records")
    if not profiles:
        raise ValueError("at least one model profile is required")
    ids = [p.model_id for p in profiles]
    if len(set(ids)) != len(ids):
        raise DuplicateModel(f"duplicate model_id in profiles: {ids}")
    qids = [r.query_id for r in records]
    if len(set(qids)) != len(qids):
        raise ValueError("duplicate query_id in records")
    _check_coverage(records, ids)

    fn, limit = _resolve_embed(embedder)
    n, m = len(records), len(profiles)

    # Probe one embedding on the calling thread to pin the dimension.
    first_vec, first_trunc, dim = _embed_unit(
        fn, limit, records[0].question_text, f"question {records[0].query_id!r}", None
    )

    eq = np.empty((n, dim), dtype=np.float32)
    er = np.empty((n, m, dim), dtype=np.float32)
    eq[0] = first_vec
    truncations: list[tuple[str, str | None]] = [(records[0].query_id, None)] if first_trunc else []

    jobs: list[tuple[int, int | None, str, str]] = []
    for i, rec in enumerate(records):
        if i > 0:
            jobs.append((i, None, rec.question_text, f"question {rec.query_id!r}"))
        for j, mid in enumerate(ids):
            jobs.append((i, j, rec.responses[mid], f"response {rec.query_id!r}/{mid!r}"))

    def work(job):
        i, j, text, what = job
        vec, trunc, _ = _embed_unit(fn, limit, text, what, dim)
        return i, j, vec, trunc

    workers = max(1, min(max_workers, len(jobs))) if jobs else 1
    if jobs:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for i, j, vec, trunc in pool.map(work, jobs):
                if j is None:
                    eq[i] = vec
                else:
                    er[i, j] = vec
                if trunc:
                    rec = records[i]
                    truncations.append((rec.query_id, None if j is None else ids[j]))

    capability = np.empty((m, n), dtype=np.uint8)
    costs = np.empty((n, m), dtype=np.uint32)
    for i, rec in enumerate(records):
        for j, mid in enumerate(ids):
            capability[j, i] = rec.correctness[mid]
            costs[i, j] = rec.completion_tokens[mid]

    truncations.sort(key=lambda t: (t[0], t[1] or ""))
    bank = EmbeddingBank(
        dim=dim,
        models=tuple(profiles),
        query_embeddings=eq,
        response_embeddings=er,
        capability=capability,
        costs=costs,
        records=tuple(records),
        truncations=tuple(truncations),
    )
    bank.validate()
    return bank


def extend_bank(
    bank: EmbeddingBank,
    new_records: Sequence[QueryRecord],
    new_profiles: Sequence[ModelProfile] = (),
    embedder=None,
    *,
    max_workers: int = 8,
) -> EmbeddingBank:
    """Grow a bank by rows (new queries), columns (new models), or both.

    Existing embeddings are reused byte-for-byte; only the delta is
    embedded. ``new_records`` entries whose query_id already exists in
    the bank act as patches supplying the new models' data for that
    row; entries with fresh query_ids become new rows and must cover
    the union of old and new models (patch data for a fresh row may
    also arrive via its own record). When adding models whose data is
    already present in the stored records, ``new_records`` may be
    empty.

    Raises DuplicateModel for an already-registered model_id and
    IncompleteCoverage listing every (query, model) cell still missing.
    """
    old_ids = list(bank.model_ids)
    add_ids = [p.model_id for p in new_profiles]
    for mid in add_ids:
        if mid in old_ids:
            raise DuplicateModel(f"model {mid!r} already registered")
    if len(set(add_ids)) != len(add_ids):
        raise DuplicateModel(f"duplicate model_id in new profiles: {add_ids}")
    if not new_records and not new_profiles:
        return bank

    known = {r.query_id for r in bank.records}
    patches: dict[str, QueryRecord] = {}
    fresh: list[QueryRecord] = []
    for rec in new_records:
        if rec.query_id in known:
            if rec.query_id in patches:
                raise ValueError(f"duplicate patch for query {rec.query_id!r}")
            patches[rec.query_id] = rec
        else:
            fresh.append(rec)
    fids = [r.query_id for r in fresh]
    if len(set(fids)) != len(fids):
        raise ValueError("duplicate query_id in new records")

    all_ids = old_ids + add_ids

    def lookup(rec: QueryRecord, mid: str) -> QueryRecord | None:
        """Record that actually holds (rec.query_id, mid), patch first."""
        patch = patches.get(rec.query_id)
        if patch is not None and mid in patch.responses:
            return patch
        if mid in rec.responses:
            return rec
        return None

    missing: list[tuple[str, str]] = []
    for rec in bank.records:
        for mid in add_ids:
            if lookup(rec, mid) is None:
                missing.append((rec.query_id, mid))
    for rec in fresh:
        for mid in all_ids:
            if mid not in rec.responses:
                missing.append((rec.query_id, mid))
    if missing:
        raise IncompleteCoverage(missing)

    fn, limit = (None, None)
    needs_embedding = bool(fresh) or (bool(add_ids) and bank.n_records > 0)
    if needs_embedding:
        if embedder is None:
            raise ValueError("embedder required when extension adds embeddings")
        fn, limit = _resolve_embed(embedder)

    n_old, m_old, d = bank.n_records, bank.n_models, bank.dim
    n_new, m_new = n_old + len(fresh), m_old + len(add_ids)

    eq = np.empty((n_new, d), dtype=np.float32)
    er = np.empty((n_new, m_new, d), dtype=np.float32)
    eq[:n_old] = bank.query_embeddings
    er[:n_old, :m_old] = bank.response_embeddings
    truncations = list(bank.truncations)

    jobs: list[tuple[int, int | None, str, str]] = []
    for i, rec in enumerate(bank.records):
        for dj, mid in enumerate(add_ids):
            src = lookup(rec, mid)
            jobs.append((i, m_old + dj, src.responses[mid], f"response {rec.query_id!r}/{mid!r}"))
    for di, rec in enumerate(fresh):
        i = n_old + di
        jobs.append((i, None, rec.question_text, f"question {rec.query_id!r}"))
        for j, mid in enumerate(all_ids):
            jobs.append((i, j, rec.responses[mid], f"response {rec.query_id!r}/{mid!r}"))

    merged_records = list(bank.records) + fresh

    def work(job):
        i, j, text, what = job
        vec, trunc, _ = _embed_unit(fn, limit, text, what, d)
        return i, j, vec, trunc

    if jobs:
        with ThreadPoolExecutor(max_workers=max(1, min(max_workers, len(jobs)))) as pool:
            for i, j, vec, trunc in pool.map(work, jobs):
                if j is None:
                    eq[i] = vec
                else:
                    er[i, j] = vec
                if trunc:
                    rec = merged_records[i]
                    truncations.append((rec.query_id, None if j is None else all_ids[j]))

    capability = np.empty((m_new, n_new), dtype=np.uint8)
    costs = np.empty((n_new, m_new), dtype=np.uint32)
    capability[:m_old, :n_old] = bank.capability
    costs[:n_old, :m_old] = bank.costs
    for i, rec in enumerate(bank.records):
        for dj, mid in enumerate(add_ids):
            src = lookup(rec, mid)
            capability[m_old + dj, i] = src.correctness[mid]
            costs[i, m_old + dj] = src.completion_tokens[mid]
    for di, rec in enumerate(fresh):
        i = n_old + di
        for j, mid in enumerate(all_ids):
            capability[j, i] = rec.correctness[mid]
            costs[i, j] = rec.completion_tokens[mid]

    # Stored records absorb patch data so a later save keeps everything.
    final_records: list[QueryRecord] = []
    for rec in bank.records:
        patch = patches.get(rec.query_id)
        if patch is None:
            final_records.append(rec)
        else:
            final_records.append(
                QueryRecord(
                    query_id=rec.query_id,
                    question_text=rec.question_text,
                    label_text=rec.label_text,
                    responses={**rec.responses, **patch.responses},
                    correctness={**rec.correctness, **patch.correctness},
                    completion_tokens={**rec.completion_tokens, **patch.completion_tokens},
                    source_tag=rec.source_tag,
                )
            )
    final_records.extend(fresh)

    truncations.sort(key=lambda t: (t[0], t[1] or ""))
    out = EmbeddingBank(
        dim=d,
        models=tuple(bank.models) + tuple(new_profiles),
        query_embeddings=eq,
        response_embeddings=er,
        capability=capability,
        costs=costs,
        records=tuple(final_records),
        truncations=tuple(dict.fromkeys(truncations)),
    )
    out.validate()
    return out


# ---- persistence ----

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_bank(bank: EmbeddingBank, path: str | Path) -> None:
    """Write a bank directory; the manifest lands last so a crashed
    write is detectable as a malformed bank rather than a stale one."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)

    (root / "eq.f32").write_bytes(np.ascontiguousarray(bank.query_embeddings, dtype="<f4").tobytes())
    (root / "er.f32").write_bytes(np.ascontiguousarray(bank.response_embeddings, dtype="<f4").tobytes())
    (root / "capability.bits").write_bytes(np.packbits(bank.capability.reshape(-1)).tobytes())
    (root / "costs.u32").write_bytes(np.ascontiguousarray(bank.costs, dtype="<u4").tobytes())
    with open(root / "records.jsonl", "w", encoding="utf-8") as f:
        for rec in bank.records:
            f.write(json.dumps(rec.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")

    manifest = {
        "format_version": FORMAT_VERSION,
        "dim": bank.dim,
        "n_records": bank.n_records,
        "n_models": bank.n_models,
        "models": [p.to_dict() for p in bank.models],
        "truncations": [[q, m] for q, m in bank.truncations],
        "sidecars": {
            name: {"bytes": (root / name).stat().st_size, "sha256": _sha256(root / name)}
            for name in _SIDECARS
        },
    }
    with open(root / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_bank(path: str | Path) -> EmbeddingBank:
    """Read a bank directory back, verifying version, sizes and digests.

    Raises MalformedBank when the directory is not a bank at all,
    FormatVersionMismatch for a future or unknown format,
    TruncatedFile when a sidecar is missing bytes, and
    ChecksumMismatch when content does not match the manifest.
    """
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise MalformedBank(f"{root} has no manifest.json")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedBank(f"unreadable manifest in {root}: {exc}") from exc

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"bank format {version!r}, this build reads {FORMAT_VERSION}")

    try:
        dim = int(manifest["dim"])
        n = int(manifest["n_records"])
        m = int(manifest["n_models"])
        models = tuple(ModelProfile.from_dict(d) for d in manifest["models"])
        sidecars = manifest["sidecars"]
        truncations = tuple((q, mid) for q, mid in manifest.get("truncations", []))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedBank(f"manifest missing or malformed field: {exc}") from exc
    if len(models) != m:
        raise MalformedBank(f"manifest lists {len(models)} models but n_models={m}")

    expected_bytes = {
        "eq.f32": n * dim * 4,
        "er.f32": n * m * dim * 4,
        "capability.bits": (m * n + 7) // 8,
        "costs.u32": n * m * 4,
    }
    blobs: dict[str, bytes] = {}
    for name in _SIDECARS:
        fpath = root / name
        if name not in sidecars:
            raise MalformedBank(f"manifest lacks sidecar entry for {name}")
        if not fpath.is_file():
            raise TruncatedFile(f"{name} is missing from {root}")
        data = fpath.read_bytes()
        want = expected_bytes.get(name)
        if want is not None and len(data) < want:
            raise TruncatedFile(f"{name}: {len(data)} bytes on disk, {want} expected")
        digest = hashlib.sha256(data).hexdigest()
        if digest != sidecars[name]["sha256"]:
            raise ChecksumMismatch(f"{name}: digest {digest[:12]}… does not match manifest")
        if want is not None and len(data) != want:
            raise ChecksumMismatch(f"{name}: {len(data)} bytes on disk, {want} expected")
        blobs[name] = data

    eq = np.frombuffer(blobs["eq.f32"], dtype="<f4").reshape(n, dim).astype(np.float32)
    er = np.frombuffer(blobs["er.f32"], dtype="<f4").reshape(n, m, dim).astype(np.float32)
    capability = (
        np.unpackbits(np.frombuffer(blobs["capability.bits"], dtype=np.uint8), count=m * n)
        .reshape(m, n)
        .astype(np.uint8)
    )
    costs = np.frombuffer(blobs["costs.u32"], dtype="<u4").reshape(n, m).astype(np.uint32)
    records = tuple(
        QueryRecord.from_dict(json.loads(line))
        for line in blobs["records.jsonl"].decode("utf-8").splitlines()
        if line.strip()
    )
    if len(records) != n:
        raise ChecksumMismatch(f"records.jsonl holds {len(records)} rows, manifest says {n}")

    bank = EmbeddingBank(
        dim=dim,
        models=models,
        query_embeddings=eq,
        response_embeddings=er,
        capability=capability,
        costs=costs,
        records=records,
        truncations=truncations,
    )
    bank.validate()
    return bank
