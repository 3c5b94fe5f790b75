"""Replay-based evaluation: accuracy, weight ablations, switch audits,
pool-scaling sweeps.

Everything here grades the router against recorded history rather than
live traffic. A replay fixture supplies every model call; grading uses
either the recorded per-model correctness bits (plus recorded judgments
for aggregated answers) or exact label match. Reports serialize to
stable bytes so two runs of the same evaluation diff clean.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np

from .bank import EmbeddingBank, ModelProfile, QueryRecord, build_bank
from .errors import FixtureIncomplete
from .gateway import CostLedger, Gateway
from .orchestrator import (
    FAILURE_ANNOTATION_PREFIXES,
    VERDICT_ROUTED,
    OrchestratorConfig,
    RoutingDecision,
    infer,
)
from .scoring import MixedWeights, filter_support, fine_scores

MODE_QUERY = "query"
MODE_QUERY_RESPONSE = "query+response"
MODE_FULL = "full"
ALL_MODES = (MODE_QUERY, MODE_QUERY_RESPONSE, MODE_FULL)

TIER_EASY = "EASY"
TIER_MEDIUM = "MEDIUM"
TIER_HARD = "HARD"
ALL_TIERS = (TIER_EASY, TIER_MEDIUM, TIER_HARD)

GRADING_RECORDED = "recorded"
GRADING_EXACT = "exact"


# ---- corpus split ----

def split_records(
    records: Sequence[QueryRecord],
    *,
    train_fraction: float = 0.7,
    seed: int = 42,
) -> tuple[list[QueryRecord], list[QueryRecord]]:
    """Shuffle a corpus into (train, test) with a fixed-seed permutation.

    Records are presorted by query_id before shuffling, so the split
    depends only on the record set, never on input order. The train
    side takes the first ceil(train_fraction * N) of the permutation;
    the fraction is applied in exact arithmetic so boundary counts
    never drift with float rounding.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    ordered = sorted(records, key=lambda r: r.query_id)
    n = len(ordered)
    n_train = math.ceil(Fraction(str(train_fraction)) * n)
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [ordered[i] for i in perm]
    return shuffled[:n_train], shuffled[n_train:]


# ---- replay plumbing ----

def _fixture_source(gateway, attr: str):
    """Walk gateway wrappers down to a backend exposing ``attr``."""
    node = gateway
    while node is not None:
        if hasattr(node, attr):
            return node
        node = getattr(node, "backend", None) or getattr(node, "inner", None)
    return None


def _preflight_chats(bank: EmbeddingBank, records: Sequence[QueryRecord], gateway) -> None:
    backend = _fixture_source(gateway, "has_chat")
    if backend is None:
        return
    missing = [
        (rec.query_id, mid)
        for rec in records
        for mid in bank.model_ids
        if not backend.has_chat(mid, rec.question_text)
    ]
    if missing:
        raise FixtureIncomplete(missing)


def _canon(text: str) -> str:
    return " ".join(text.split()).casefold()


def _grade(record: QueryRecord, decision: RoutingDecision, grading: str, gateway) -> int:
    if grading == GRADING_EXACT:
        return int(_canon(decision.final_response) == _canon(record.label_text))
    if decision.verdict == VERDICT_ROUTED:
        mid = decision.final_aggregatee_ids[0]
        bit = record.correctness.get(mid)
        if bit is None:
            raise FixtureIncomplete([(record.query_id, mid)])
        return int(bit)
    source = _fixture_source(gateway, "judgment")
    verdict_bit = (
        source.judgment(record.query_id, decision.aggregator_id, decision.final_aggregatee_ids)
        if source is not None
        else None
    )
    if verdict_bit is None:
        detail = "judgment:{}:{}".format(
            decision.aggregator_id, ",".join(sorted(decision.final_aggregatee_ids))
        )
        raise FixtureIncomplete([(record.query_id, detail)])
    return int(verdict_bit)


def _check_strict(record: QueryRecord, decision: RoutingDecision) -> None:
    bad = [
        a for a in decision.annotations if a.startswith(FAILURE_ANNOTATION_PREFIXES)
    ]
    if bad:
        raise FixtureIncomplete([(record.query_id, a) for a in bad])


# ---- evaluation ----

@dataclass(frozen=True)
class EvalRow:
    query_id: str
    source_tag: str
    verdict: str
    aggregator_id: str
    model_ids: tuple[str, ...]
    correct: int
    microdollars: int
    truncated: bool
    annotations: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "source_tag": self.source_tag,
            "verdict": self.verdict,
            "aggregator_id": self.aggregator_id,
            "model_ids": list(self.model_ids),
            "correct": self.correct,
            "microdollars": self.microdollars,
            "truncated": self.truncated,
            "annotations": list(self.annotations),
        }


@dataclass(frozen=True)
class EvalReport:
    """Accuracy, verdict mix and exact cost over one test set."""

    grading: str
    router_only: bool
    rows: tuple[EvalRow, ...]

    @property
    def n_queries(self) -> int:
        return len(self.rows)

    @property
    def n_correct(self) -> int:
        return sum(r.correct for r in self.rows)

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_queries if self.rows else 0.0

    def verdict_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for row in self.rows:
            out[row.verdict] = out.get(row.verdict, 0) + 1
        return dict(sorted(out.items()))

    def per_tag(self) -> dict[str, dict]:
        grouped: dict[str, list[EvalRow]] = {}
        for row in self.rows:
            grouped.setdefault(row.source_tag, []).append(row)
        return {
            tag: {
                "n": len(rows),
                "correct": sum(r.correct for r in rows),
                "accuracy": sum(r.correct for r in rows) / len(rows),
            }
            for tag, rows in sorted(grouped.items())
        }

    def total_microdollars(self) -> int:
        return sum(r.microdollars for r in self.rows)

    def to_dict(self) -> dict:
        total = self.total_microdollars()
        return {
            "grading": self.grading,
            "router_only": self.router_only,
            "n_queries": self.n_queries,
            "n_correct": self.n_correct,
            "accuracy": self.accuracy,
            "verdicts": self.verdict_counts(),
            "per_source_tag": self.per_tag(),
            "total_microdollars": total,
            "total_usd": f"{total / 1_000_000:.6f}",
            "rows": [r.to_dict() for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        lines = ["query_id,source_tag,verdict,aggregator_id,model_ids,correct,microdollars,truncated"]
        for r in self.rows:
            lines.append(
                f"{r.query_id},{r.source_tag},{r.verdict},{r.aggregator_id},"
                f"{';'.join(r.model_ids)},{r.correct},{r.microdollars},{int(r.truncated)}"
            )
        return "\n".join(lines) + "\n"


def _run_queries(
    bank: EmbeddingBank,
    records: Sequence[QueryRecord],
    config: OrchestratorConfig,
    gateway,
    *,
    workers: int,
    router_only: bool = False,
    explain: bool = False,
) -> list[tuple[QueryRecord, RoutingDecision, CostLedger]]:
    """Route every record; decisions and ledgers come back in ascending
    query_id order and per-query costs merge into the gateway ledger in
    that same order, so worker count never shows in any output."""
    ordered = sorted(records, key=lambda r: r.query_id)
    ids = [r.query_id for r in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate query_id in test records")
    ledgers = [CostLedger() for _ in ordered]

    def run(pos: int) -> RoutingDecision:
        rec = ordered[pos]
        view = gateway.with_ledger(ledgers[pos])
        return infer(
            rec.question_text, bank, config, view,
            query_id=rec.query_id, router_only=router_only, explain=explain,
        )

    with ThreadPoolExecutor(max_workers=max(1, min(workers, len(ordered)))) as pool:
        decisions = list(pool.map(run, range(len(ordered))))
    out = []
    for rec, decision, ledger in zip(ordered, decisions, ledgers):
        gateway.ledger.merge(ledger)
        out.append((rec, decision, ledger))
    return out


def evaluate(
    bank: EmbeddingBank,
    records: Sequence[QueryRecord],
    config: OrchestratorConfig,
    gateway,
    *,
    grading: str = GRADING_RECORDED,
    router_only: bool = False,
    strict: bool = True,
    workers: int = 4,
    on_decision: Callable[[QueryRecord, RoutingDecision, int], None] | None = None,
) -> EvalReport:
    """Route a test set and grade every answer.

    grading "recorded" scores a routed answer by the chosen model's
    recorded correctness bit and an aggregated answer by a recorded
    judgment (missing entries raise FixtureIncomplete); "exact"
    compares the final text to the record label, whitespace and case
    folded. ``strict`` refuses decisions that silently degraded after
    a failed call; turn it off for live backends where retries losing
    is an accepted outcome. Replay runs are preflighted so a fixture
    gap surfaces before any call is made.
    """
    if not records:
        raise ValueError("cannot evaluate an empty test set")
    if grading not in (GRADING_RECORDED, GRADING_EXACT):
        raise ValueError(f"unknown grading {grading!r}")
    _preflight_chats(bank, sorted(records, key=lambda r: r.query_id), gateway)

    rows: list[EvalRow] = []
    for rec, decision, ledger in _run_queries(
        bank, records, config, gateway, workers=workers, router_only=router_only
    ):
        if strict:
            _check_strict(rec, decision)
        correct = _grade(rec, decision, grading, gateway)
        rows.append(
            EvalRow(
                query_id=rec.query_id,
                source_tag=rec.source_tag,
                verdict=decision.verdict,
                aggregator_id=decision.aggregator_id,
                model_ids=tuple(decision.final_aggregatee_ids),
                correct=correct,
                microdollars=ledger.total_microdollars(),
                truncated=decision.truncated,
                annotations=tuple(decision.annotations),
            )
        )
        if on_decision is not None:
            on_decision(rec, decision, correct)
    return EvalReport(grading=grading, router_only=router_only, rows=tuple(rows))


# ---- similarity-term ablation ----

def mode_weights(weights: MixedWeights, mode: str) -> MixedWeights:
    """Weights for an ablation mode; active terms renormalize to sum 1."""
    if mode == MODE_FULL:
        return weights
    if mode == MODE_QUERY:
        return replace(weights, epsilon=1.0, sigma=0.0, delta=0.0)
    if mode == MODE_QUERY_RESPONSE:
        live = weights.epsilon + weights.sigma
        if live <= 0:
            raise ValueError("query and response weights are both zero")
        return replace(
            weights, epsilon=weights.epsilon / live, sigma=weights.sigma / live, delta=0.0
        )
    raise ValueError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class DeviationRow:
    query_id: str
    source_tag: str
    deviations: Mapping[str, float]

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "source_tag": self.source_tag,
            "deviations": {k: float(v) for k, v in sorted(self.deviations.items())},
        }


@dataclass(frozen=True)
class DeviationReport:
    """How far predicted per-model correctness sits from recorded truth.

    Per query and mode: rebuild the mixed similarities from the raw
    term vectors under the mode's weights, re-filter, re-score, and
    read each model's score as a fraction of the total filtered weight
    (clipped to [0, 1]). The deviation is the L1 gap to the recorded
    0/1 bits, scaled to 0..100 and averaged over models.
    """

    modes: tuple[str, ...]
    rows: tuple[DeviationRow, ...]

    def mean(self, mode: str) -> float:
        if mode not in self.modes:
            raise ValueError(f"mode {mode!r} not in report")
        return sum(r.deviations[mode] for r in self.rows) / len(self.rows)

    def means(self) -> dict[str, float]:
        return {mode: self.mean(mode) for mode in self.modes}

    def to_dict(self) -> dict:
        return {
            "modes": list(self.modes),
            "means": {k: float(v) for k, v in sorted(self.means().items())},
            "rows": [r.to_dict() for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _record_bits(bank: EmbeddingBank, record: QueryRecord) -> np.ndarray:
    missing = [(record.query_id, mid) for mid in bank.model_ids if mid not in record.correctness]
    if missing:
        raise FixtureIncomplete(missing)
    return np.array([record.correctness[mid] for mid in bank.model_ids], dtype=np.float64)


def deviation_report(
    bank: EmbeddingBank,
    records: Sequence[QueryRecord],
    config: OrchestratorConfig,
    gateway,
    *,
    modes: Sequence[str] = ALL_MODES,
    workers: int = 4,
) -> DeviationReport:
    """Ablate the mixed-similarity terms and measure profile deviation.

    One routed pass per query collects the raw term vectors; every mode
    is then recomputed offline from those vectors, so all modes see the
    identical candidate responses.
    """
    if not records:
        raise ValueError("cannot measure deviation on an empty test set")
    for mode in modes:
        if mode not in ALL_MODES:
            raise ValueError(f"unknown mode {mode!r}")
    _preflight_chats(bank, sorted(records, key=lambda r: r.query_id), gateway)

    rows: list[DeviationRow] = []
    for rec, decision, _ledger in _run_queries(
        bank, records, config, gateway, workers=workers, router_only=True, explain=True
    ):
        bits = _record_bits(bank, rec)
        support = decision.support
        q = decision.scores.query_term
        r = decision.scores.response_term
        c = decision.scores.cost_term
        k_eff = len(decision.candidate_responses)
        devs: dict[str, float] = {}
        for mode in modes:
            w = mode_weights(config.weights, mode)
            mixed = w.epsilon * k_eff * q + w.sigma * r + w.delta * c
            filtered = filter_support(support, mixed, w.beta)
            fine = fine_scores(bank, support, filtered, mixed)
            denom = float(mixed[filtered].sum())
            if denom > 0:
                frac = np.clip(fine / denom, 0.0, 1.0)
            else:
                frac = np.zeros(bank.n_models)
            devs[mode] = 100.0 * float(np.abs(frac - bits).sum()) / bank.n_models
        rows.append(DeviationRow(rec.query_id, rec.source_tag, devs))
    return DeviationReport(modes=tuple(modes), rows=tuple(rows))


# ---- switch audit ----

def assign_tier(correct_fraction: float) -> str:
    """Difficulty tier from the fraction of pool models that were right."""
    if correct_fraction > 0.8:
        return TIER_EASY
    if correct_fraction < 0.3:
        return TIER_HARD
    return TIER_MEDIUM


@dataclass(frozen=True)
class AuditRow:
    query_id: str
    source_tag: str
    tier: str
    verdict: str
    n_candidates: int
    n_final: int

    @property
    def n_removed(self) -> int:
        return self.n_candidates - self.n_final

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "source_tag": self.source_tag,
            "tier": self.tier,
            "verdict": self.verdict,
            "n_candidates": self.n_candidates,
            "n_final": self.n_final,
            "n_removed": self.n_removed,
        }


@dataclass(frozen=True)
class SwitchAuditReport:
    """Per-difficulty-tier view of how hard the switch prunes."""

    rows: tuple[AuditRow, ...]

    def tier_stats(self) -> dict[str, dict | None]:
        out: dict[str, dict | None] = {}
        for tier in ALL_TIERS:
            rows = [r for r in self.rows if r.tier == tier]
            if not rows:
                out[tier] = None
                continue
            n = len(rows)
            out[tier] = {
                "n": n,
                "routed_pct": 100.0 * sum(r.verdict == VERDICT_ROUTED for r in rows) / n,
                "mean_candidates": sum(r.n_candidates for r in rows) / n,
                "mean_remained": sum(r.n_final for r in rows) / n,
                "mean_removed": sum(r.n_removed for r in rows) / n,
            }
        return out

    def to_dict(self) -> dict:
        return {"tiers": self.tier_stats(), "rows": [r.to_dict() for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def switch_audit(
    bank: EmbeddingBank,
    records: Sequence[QueryRecord],
    config: OrchestratorConfig,
    gateway,
    *,
    workers: int = 4,
) -> SwitchAuditReport:
    """Route a test set and tally switch behavior by difficulty tier.

    Tiering uses the recorded correctness bits of the test records;
    pruning compares the candidate set against the final aggregatees.
    """
    if not records:
        raise ValueError("cannot audit an empty test set")
    _preflight_chats(bank, sorted(records, key=lambda r: r.query_id), gateway)
    rows = []
    for rec, decision, _ledger in _run_queries(
        bank, records, config, gateway, workers=workers
    ):
        bits = _record_bits(bank, rec)
        rows.append(
            AuditRow(
                query_id=rec.query_id,
                source_tag=rec.source_tag,
                tier=assign_tier(float(bits.mean())),
                verdict=decision.verdict,
                n_candidates=len(decision.candidate_ids),
                n_final=len(decision.final_aggregatee_ids),
            )
        )
    return SwitchAuditReport(rows=tuple(rows))


# ---- pool scaling ----

@dataclass(frozen=True)
class SweepPoint:
    size: int
    model_ids: tuple[str, ...]
    report: EvalReport

    def to_dict(self) -> dict:
        return {"size": self.size, "model_ids": list(self.model_ids), "report": self.report.to_dict()}


@dataclass(frozen=True)
class SweepReport:
    points: tuple[SweepPoint, ...]

    def to_dict(self) -> dict:
        return {"points": [p.to_dict() for p in self.points]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def scaling_sweep(
    bank_records: Sequence[QueryRecord],
    test_records: Sequence[QueryRecord],
    profiles: Sequence[ModelProfile],
    config: OrchestratorConfig,
    backend,
    *,
    sizes: Sequence[int] | None = None,
    grading: str = GRADING_RECORDED,
    router_only: bool = False,
    strict: bool = True,
    workers: int = 4,
) -> SweepReport:
    """Evaluate growing prefixes of the model pool.

    For each size s the first s profiles form the pool: the bank is
    rebuilt from the same records restricted to that registry and the
    test set re-evaluated, so the only moving part is pool membership.
    """
    ladder = tuple(sizes) if sizes is not None else tuple(range(1, len(profiles) + 1))
    for s in ladder:
        if not 1 <= s <= len(profiles):
            raise ValueError(f"pool size {s} outside [1, {len(profiles)}]")
    points = []
    for s in ladder:
        pool = list(profiles[:s])
        gw = Gateway(pool, backend)
        bank = build_bank(bank_records, pool, gw)
        report = evaluate(
            bank, test_records, config, gw,
            grading=grading, router_only=router_only, strict=strict, workers=workers,
        )
        points.append(SweepPoint(size=s, model_ids=tuple(p.model_id for p in pool), report=report))
    return SweepReport(points=tuple(points))
