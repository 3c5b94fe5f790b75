"""Routing pipeline: from one query to a routed or aggregated answer.

The flow for one query:

1. Embed the query; pick the support rows and coarse per-model priors.
2. The coarse arg-max becomes the designated aggregator; the coarse
   top-K become candidates and each answers the query once.
3. Candidate responses and costs refine the row weights (mixed
   similarity), the filtered rows re-score every model (fine scores).
4. The adaptive switch keeps the fine top-K members that also clear a
   relative-score gate. One survivor routes its answer straight
   through; several survivors have their answers fused by the
   aggregator under a fixed prompt template.

Failure handling favors degrading over dying: a failed candidate drops
out of the blend, a failed aggregator call falls back to the best
single reference, and all-zero scores fall back to the coarse
aggregator. Only losing every candidate aborts.

Call budget: at most K candidate calls, one fresh fetch for an
aggregatee the candidate phase did not cover, and one aggregator call.
When the switch picks several models outside the candidate set (only
constructible adversarially), all but the best-scored one are dropped
to honor the budget, with an annotation on the decision.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .bank import EmbeddingBank, normalize_embedding
from .errors import (
    ConfigError,
    DegenerateScores,
    EmbedderFailure,
    GatewayError,
    GatewayUnavailable,
    KOutOfRange,
    TemplateMissingPlaceholder,
    ZeroVector,
)
from .gateway import ChatResult, CostLedger
from .scoring import (
    MixedWeights,
    ScoreReport,
    SupportSet,
    coarse_scores,
    cost_similarity,
    filter_support,
    fine_scores,
    mixed_similarity,
    response_similarity,
    select_support,
)

VERDICT_ROUTED = "ROUTED"
VERDICT_AGGREGATED = "AGGREGATED"

# Annotations starting with one of these mark a degraded decision
# (a call failed and the pipeline worked around it). Strict evaluation
# refuses to grade such decisions.
FAILURE_ANNOTATION_PREFIXES = ("candidate ", "fresh fetch for ", "aggregator call failed")

AGGREGATION_TEMPLATE_VERSION = "v1"

DEFAULT_AGGREGATION_TEMPLATE = (
    "You have been provided with a question and a set of reference answers "
    "proposed by different assistants. Synthesize the single best answer to "
    "the question: keep well-supported content, correct mistakes, and do not "
    "mention the references or this instruction. Reply with the final answer "
    "only.\n"
    "\n"
    "Question:\n"
    "{question}\n"
    "\n"
    "{references}\n"
)


def _check_template(template: str) -> None:
    for placeholder in ("{question}", "{references}"):
        if placeholder not in template:
            raise TemplateMissingPlaceholder(placeholder)


@dataclass(frozen=True)
class OrchestratorConfig:
    """Tunable knobs of the routing pipeline with their stock defaults."""

    k: int = 3
    n_base: int = 50
    weights: MixedWeights = field(default_factory=MixedWeights)
    tolerance: float = 0.95
    switch_threshold: float = 0.8
    truncation_token_budget: int = 13000
    aggregation_prompt_template: str = DEFAULT_AGGREGATION_TEMPLATE

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.n_base < 1:
            raise ValueError(f"n_base must be >= 1, got {self.n_base}")
        if not 0.0 <= self.tolerance <= 1.0:
            raise ValueError(f"tolerance must be in [0, 1], got {self.tolerance}")
        if not 0.0 <= self.switch_threshold <= 1.0:
            raise ValueError(f"switch_threshold must be in [0, 1], got {self.switch_threshold}")
        if self.truncation_token_budget < 1:
            raise ValueError("truncation_token_budget must be >= 1")
        _check_template(self.aggregation_prompt_template)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "n_base": self.n_base,
            "epsilon": self.weights.epsilon,
            "sigma": self.weights.sigma,
            "delta": self.weights.delta,
            "beta": self.weights.beta,
            "tolerance": self.tolerance,
            "switch_threshold": self.switch_threshold,
            "truncation_token_budget": self.truncation_token_budget,
            "aggregation_prompt_template": self.aggregation_prompt_template,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "OrchestratorConfig":
        base = cls().to_dict()
        unknown = set(data) - set(base)
        if unknown:
            raise ConfigError(f"unknown orchestrator option(s): {sorted(unknown)}")
        merged = {**base, **dict(data)}
        weights = MixedWeights(
            epsilon=float(merged["epsilon"]),
            sigma=float(merged["sigma"]),
            delta=float(merged["delta"]),
            beta=float(merged["beta"]),
        )
        return cls(
            k=int(merged["k"]),
            n_base=int(merged["n_base"]),
            weights=weights,
            tolerance=float(merged["tolerance"]),
            switch_threshold=float(merged["switch_threshold"]),
            truncation_token_budget=int(merged["truncation_token_budget"]),
            aggregation_prompt_template=str(merged["aggregation_prompt_template"]),
        )

    def with_overrides(self, overrides: Mapping) -> "OrchestratorConfig":
        if not overrides:
            return self
        return self.from_dict({**self.to_dict(), **dict(overrides)})


@dataclass(frozen=True)
class AggregateeResponse:
    """One reference answer headed into aggregation."""

    model_id: str
    text: str
    completion_tokens: int
    fine_score: float


@dataclass
class RoutingDecision:
    """Full trace of one routed query; serializes to plain JSON."""

    query_id: str
    query_text: str
    support: SupportSet
    scores: ScoreReport
    aggregator_id: str
    candidate_ids: list[str]
    candidate_responses: dict[str, ChatResult]
    final_aggregatee_ids: list[str]
    verdict: str
    final_response: str
    truncated: bool
    annotations: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "query_text": self.query_text,
            "support": {
                "indices": [int(i) for i in self.support.indices],
                "similarities": [float(s) for s in self.support.similarities],
                "base_size": self.support.base_size,
                "tolerance": self.support.tolerance,
                "threshold": self.support.threshold,
            },
            "scores": self.scores.to_dict(),
            "aggregator_id": self.aggregator_id,
            "candidate_ids": list(self.candidate_ids),
            "candidate_responses": {
                mid: {
                    "text": r.text,
                    "prompt_tokens": r.prompt_tokens,
                    "completion_tokens": r.completion_tokens,
                }
                for mid, r in self.candidate_responses.items()
            },
            "final_aggregatee_ids": list(self.final_aggregatee_ids),
            "verdict": self.verdict,
            "final_response": self.final_response,
            "truncated": self.truncated,
            "annotations": list(self.annotations),
        }


# ---- selection primitives ----

def select_aggregator(coarse: np.ndarray) -> int:
    """Index of the coarse maximum; ties go to the lowest index."""
    g = np.asarray(coarse, dtype=np.float64)
    if g.size == 0:
        raise ValueError("no models to select from")
    return int(np.argmax(g))


def _top_k(values: np.ndarray, k: int) -> list[int]:
    order = np.argsort(-np.asarray(values, dtype=np.float64), kind="stable")
    return [int(i) for i in order[:k]]


def select_candidates(coarse: np.ndarray, k: int) -> list[int]:
    """Top-k coarse indices, descending score with ascending-index ties.

    Ties at the boundary are truncated to exactly k entries.
    """
    g = np.asarray(coarse, dtype=np.float64)
    if not 1 <= k <= g.size:
        raise KOutOfRange(f"k={k} outside [1, {g.size}]")
    return _top_k(g, k)


def adaptive_switch(fine: np.ndarray, k: int, threshold: float) -> list[int]:
    """Aggregatee indices: fine top-k members whose score stays within
    ``threshold`` of the maximum (as a ratio). The arg-max always
    qualifies, so the result holds between 1 and k indices, ordered by
    descending score with ascending-index ties."""
    g = np.asarray(fine, dtype=np.float64)
    if not 1 <= k <= g.size:
        raise KOutOfRange(f"k={k} outside [1, {g.size}]")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    top = float(g.max())
    if top <= 0.0:
        raise DegenerateScores("all fine scores are zero")
    return [i for i in _top_k(g, k) if g[i] / top >= threshold]


def truncate_aggregatees(
    aggregatees: Sequence[AggregateeResponse], budget: int
) -> tuple[list[AggregateeResponse], bool]:
    """Drop the weakest of exactly three references when their token sum
    exceeds the budget; any other shape passes through untouched."""
    entries = list(aggregatees)
    if len(entries) == 3 and sum(e.completion_tokens for e in entries) > budget:
        return entries[:2], True
    return entries, False


def assemble_aggregation_prompt(
    question: str,
    responses: Sequence[str],
    template: str = DEFAULT_AGGREGATION_TEMPLATE,
) -> str:
    """Fill the aggregation template with anonymized, enumerated references.

    Reference order is the caller's (descending fine score); model
    identities never appear. Output is byte-deterministic.
    """
    if len(responses) < 2:
        raise ValueError("aggregation needs at least two responses")
    _check_template(template)
    references = "\n\n".join(
        f"Reference {i}:\n{text}" for i, text in enumerate(responses, start=1)
    )
    return template.replace("{question}", question).replace("{references}", references)


# ---- inference ----

def _deterministic_query_id(query_text: str) -> str:
    return "q-" + hashlib.sha256(query_text.encode("utf-8")).hexdigest()[:16]


def _clip_for_embedding(text: str, limit: int | None) -> str:
    if limit is not None and len(text) > limit:
        return text[:limit]
    return text


def infer(
    query_text: str,
    bank: EmbeddingBank,
    config: OrchestratorConfig,
    gateway,
    *,
    query_id: str | None = None,
    router_only: bool = False,
    explain: bool = False,
    max_parallel: int = 4,
) -> RoutingDecision:
    """Route one query through the full pipeline.

    With a replay gateway and a fixed config this is a pure function of
    (query, bank): candidate fan-out runs on threads but results and
    ledger entries are reassembled in candidate order, so parallelism
    never shows in the output. ``router_only`` skips the switch and
    commits to the fine arg-max. ``explain`` keeps the raw per-term
    similarity vectors on the decision's score report.
    """
    qid = query_id if query_id else _deterministic_query_id(query_text)
    annotations: list[str] = []
    limit = gateway.input_char_limit

    embed_text = _clip_for_embedding(query_text, limit)
    if embed_text != query_text:
        annotations.append("query text truncated to the embedder input limit")
    try:
        e = normalize_embedding(gateway.embed(embed_text))
    except ZeroVector as exc:
        raise EmbedderFailure(f"query {qid!r}", exc) from exc
    if e.shape[0] != bank.dim:
        raise EmbedderFailure(f"query {qid!r}: embedder dim {e.shape[0]} != bank dim {bank.dim}")

    support = select_support(bank, e, config.n_base, config.tolerance)
    coarse = coarse_scores(bank, support)
    aggregator_idx = select_aggregator(coarse)
    aggregator_id = bank.models[aggregator_idx].model_id
    k = min(config.k, bank.n_models)
    candidate_idx = select_candidates(coarse, k)
    candidate_ids = [bank.models[j].model_id for j in candidate_idx]

    # fan out candidate calls; each gets a private ledger merged in order
    sub_ledgers = [CostLedger() for _ in candidate_idx]
    outcomes: dict[int, tuple[ChatResult, np.ndarray]] = {}

    def run_candidate(pos: int):
        mid = candidate_ids[pos]
        view = gateway.with_ledger(sub_ledgers[pos])
        chat = view.chat(mid, query_text)
        vec = normalize_embedding(view.embed(_clip_for_embedding(chat.text, limit)))
        return chat, vec

    workers = max(1, min(max_parallel, len(candidate_idx)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {pos: pool.submit(run_candidate, pos) for pos in range(len(candidate_idx))}
        for pos, future in futures.items():
            try:
                outcomes[pos] = future.result()
            except (GatewayError, ZeroVector, EmbedderFailure) as exc:
                annotations.append(f"candidate {candidate_ids[pos]} dropped: {exc}")
    for sub in sub_ledgers:
        gateway.ledger.merge(sub)

    ok_positions = sorted(outcomes)
    if not ok_positions:
        raise GatewayUnavailable(f"all {len(candidate_idx)} candidate calls failed for {qid!r}")
    ok_idx = [candidate_idx[p] for p in ok_positions]
    response_stack = np.stack([outcomes[p][1] for p in ok_positions])
    live_costs = [outcomes[p][0].completion_tokens for p in ok_positions]
    responses_by_model: dict[str, ChatResult] = {
        candidate_ids[p]: outcomes[p][0] for p in ok_positions
    }
    failed_ids = {candidate_ids[p] for p in range(len(candidate_idx)) if p not in outcomes}

    mixed = mixed_similarity(bank, support, response_stack, ok_idx, live_costs, config.weights)
    filtered = filter_support(support, mixed, config.weights.beta)
    fine = fine_scores(bank, support, filtered, mixed)

    if explain:
        scores = ScoreReport(
            coarse=coarse, fine=fine, filtered_indices=filtered, mixed_similarities=mixed,
            query_term=support.similarities.copy(),
            response_term=response_similarity(bank, support, response_stack, ok_idx),
            cost_term=cost_similarity(bank, support, live_costs, ok_idx),
        )
    else:
        scores = ScoreReport(
            coarse=coarse, fine=fine, filtered_indices=filtered, mixed_similarities=mixed
        )

    # the switch
    degenerate = float(fine.max()) <= 0.0
    if degenerate:
        final_idx = [aggregator_idx]
        annotations.append("degenerate fine scores; falling back to the coarse aggregator")
    elif router_only:
        final_idx = [int(np.argmax(fine))]
    else:
        final_idx = adaptive_switch(fine, k, config.switch_threshold)
        dropped = [j for j in final_idx if bank.models[j].model_id in failed_ids]
        if dropped:
            final_idx = [j for j in final_idx if j not in dropped]
            annotations.append(
                "aggregatee(s) excluded after candidate failure: "
                + ", ".join(bank.models[j].model_id for j in dropped)
            )
        if not final_idx:
            fallback = max(ok_idx, key=lambda j: (fine[j], -j))
            final_idx = [fallback]
            annotations.append("switch emptied by failures; using best scored candidate")

    def fetch_fresh(mid: str) -> ChatResult | None:
        try:
            return gateway.chat(mid, query_text)
        except GatewayError as exc:
            annotations.append(f"fresh fetch for {mid} failed: {exc}")
            return None

    truncated = False
    if len(final_idx) == 1:
        j = final_idx[0]
        mid = bank.models[j].model_id
        chosen = responses_by_model.get(mid)
        if chosen is None:
            chosen = fetch_fresh(mid)  # the one off-candidate fetch
        if chosen is None:
            best = max(ok_idx, key=lambda i: (fine[i], -i))
            mid = bank.models[best].model_id
            chosen = responses_by_model[mid]
            annotations.append(f"fell back to best available candidate {mid}")
        verdict = VERDICT_ROUTED
        final_ids = [mid]
        final_response = chosen.text
    else:
        entries: list[AggregateeResponse] = []
        off_candidate_fetched = False
        for j in final_idx:
            mid = bank.models[j].model_id
            held = responses_by_model.get(mid)
            if held is not None:
                entries.append(AggregateeResponse(mid, held.text, held.completion_tokens, float(fine[j])))
            elif not off_candidate_fetched:
                off_candidate_fetched = True
                fresh = fetch_fresh(mid)
                if fresh is not None:
                    entries.append(
                        AggregateeResponse(mid, fresh.text, fresh.completion_tokens, float(fine[j]))
                    )
            else:
                annotations.append(f"off-candidate aggregatee {mid} dropped: call budget")
        if not entries:
            best = max(ok_idx, key=lambda i: (fine[i], -i))
            mid = bank.models[best].model_id
            held = responses_by_model[mid]
            annotations.append(f"no aggregatee response available; routed to {mid}")
            verdict, final_ids, final_response = VERDICT_ROUTED, [mid], held.text
        else:
            entries, truncated = truncate_aggregatees(entries, config.truncation_token_budget)
            if len(entries) == 1:
                verdict = VERDICT_ROUTED
                final_ids = [entries[0].model_id]
                final_response = entries[0].text
            else:
                prompt = assemble_aggregation_prompt(
                    query_text, [en.text for en in entries], config.aggregation_prompt_template
                )
                try:
                    fused = gateway.chat(aggregator_id, prompt)
                    verdict = VERDICT_AGGREGATED
                    final_ids = [en.model_id for en in entries]
                    final_response = fused.text
                except GatewayError as exc:
                    annotations.append(f"aggregator call failed, routing best reference: {exc}")
                    verdict = VERDICT_ROUTED
                    final_ids = [entries[0].model_id]
                    final_response = entries[0].text

    return RoutingDecision(
        query_id=qid,
        query_text=query_text,
        support=support,
        scores=scores,
        aggregator_id=aggregator_id,
        candidate_ids=candidate_ids,
        candidate_responses=responses_by_model,
        final_aggregatee_ids=final_ids,
        verdict=verdict,
        final_response=final_response,
        truncated=truncated,
        annotations=annotations,
    )
