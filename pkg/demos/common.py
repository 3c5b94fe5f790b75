"""Shared model pool for the demo scripts.

Three models, three subjects. nimbus-mini knows algebra, harrier-std
knows geography, and everyone can do logic, so logic questions end in
a three-way fusion while the other subjects route to their specialist.
Embeddings are subject basis vectors and every reply the pipeline can
ask for is pre-recorded in a replay fixture, judgments included: the
demos run offline, deterministically, with no keys.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mixroute import (
    EmbeddingBank,
    Gateway,
    ModelProfile,
    QueryRecord,
    ReplayBackend,
    build_bank,
)
from mixroute.orchestrator import assemble_aggregation_prompt

HERE = Path(__file__).resolve().parent

SUBJECTS = ("algebra", "geography", "logic")

# which subjects each model answers correctly
SKILL = {
    "nimbus-mini": {0, 2},
    "harrier-std": {1, 2},
    "atlas-pro": {2},
}

# typical completion length per model, constant across subjects
REPLY_TOKENS = {"nimbus-mini": 90, "harrier-std": 120, "atlas-pro": 200}

BANK_ROWS_PER_SUBJECT = 5
TEST_ROWS_PER_SUBJECT = 2


@dataclass
class Pool:
    bank_records: list[QueryRecord]
    test_records: list[QueryRecord]
    profiles: list[ModelProfile]
    backend: ReplayBackend
    bank: EmbeddingBank

    def gateway(self) -> Gateway:
        """Fresh gateway over the shared fixture, with its own ledger."""
        return Gateway(self.profiles, self.backend)


def load_profiles() -> list[ModelProfile]:
    data = json.loads((HERE / "prices.json").read_text())
    return [ModelProfile.from_dict(d) for d in data]


def _record(kind: str, task: int, i: int, backend: ReplayBackend) -> QueryRecord:
    subject = SUBJECTS[task]
    qid = f"{kind}-{subject}-{i}"
    question = f"{subject} question {i} ({kind} set)"
    label = f"{subject} reference answer"
    basis = np.eye(len(SUBJECTS))[task]
    backend.add_embed(question, basis)
    responses, correctness, tokens = {}, {}, {}
    for mid, skilled in SKILL.items():
        ok = task in skilled
        text = label if ok else f"{mid} guess on {qid}"
        backend.add_embed(text, basis)
        responses[mid] = text
        correctness[mid] = 1 if ok else 0
        tokens[mid] = REPLY_TOKENS[mid]
    return QueryRecord(
        query_id=qid,
        question_text=question,
        label_text=label,
        responses=responses,
        correctness=correctness,
        completion_tokens=tokens,
        source_tag=subject,
    )


def build_pool() -> Pool:
    profiles = load_profiles()
    backend = ReplayBackend()
    bank_records = [
        _record("bank", t, i, backend)
        for t in range(len(SUBJECTS))
        for i in range(BANK_ROWS_PER_SUBJECT)
    ]
    test_records = [
        _record("test", t, i, backend)
        for t in range(len(SUBJECTS))
        for i in range(TEST_ROWS_PER_SUBJECT)
    ]

    for rec in test_records:
        for mid in SKILL:
            backend.add_chat(
                mid, rec.question_text, rec.responses[mid],
                prompt_tokens=max(1, len(rec.question_text) // 4),
                completion_tokens=rec.completion_tokens[mid],
            )

    # logic questions fuse all three models; record the fusion call and
    # a quality judgment for it (all three references are correct)
    fused = [mid for mid in SKILL]
    for rec in test_records:
        if rec.source_tag != "logic":
            continue
        prompt = assemble_aggregation_prompt(
            rec.question_text, [rec.responses[mid] for mid in fused]
        )
        backend.add_chat(
            "nimbus-mini", prompt, rec.label_text,
            prompt_tokens=max(1, len(prompt) // 4), completion_tokens=60,
        )
        backend.add_judgment(rec.query_id, "nimbus-mini", fused, 1)

    bank = build_bank(bank_records, profiles, Gateway(profiles, backend))
    return Pool(bank_records, test_records, profiles, backend, bank)


def banner(title: str) -> None:
    print()
    print("=" * 64)
    print(title)
    print("=" * 64)
