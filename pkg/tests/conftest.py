"""Shared builders for synthetic banks, records and gateways."""

from __future__ import annotations

import sys
from decimal import Decimal
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make `oracles` importable

from mixroute.bank import EmbeddingBank, ModelProfile, QueryRecord


def make_profiles(model_ids, prices=None):
    """Profiles with optional (input, output) per-Mtok price strings."""
    prices = prices or {}
    return [
        ModelProfile(
            model_id=mid,
            display_name=mid.replace("-", " ").title(),
            endpoint="",
            input_price_per_mtok=Decimal(str(prices.get(mid, ("0", "0"))[0])),
            output_price_per_mtok=Decimal(str(prices.get(mid, ("0", "0"))[1])),
        )
        for mid in model_ids
    ]


def unit_rows(rng, shape):
    """Random float32 matrix whose last-axis rows are unit norm."""
    raw = rng.standard_normal(shape)
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    norms[norms < 1e-9] = 1.0
    return (raw / norms).astype(np.float32)


def random_bank(rng, n, m, d, *, cost_hi=2000):
    """Bank with random unit embeddings and consistent records.

    Arrays drive the scoring tests; the records exist so the bank
    passes validation and persistence round-trips.
    """
    model_ids = [f"model-{j}" for j in range(m)]
    capability = rng.integers(0, 2, size=(m, n)).astype(np.uint8)
    costs = rng.integers(0, cost_hi, size=(n, m)).astype(np.uint32)
    records = tuple(
        QueryRecord(
            query_id=f"q{i:04d}",
            question_text=f"question {i}",
            label_text=f"label {i}",
            responses={mid: f"response {i} by {mid}" for mid in model_ids},
            correctness={mid: int(capability[j, i]) for j, mid in enumerate(model_ids)},
            completion_tokens={mid: int(costs[i, j]) for j, mid in enumerate(model_ids)},
            source_tag="synthetic",
        )
        for i in range(n)
    )
    bank = EmbeddingBank(
        dim=d,
        models=tuple(make_profiles(model_ids)),
        query_embeddings=unit_rows(rng, (n, d)),
        response_embeddings=unit_rows(rng, (n, m, d)),
        capability=capability,
        costs=costs,
        records=records,
    )
    bank.validate()
    return bank


def unit(v):
    """Exact-ish unit vector from a list, float64."""
    arr = np.asarray(v, dtype=np.float64)
    return arr / np.linalg.norm(arr)


def make_world(
    expertise,
    *,
    bank_rows_per_task=4,
    test_rows_per_task=1,
    completion_tokens=120,
    prices=None,
):
    """Synthetic task-expert pool with exact basis-vector embeddings.

    ``expertise`` is one set of task ids per model: model j ("expert-j")
    answers exactly the tasks in expertise[j] correctly. Question and
    response embeddings are the task's basis vector, so query geometry
    is perfectly separable by task. Correct responses share the task's
    label text; wrong responses are unique junk.

    Returns (bank_records, test_records, profiles, replay_backend);
    the backend holds embeddings for every text and a chat entry for
    every (model, test question) pair.
    """
    n_tasks = max((t for s in expertise for t in s), default=0) + 1
    model_ids = [f"expert-{j}" for j in range(len(expertise))]
    profiles = make_profiles(model_ids, prices=prices)
    backend = None
    from mixroute.gateway import ReplayBackend

    backend = ReplayBackend()
    basis = np.eye(n_tasks)

    def tokens(task, j):
        return completion_tokens(task, model_ids[j]) if callable(completion_tokens) else completion_tokens

    def record_for(kind, task, i):
        qid = f"{kind}-t{task}-{i}"
        question = f"task{task} {kind} question {i}"
        label = f"answer:task{task}"
        backend.add_embed(question, basis[task])
        responses, correctness, ctoks = {}, {}, {}
        for j, mid in enumerate(model_ids):
            ok = task in expertise[j]
            text = label if ok else f"wrong:{qid}:{mid}"
            backend.add_embed(text, basis[task])
            responses[mid] = text
            correctness[mid] = 1 if ok else 0
            ctoks[mid] = tokens(task, j)
        return QueryRecord(
            query_id=qid,
            question_text=question,
            label_text=label,
            responses=responses,
            correctness=correctness,
            completion_tokens=ctoks,
            source_tag=f"task{task}",
        )

    bank_records = [
        record_for("bank", t, i) for t in range(n_tasks) for i in range(bank_rows_per_task)
    ]
    test_records = [
        record_for("test", t, i) for t in range(n_tasks) for i in range(test_rows_per_task)
    ]
    for rec in test_records:
        for mid in model_ids:
            backend.add_chat(
                mid, rec.question_text, rec.responses[mid],
                prompt_tokens=17, completion_tokens=rec.completion_tokens[mid],
            )
    return bank_records, test_records, profiles, backend


def build_world_bank(bank_records, profiles, backend):
    from mixroute.bank import build_bank
    from mixroute.gateway import Gateway

    return build_bank(bank_records, profiles, Gateway(profiles, backend))


@pytest.fixture
def rng():
    return np.random.default_rng(20260819)
