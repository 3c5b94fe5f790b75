"""Evaluation harness: splits, replay evaluation, ablations, audits, sweeps."""

import json
import math
from dataclasses import replace

import numpy as np
import pytest

from mixroute import errors
from mixroute.bank import QueryRecord
from mixroute.gateway import Gateway, ReplayBackend
from mixroute.harness import (
    MODE_FULL,
    MODE_QUERY,
    MODE_QUERY_RESPONSE,
    TIER_EASY,
    TIER_HARD,
    TIER_MEDIUM,
    assign_tier,
    deviation_report,
    evaluate,
    mode_weights,
    scaling_sweep,
    split_records,
    switch_audit,
)
from mixroute.orchestrator import OrchestratorConfig, assemble_aggregation_prompt
from mixroute.scoring import MixedWeights

from conftest import build_world_bank, make_world


def simple_records(n):
    return [
        QueryRecord(f"q{i:03d}", f"question {i}", f"label {i}", {"m": f"r{i}"}, {"m": i % 2}, {"m": 5})
        for i in range(n)
    ]


# ---- split ----

def test_split_matches_seeded_permutation():
    recs = simple_records(10)
    train, test = split_records(recs)
    ids = sorted(r.query_id for r in recs)
    perm = np.random.default_rng(42).permutation(10)
    assert [r.query_id for r in train] == [ids[i] for i in perm[:7]]
    assert [r.query_id for r in test] == [ids[i] for i in perm[7:]]


def test_split_is_input_order_insensitive():
    recs = simple_records(12)
    a = split_records(recs)
    b = split_records(list(reversed(recs)))
    assert [r.query_id for r in a[0]] == [r.query_id for r in b[0]]
    assert [r.query_id for r in a[1]] == [r.query_id for r in b[1]]


def test_split_sizes_use_exact_ceiling():
    # 0.7 * 20 must mean ceil(14) = 14, immune to float drift
    train, test = split_records(simple_records(20))
    assert (len(train), len(test)) == (14, 6)
    train, test = split_records(simple_records(1))
    assert (len(train), len(test)) == (1, 0)


def test_split_partition_is_disjoint_and_total():
    recs = simple_records(9)
    train, test = split_records(recs)
    train_ids = {r.query_id for r in train}
    test_ids = {r.query_id for r in test}
    assert not train_ids & test_ids
    assert train_ids | test_ids == {r.query_id for r in recs}


def test_split_seed_changes_split():
    recs = simple_records(30)
    base = split_records(recs)
    same = split_records(recs)
    other = split_records(recs, seed=7)
    assert [r.query_id for r in base[1]] == [r.query_id for r in same[1]]
    assert [r.query_id for r in base[1]] != [r.query_id for r in other[1]]


def test_split_rejects_bad_fraction():
    for frac in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ValueError):
            split_records(simple_records(4), train_fraction=frac)


# ---- evaluate ----

def disjoint_world(**kw):
    return make_world([{0}, {1}, {2}], **kw)


def coequal_world():
    bank_records, test_records, profiles, backend = make_world([{0}, {0}])
    rec = test_records[0]
    prompt = assemble_aggregation_prompt(
        rec.question_text, [rec.responses["expert-0"], rec.responses["expert-1"]]
    )
    backend.add_chat("expert-0", prompt, "fused answer", prompt_tokens=40, completion_tokens=12)
    return bank_records, test_records, profiles, backend, rec


def test_evaluate_recorded_disjoint_world_is_perfect():
    bank_records, test_records, profiles, backend = disjoint_world()
    gw = Gateway(profiles, backend)
    bank = build_world_bank(bank_records, profiles, backend)
    report = evaluate(bank, test_records, OrchestratorConfig(), gw)
    assert report.n_queries == 3 and report.n_correct == 3
    assert report.accuracy == 1.0
    assert report.verdict_counts() == {"ROUTED": 3}
    assert [row.query_id for row in report.rows] == ["test-t0-0", "test-t1-0", "test-t2-0"]
    assert [row.model_ids for row in report.rows] == [("expert-0",), ("expert-1",), ("expert-2",)]
    tags = report.per_tag()
    assert tags["task1"] == {"n": 1, "correct": 1, "accuracy": 1.0}


def test_evaluate_costs_are_exact_micro_dollars():
    prices = {f"expert-{j}": ("1", "2") for j in range(3)}
    bank_records, test_records, profiles, backend = disjoint_world(prices=prices)
    gw = Gateway(profiles, backend)
    bank = build_world_bank(bank_records, profiles, backend)
    report = evaluate(bank, test_records, OrchestratorConfig(), gw)
    # 3 candidate calls per query, each 17 in + 120 out at $1/$2 per Mtok
    per_call = 17 * 1 + 120 * 2
    assert [row.microdollars for row in report.rows] == [3 * per_call] * 3
    assert report.total_microdollars() == 9 * per_call
    assert gw.ledger.total_microdollars() == 9 * per_call


def test_evaluate_exact_grading_compares_final_text_to_label():
    bank_records, test_records, profiles, backend = disjoint_world()
    bank = build_world_bank(bank_records, profiles, backend)
    report = evaluate(bank, test_records, OrchestratorConfig(), Gateway(profiles, backend))
    exact = evaluate(
        bank, test_records, OrchestratorConfig(), Gateway(profiles, backend), grading="exact"
    )
    assert report.accuracy == exact.accuracy == 1.0

    twisted = [replace(test_records[0], label_text="something else"), *test_records[1:]]
    exact2 = evaluate(
        bank, twisted, OrchestratorConfig(), Gateway(profiles, backend), grading="exact"
    )
    assert exact2.n_correct == 2
    assert exact2.rows[0].correct == 0


def test_evaluate_exact_grading_ignores_case_and_spacing():
    bank_records, test_records, profiles, backend = disjoint_world()
    bank = build_world_bank(bank_records, profiles, backend)
    shouted = [replace(r, label_text="  " + r.label_text.upper() + " \n") for r in test_records]
    report = evaluate(
        bank, shouted, OrchestratorConfig(), Gateway(profiles, backend), grading="exact"
    )
    assert report.accuracy == 1.0


def test_evaluate_aggregated_uses_recorded_judgment():
    bank_records, test_records, profiles, backend, rec = coequal_world()
    backend.add_judgment(rec.query_id, "expert-0", ["expert-0", "expert-1"], 1)
    bank = build_world_bank(bank_records, profiles, backend)
    report = evaluate(bank, test_records, OrchestratorConfig(), Gateway(profiles, backend))
    assert report.verdict_counts() == {"AGGREGATED": 1}
    assert report.accuracy == 1.0

    backend._judgments.clear()
    backend.add_judgment(rec.query_id, "expert-0", ["expert-1", "expert-0"], 0)  # order-insensitive
    report0 = evaluate(bank, test_records, OrchestratorConfig(), Gateway(profiles, backend))
    assert report0.accuracy == 0.0


def test_evaluate_missing_judgment_fails_loudly():
    bank_records, test_records, profiles, backend, _ = coequal_world()
    bank = build_world_bank(bank_records, profiles, backend)
    with pytest.raises(errors.FixtureIncomplete):
        evaluate(bank, test_records, OrchestratorConfig(), Gateway(profiles, backend))


def test_evaluate_preflight_reports_missing_chats_before_spending():
    bank_records, test_records, profiles, backend = disjoint_world()
    bank = build_world_bank(bank_records, profiles, backend)
    backend._chat.pop(ReplayBackend.chat_key("expert-2", test_records[1].question_text))
    gw = Gateway(profiles, backend)
    with pytest.raises(errors.FixtureIncomplete) as exc:
        evaluate(bank, test_records, OrchestratorConfig(), gw)
    assert ("test-t1-0", "expert-2") in exc.value.missing
    assert gw.ledger.entries == ()


def test_evaluate_strict_rejects_silent_fallbacks():
    bank_records, test_records, profiles, backend = make_world([{0}, {0}])
    # no aggregation prompt recorded: the aggregator call will miss
    bank = build_world_bank(bank_records, profiles, backend)
    with pytest.raises(errors.FixtureIncomplete):
        evaluate(bank, test_records, OrchestratorConfig(), Gateway(profiles, backend))
    lenient = evaluate(
        bank, test_records, OrchestratorConfig(), Gateway(profiles, backend), strict=False
    )
    assert lenient.rows[0].verdict == "ROUTED"
    assert any("aggregator" in a for a in lenient.rows[0].annotations)


def test_evaluate_worker_count_never_changes_output():
    prices = {f"expert-{j}": ("0.4", "1.1") for j in range(3)}
    bank_records, test_records, profiles, backend = disjoint_world(prices=prices)
    bank = build_world_bank(bank_records, profiles, backend)

    outs = []
    for workers in (1, 4):
        gw = Gateway(profiles, backend)
        report = evaluate(bank, test_records, OrchestratorConfig(), gw, workers=workers)
        outs.append((report.to_json(), [e.model_id for e in gw.ledger.entries]))
    assert outs[0] == outs[1]


def test_evaluate_on_decision_sink_sees_query_order():
    bank_records, test_records, profiles, backend = disjoint_world()
    bank = build_world_bank(bank_records, profiles, backend)
    seen = []
    evaluate(
        bank, test_records, OrchestratorConfig(), Gateway(profiles, backend),
        on_decision=lambda rec, dec, correct: seen.append((rec.query_id, dec.verdict, correct)),
    )
    assert seen == [("test-t0-0", "ROUTED", 1), ("test-t1-0", "ROUTED", 1), ("test-t2-0", "ROUTED", 1)]


def test_evaluate_rejects_empty_and_duplicate_input():
    bank_records, test_records, profiles, backend = disjoint_world()
    bank = build_world_bank(bank_records, profiles, backend)
    with pytest.raises(ValueError):
        evaluate(bank, [], OrchestratorConfig(), Gateway(profiles, backend))
    with pytest.raises(ValueError):
        evaluate(bank, [test_records[0]] * 2, OrchestratorConfig(), Gateway(profiles, backend))
    with pytest.raises(ValueError):
        evaluate(bank, test_records, OrchestratorConfig(), Gateway(profiles, backend), grading="vibes")


def test_report_serialization_is_deterministic():
    bank_records, test_records, profiles, backend = disjoint_world()
    bank = build_world_bank(bank_records, profiles, backend)
    r1 = evaluate(bank, test_records, OrchestratorConfig(), Gateway(profiles, backend))
    r2 = evaluate(bank, test_records, OrchestratorConfig(), Gateway(profiles, backend))
    assert r1.to_json() == r2.to_json()
    assert r1.to_csv() == r2.to_csv()
    parsed = json.loads(r1.to_json())
    assert parsed["n_queries"] == 3 and parsed["accuracy"] == 1.0
    lines = r1.to_csv().strip().split("\n")
    assert lines[0].startswith("query_id,")
    assert len(lines) == 4
    assert lines[1].split(",")[0] == "test-t0-0"


# ---- deviation ----

def test_mode_weights_renormalize_active_terms():
    w = MixedWeights()
    q = mode_weights(w, MODE_QUERY)
    assert (q.epsilon, q.sigma, q.delta, q.beta) == (1.0, 0.0, 0.0, 0.5)
    qr = mode_weights(w, MODE_QUERY_RESPONSE)
    assert qr.epsilon == pytest.approx(0.625, abs=1e-12)
    assert qr.sigma == pytest.approx(0.375, abs=1e-12)
    assert qr.delta == 0.0
    assert mode_weights(w, MODE_FULL) == w

    other = mode_weights(MixedWeights(epsilon=0.6, sigma=0.2, delta=0.2), MODE_QUERY_RESPONSE)
    assert other.epsilon == pytest.approx(0.75, abs=1e-12)
    with pytest.raises(ValueError):
        mode_weights(w, "bogus")


@pytest.mark.parametrize(
    "flip,expected",
    [((), 0.0), (("expert-0",), 50.0), (("expert-0", "expert-1"), 100.0)],
)
def test_deviation_hand_computed_values(flip, expected):
    # task-1 rows: both experts correct; the test bits are then flipped
    # so the flat profile (1, 1) misses by exactly 50 per flipped model
    bank_records, test_records, profiles, backend = make_world([{0, 1}, {1}])
    bank = build_world_bank(bank_records, profiles, backend)
    target = next(r for r in test_records if r.source_tag == "task1")
    bits = dict(target.correctness)
    assert bits == {"expert-0": 1, "expert-1": 1}
    for mid in flip:
        bits[mid] = 0
    record = replace(target, correctness=bits)
    report = deviation_report(bank, [record], OrchestratorConfig(), Gateway(profiles, backend))
    for mode in (MODE_QUERY, MODE_QUERY_RESPONSE, MODE_FULL):
        assert report.mean(mode) == expected


def test_deviation_report_shape_and_determinism():
    bank_records, test_records, profiles, backend = disjoint_world()
    bank = build_world_bank(bank_records, profiles, backend)
    r1 = deviation_report(bank, test_records, OrchestratorConfig(), Gateway(profiles, backend))
    r2 = deviation_report(
        bank, test_records, OrchestratorConfig(), Gateway(profiles, backend), workers=1
    )
    assert r1.to_json() == r2.to_json()
    parsed = json.loads(r1.to_json())
    assert set(parsed["means"]) == {MODE_QUERY, MODE_QUERY_RESPONSE, MODE_FULL}
    assert len(parsed["rows"]) == 3
    for row in parsed["rows"]:
        for mode in (MODE_QUERY, MODE_QUERY_RESPONSE, MODE_FULL):
            assert 0.0 <= row["deviations"][mode] <= 100.0


def test_deviation_requires_bits_for_every_model():
    bank_records, test_records, profiles, backend = disjoint_world()
    bank = build_world_bank(bank_records, profiles, backend)
    rec = test_records[0]
    gutted = QueryRecord(
        rec.query_id, rec.question_text, rec.label_text,
        {"expert-0": rec.responses["expert-0"]},
        {"expert-0": rec.correctness["expert-0"]},
        {"expert-0": rec.completion_tokens["expert-0"]},
    )
    with pytest.raises(errors.FixtureIncomplete):
        deviation_report(bank, [gutted], OrchestratorConfig(), Gateway(profiles, backend))


def test_deviation_rejects_empty_or_unknown_mode():
    bank_records, test_records, profiles, backend = disjoint_world()
    bank = build_world_bank(bank_records, profiles, backend)
    with pytest.raises(ValueError):
        deviation_report(bank, [], OrchestratorConfig(), Gateway(profiles, backend))
    with pytest.raises(ValueError):
        deviation_report(
            bank, test_records, OrchestratorConfig(), Gateway(profiles, backend), modes=("bogus",)
        )


# ---- switch audit ----

def test_tier_boundaries_are_strict():
    assert assign_tier(9 / 10) == TIER_EASY
    assert assign_tier(8 / 10) == TIER_MEDIUM
    assert assign_tier(3 / 10) == TIER_MEDIUM
    assert assign_tier(2 / 10) == TIER_HARD
    assert assign_tier(1.0) == TIER_EASY
    assert assign_tier(0.0) == TIER_HARD


def test_switch_audit_disjoint_world_routes_medium_tier():
    bank_records, test_records, profiles, backend = disjoint_world()
    bank = build_world_bank(bank_records, profiles, backend)
    report = switch_audit(bank, test_records, OrchestratorConfig(), Gateway(profiles, backend))
    stats = report.tier_stats()
    assert stats[TIER_EASY] is None and stats[TIER_HARD] is None
    medium = stats[TIER_MEDIUM]
    assert medium["n"] == 3
    assert medium["routed_pct"] == 100.0
    assert medium["mean_candidates"] == 3.0
    assert medium["mean_remained"] == 1.0
    assert medium["mean_removed"] == 2.0
    assert all(row.tier == TIER_MEDIUM for row in report.rows)


def test_switch_audit_coequal_world_keeps_easy_tier_aggregated():
    bank_records, test_records, profiles, backend, rec = coequal_world()
    bank = build_world_bank(bank_records, profiles, backend)
    report = switch_audit(bank, test_records, OrchestratorConfig(), Gateway(profiles, backend))
    easy = report.tier_stats()[TIER_EASY]
    assert easy == {
        "n": 1,
        "routed_pct": 0.0,
        "mean_candidates": 2.0,
        "mean_remained": 2.0,
        "mean_removed": 0.0,
    }
    assert report.rows[0].verdict == "AGGREGATED"


def test_switch_audit_serializes(tmp_path):
    bank_records, test_records, profiles, backend = disjoint_world()
    bank = build_world_bank(bank_records, profiles, backend)
    report = switch_audit(bank, test_records, OrchestratorConfig(), Gateway(profiles, backend))
    parsed = json.loads(report.to_json())
    assert [r["query_id"] for r in parsed["rows"]] == ["test-t0-0", "test-t1-0", "test-t2-0"]
    assert parsed["tiers"][TIER_MEDIUM]["n"] == 3


# ---- scaling sweep ----

def test_scaling_sweep_accuracy_is_monotone_here():
    bank_records, test_records, profiles, backend = disjoint_world()
    # at pool size 2 the task-2 query aggregates two wrong answers;
    # record that fusion and judge it wrong
    t2 = test_records[2]
    prompt = assemble_aggregation_prompt(
        t2.question_text, [t2.responses["expert-0"], t2.responses["expert-1"]]
    )
    backend.add_chat("expert-0", prompt, "fused junk", prompt_tokens=50, completion_tokens=20)
    backend.add_judgment(t2.query_id, "expert-0", ["expert-0", "expert-1"], 0)
    report = scaling_sweep(
        bank_records, test_records, profiles, OrchestratorConfig(), backend, sizes=(1, 2, 3)
    )
    assert [p.size for p in report.points] == [1, 2, 3]
    assert [p.report.n_correct for p in report.points] == [1, 2, 3]
    assert [p.model_ids for p in report.points] == [
        ("expert-0",),
        ("expert-0", "expert-1"),
        ("expert-0", "expert-1", "expert-2"),
    ]
    accs = [p.report.accuracy for p in report.points]
    assert accs == sorted(accs)
    # a one-model pool can only route
    assert report.points[0].report.verdict_counts() == {"ROUTED": 3}


def test_scaling_sweep_defaults_to_full_prefix_ladder():
    bank_records, test_records, profiles, backend = make_world([{0}, {1}])
    report = scaling_sweep(bank_records, test_records, profiles, OrchestratorConfig(), backend)
    assert [p.size for p in report.points] == [1, 2]
    parsed = json.loads(report.to_json())
    assert [p["size"] for p in parsed["points"]] == [1, 2]


def test_scaling_sweep_validates_sizes():
    bank_records, test_records, profiles, backend = disjoint_world()
    with pytest.raises(ValueError):
        scaling_sweep(
            bank_records, test_records, profiles, OrchestratorConfig(), backend, sizes=(0, 2)
        )
    with pytest.raises(ValueError):
        scaling_sweep(
            bank_records, test_records, profiles, OrchestratorConfig(), backend, sizes=(4,)
        )
