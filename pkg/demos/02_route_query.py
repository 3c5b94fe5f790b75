"""Route two live queries and walk through every scoring stage.

An algebra question has one clear specialist and gets routed to it; a
logic question has three near-equal models and gets their answers
fused. The explain flag keeps the intermediate score vectors on the
decision so each stage can be printed.
"""

from __future__ import annotations

from common import banner, build_pool

from mixroute import OrchestratorConfig, infer


def show(decision, bank, gateway) -> None:
    model_ids = [p.model_id for p in bank.models]
    scores = decision.scores
    sup = decision.support
    print(f"  support: {sup.size} of {bank.n_records} bank rows at "
          f"threshold {sup.threshold:.3f}")
    print(f"  {'model':12s} {'coarse':>7s} {'fine':>8s} {'fine/max':>9s}")
    top = max(scores.fine)
    for mid, c, f in zip(model_ids, scores.coarse, scores.fine):
        print(f"  {mid:12s} {c:7.2f} {f:8.2f} {f / top:9.3f}")
    print(f"  candidates queried: {', '.join(decision.candidate_ids)}")
    print(f"  filter kept {len(scores.filtered_indices)} of {sup.size} support rows")
    print(f"  verdict: {decision.verdict} via {', '.join(decision.final_aggregatee_ids)}")
    for note in decision.annotations:
        print(f"  note: {note}")
    print(f"  answer: {decision.final_response!r}")
    print(f"  spend so far: {gateway.ledger.total_microdollars()} microdollars "
          f"(${gateway.ledger.total_usd()})")


def main() -> None:
    pool = build_pool()
    config = OrchestratorConfig()
    gateway = pool.gateway()
    by_tag = {}
    for rec in pool.test_records:
        by_tag.setdefault(rec.source_tag, rec)

    banner("1. algebra: one model dominates, route to it")
    rec = by_tag["algebra"]
    print(f"  query: {rec.question_text!r}")
    decision = infer(rec.question_text, pool.bank, config, gateway,
                     query_id=rec.query_id, explain=True)
    show(decision, pool.bank, gateway)

    banner("2. logic: three comparable models, fuse their answers")
    rec = by_tag["logic"]
    print(f"  query: {rec.question_text!r}")
    decision = infer(rec.question_text, pool.bank, config, gateway,
                     query_id=rec.query_id, explain=True)
    show(decision, pool.bank, gateway)

    banner("3. the same decision, serialized")
    d = decision.to_dict()
    for key in ("query_id", "verdict", "aggregator_id", "candidate_ids",
                "final_aggregatee_ids", "truncated"):
        print(f"  {key}: {d[key]}")
    print("  (full dict also carries scores, responses, and annotations;"
          " the CLI appends it to decisions.jsonl)")


if __name__ == "__main__":
    main()
