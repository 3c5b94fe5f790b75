"""Grade the router on a held-out test set, offline.

Every model call replays from the recorded fixture, so the evaluation
is reproducible to the byte and costs nothing. Routed answers grade by
the recorded correctness bit of the routed model; fused answers grade
by a recorded judgment of the fusion. Exact-match grading against the
reference text is shown as a second opinion.
"""

from __future__ import annotations

from common import banner, build_pool

from mixroute import OrchestratorConfig
from mixroute.harness import evaluate


def main() -> None:
    pool = build_pool()
    config = OrchestratorConfig()

    banner("1. recorded grading")
    report = evaluate(pool.bank, pool.test_records, config, pool.gateway())
    print(f"  {'query':16s} {'subject':10s} {'verdict':10s} "
          f"{'models':34s} {'ok':>2s} {'cost':>6s}")
    for row in report.rows:
        print(f"  {row.query_id:16s} {row.source_tag:10s} {row.verdict:10s} "
              f"{'+'.join(row.model_ids):34s} {row.correct:2d} {row.microdollars:6d}")
    print(f"\n  accuracy {report.accuracy:.4f} "
          f"({report.n_correct}/{report.n_queries}), verdicts {report.verdict_counts()}")
    print(f"  total spend {report.total_microdollars()} microdollars")

    banner("2. per-subject breakdown")
    for tag, stats in sorted(report.per_tag().items()):
        print(f"  {tag:10s} accuracy {stats['accuracy']:.2f} on {stats['n']} queries")

    banner("3. exact-text grading agrees here")
    exact = evaluate(pool.bank, pool.test_records, config, pool.gateway(),
                     grading="exact")
    print(f"  exact-match accuracy {exact.accuracy:.4f}"
          " (fused answers reproduce the reference text in this pool)")

    banner("4. reports serialize for dashboards")
    print("  to_json() -> full rows;  to_csv() header:")
    print("  " + report.to_csv().splitlines()[0])
    print("\nSame thing via the CLI: mixroute eval run --bank bank/ "
          "--test test.jsonl --replay fixture.jsonl")


if __name__ == "__main__":
    main()
