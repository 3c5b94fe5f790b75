"""Grow the model pool one model at a time and watch accuracy climb.

Each sweep point rebuilds the bank on a prefix of the registry and
re-evaluates the same test set. Router-only mode isolates routing
quality (no fusion calls), which makes the marginal value of each
added model easy to read. A singleton pool can never fuse, so the full
pipeline degenerates to plain routing there.
"""

from __future__ import annotations

from common import banner, build_pool

from mixroute import OrchestratorConfig
from mixroute.harness import scaling_sweep


def main() -> None:
    pool = build_pool()
    config = OrchestratorConfig()

    banner("1. routing quality vs pool size")
    sweep = scaling_sweep(
        pool.bank_records, pool.test_records, pool.profiles, config, pool.backend,
        sizes=[1, 2, 3], router_only=True,
    )
    for point in sweep.points:
        r = point.report
        print(f"  pool of {point.size}: accuracy {r.accuracy:.4f} "
              f"({r.n_correct}/{r.n_queries})  models: {', '.join(point.model_ids)}")
    print("  nimbus-mini alone covers algebra and logic; harrier-std adds")
    print("  geography; atlas-pro is redundant for pure routing here.")

    banner("2. a pool of one cannot fuse")
    solo = scaling_sweep(
        pool.bank_records, pool.test_records, pool.profiles, config, pool.backend,
        sizes=[1],
    ).points[0]
    print(f"  full pipeline, pool of 1: verdicts {solo.report.verdict_counts()}")
    print(f"  accuracy {solo.report.accuracy:.4f} "
          f"({solo.report.n_correct}/{solo.report.n_queries})")

    banner("3. full pipeline on the whole pool, for contrast")
    full = scaling_sweep(
        pool.bank_records, pool.test_records, pool.profiles, config, pool.backend,
        sizes=[3],
    ).points[0]
    print(f"  verdicts {full.report.verdict_counts()}, "
          f"accuracy {full.report.accuracy:.4f}")
    print("  logic questions now fuse three models instead of trusting one.")
    print("\nSame thing via the CLI: mixroute eval sweep --sizes 1,2,3 --router-only")


if __name__ == "__main__":
    main()
