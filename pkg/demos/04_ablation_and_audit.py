"""Ablate the scoring terms, then audit the routing/fusion switch.

The deviation study asks: how far is each model's fine score, as a
fraction of the attainable mass, from its true correctness bits? Lower
is better. Recomputing it with the response and cost terms switched
off shows what each term buys on this pool. The switch audit then
groups queries by recorded difficulty and tallies how the adaptive
switch behaved on each tier.
"""

from __future__ import annotations

from common import banner, build_pool

from mixroute import OrchestratorConfig
from mixroute.harness import deviation_report, switch_audit


def main() -> None:
    pool = build_pool()
    config = OrchestratorConfig()

    banner("1. term ablation: mean profile deviation (0 best, 100 worst)")
    report = deviation_report(pool.bank, pool.test_records, config, pool.gateway())
    for mode, mean in report.means().items():
        print(f"  {mode:16s} {mean:6.2f}")
    print("  query geometry alone over-credits whoever answered often;")
    print("  adding response similarity separates this pool perfectly,")
    print("  while the cost term drags neighbors back in on flat pricing.")

    banner("2. per-query deviations")
    for row in report.rows:
        cells = "  ".join(f"{m}={v:5.1f}" for m, v in row.deviations.items())
        print(f"  {row.query_id:16s} {cells}")

    banner("3. switch audit by difficulty tier")
    audit = switch_audit(pool.bank, pool.test_records, config, pool.gateway())
    stats = audit.tier_stats()
    for tier in ("EASY", "MEDIUM", "HARD"):
        s = stats.get(tier)
        if not s:
            print(f"  {tier:7s} no queries")
            continue
        print(f"  {tier:7s} n={s['n']}  routed={s['routed_pct']:5.1f}%  "
              f"candidates={s['mean_candidates']:.1f}  kept={s['mean_remained']:.1f}  "
              f"pruned={s['mean_removed']:.1f}")
    print("  easy questions (most models right) fuse; medium ones")
    print("  (one clear specialist) route to a single model.")
    print("\nSame thing via the CLI: mixroute eval deviation / mixroute eval audit")


if __name__ == "__main__":
    main()
