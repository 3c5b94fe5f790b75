"""Build an embedding bank from past queries and store it on disk.

The bank is the router's memory: for every past query it keeps the
query embedding, each model's response embedding, a correctness bit
per model, and each reply's token cost. This demo builds one from 15
recorded queries, saves it, corrupts a copy, and shows the loader
refusing the damaged directory.
"""

from __future__ import annotations

import json
import tempfile
from pathlib import Path

from common import banner, build_pool

from mixroute import load_bank, save_bank
from mixroute.errors import ChecksumMismatch


def main() -> None:
    pool = build_pool()
    bank = pool.bank

    banner("1. the pool")
    for p in pool.profiles:
        print(f"  {p.model_id:12s}  in ${p.input_price_per_mtok}/Mtok"
              f"  out ${p.output_price_per_mtok}/Mtok")

    banner("2. the bank")
    print(f"  {bank.n_records} records x {bank.n_models} models, embedding dim {bank.dim}")
    print(f"  query embeddings   {bank.query_embeddings.shape}  {bank.query_embeddings.dtype}")
    print(f"  response embeddings {bank.response_embeddings.shape} {bank.response_embeddings.dtype}")
    print(f"  capability bits    {bank.capability.shape}  {bank.capability.dtype}")
    print(f"  reply token costs  {bank.costs.shape}  {bank.costs.dtype}")
    per_model = bank.capability.sum(axis=1)
    for p, hits in zip(bank.models, per_model):
        print(f"  {p.model_id:12s} correct on {hits}/{bank.n_records} past queries")

    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "demo_bank"
        save_bank(bank, out)

        banner("3. on disk")
        for path in sorted(out.iterdir()):
            print(f"  {path.name:28s} {path.stat().st_size:7d} bytes")
        manifest = json.loads((out / "manifest.json").read_text())
        print(f"  manifest: format v{manifest['format_version']}, "
              f"{len(manifest['sidecars'])} checksummed sidecars")

        reloaded = load_bank(out)
        assert reloaded.records == bank.records
        print("  reload round trip: records identical")

        banner("4. corruption is loud")
        victim = out / "costs.u32"
        blob = bytearray(victim.read_bytes())
        blob[0] ^= 0xFF
        victim.write_bytes(bytes(blob))
        try:
            load_bank(out)
        except ChecksumMismatch as exc:
            print(f"  flipped one byte in costs.u32 -> {type(exc).__name__}: {exc}")

    print("\nSame thing via the CLI: mixroute bank build --records r.jsonl "
          "--profiles prices.json --replay fixture.jsonl --out bank/")


if __name__ == "__main__":
    main()
