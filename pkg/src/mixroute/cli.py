"""Command line interface.

Exit codes carry machine-readable failure classes:

    0  success
    1  any other error (message on stderr)
    2  a record is missing a registered model's response
    3  target bank exists and --force was not given
    4  bank directory is malformed, truncated, corrupt, or wrong format
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import __version__
from .bank import build_bank, extend_bank, load_bank, save_bank
from .errors import (
    ChecksumMismatch,
    FormatVersionMismatch,
    MalformedBank,
    MissingModelResponse,
    MixrouteError,
    TruncatedFile,
)
from .gateway import Gateway, ReplayBackend
from .harness import (
    ALL_MODES,
    deviation_report,
    evaluate,
    scaling_sweep,
    switch_audit,
)
from .orchestrator import OrchestratorConfig, infer, select_aggregator, select_candidates
from .scoring import coarse_scores, select_support
from .service import (
    DecisionTrace,
    ServiceConfig,
    build_backend,
    parse_profiles_json,
    parse_records_jsonl,
)

EXIT_MISSING_RESPONSE = 2
EXIT_NEEDS_FORCE = 3
EXIT_MALFORMED_BANK = 4

_BANK_DAMAGE = (MalformedBank, FormatVersionMismatch, ChecksumMismatch, TruncatedFile)


class _ForceRequired(MixrouteError):
    pass


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except MissingModelResponse as exc:
            _die(exc, EXIT_MISSING_RESPONSE)
        except _ForceRequired as exc:
            _die(exc, EXIT_NEEDS_FORCE)
        except _BANK_DAMAGE as exc:
            _die(exc, EXIT_MALFORMED_BANK)
        except (MixrouteError, ValueError, OSError) as exc:
            _die(exc, 1)

    return wrapper


def _die(exc: Exception, code: int):
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def _load_records(path: str):
    records = parse_records_jsonl(Path(path).read_bytes())
    if not records:
        raise ValueError(f"{path} holds no records")
    return records


def _load_profiles(path: str):
    profiles = parse_profiles_json(Path(path).read_bytes())
    if not profiles:
        raise ValueError(f"{path} holds no profiles")
    return profiles


def _make_backend(replay: str | None, config: str | None):
    """Backend from --replay or the service config, exactly one required."""
    if replay and config:
        raise ValueError("pass either --replay or --config, not both")
    if replay:
        return ReplayBackend.load(replay)
    if config:
        return build_backend(ServiceConfig.load(config))
    raise ValueError("a backend is required: pass --replay FIXTURE or --config SERVICE.json")


def _parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise ValueError(f"override {pair!r} is not key=value")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _echo_json(payload: dict):
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


def _write_out(path: str | None, text: str, label: str):
    if path:
        Path(path).write_text(text, encoding="utf-8")
        click.echo(f"{label} written to {path}")


@click.group()
@click.version_option(__version__, prog_name="mixroute")
def main():
    """Training-free multi-model routing with adaptive aggregation."""


# ---- bank ----

@main.group()
def bank():
    """Build, extend and inspect embedding banks."""


@bank.command("build")
@click.option("--records", "records_path", required=True, type=click.Path(exists=True))
@click.option("--profiles", "profiles_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--replay", "replay_path", type=click.Path(exists=True), help="Replay fixture supplying embeddings.")
@click.option("--config", "config_path", type=click.Path(exists=True), help="Service config for live embeddings.")
@click.option("--force", is_flag=True, help="Overwrite an existing bank directory.")
@click.option("--max-workers", default=8, show_default=True)
@guarded
def bank_build(records_path, profiles_path, out_path, replay_path, config_path, force, max_workers):
    """Embed a record corpus into a new bank directory."""
    out = Path(out_path)
    if (out / "manifest.json").exists() and not force:
        raise _ForceRequired(f"{out} already holds a bank; pass --force to rebuild")
    records = _load_records(records_path)
    profiles = _load_profiles(profiles_path)
    backend = _make_backend(replay_path, config_path)
    gateway = Gateway(profiles, backend)
    bank_obj = build_bank(records, profiles, gateway, max_workers=max_workers)
    save_bank(bank_obj, out)
    click.echo(
        f"bank written to {out}: {bank_obj.n_records} records x "
        f"{bank_obj.n_models} models, dim {bank_obj.dim}"
    )


@bank.command("extend")
@click.option("--bank", "bank_path", required=True, type=click.Path(exists=True))
@click.option("--records", "records_path", type=click.Path(exists=True))
@click.option("--profiles", "profiles_path", type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path(), help="Target directory; defaults to <bank>.v<n>.")
@click.option("--replay", "replay_path", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@guarded
def bank_extend(bank_path, records_path, profiles_path, out_path, replay_path, config_path):
    """Grow a bank with new records and/or new models; writes a new
    directory, the source bank is never modified."""
    if not records_path and not profiles_path:
        raise ValueError("nothing to extend: pass --records and/or --profiles")
    base = load_bank(bank_path)
    records = _load_records(records_path) if records_path else []
    profiles = _load_profiles(profiles_path) if profiles_path else []
    backend = _make_backend(replay_path, config_path)
    gateway = Gateway(list(base.models) + list(profiles), backend)
    grown = extend_bank(base, records, profiles, gateway)
    if out_path:
        target = Path(out_path)
    else:
        n = 2
        while Path(f"{bank_path}.v{n}").exists():
            n += 1
        target = Path(f"{bank_path}.v{n}")
    save_bank(grown, target)
    click.echo(
        f"bank written to {target}: {grown.n_records} records x {grown.n_models} models"
    )


@bank.command("inspect")
@click.option("--bank", "bank_path", required=True, type=click.Path(exists=True))
@click.option("--json", "as_json", is_flag=True)
@guarded
def bank_inspect(bank_path, as_json):
    """Validate a bank directory and print its shape and registry."""
    bank_obj = load_bank(bank_path)
    tags: dict[str, int] = {}
    for rec in bank_obj.records:
        tags[rec.source_tag] = tags.get(rec.source_tag, 0) + 1
    info = {
        "path": str(bank_path),
        "dim": bank_obj.dim,
        "n_records": bank_obj.n_records,
        "n_models": bank_obj.n_models,
        "models": [p.to_dict() for p in bank_obj.models],
        "source_tags": dict(sorted(tags.items())),
        "truncated_embeddings": len(bank_obj.truncations),
    }
    if as_json:
        _echo_json(info)
        return
    click.echo(f"bank {bank_path}: {info['n_records']} records x {info['n_models']} models, dim {info['dim']}")
    for p in bank_obj.models:
        click.echo(
            f"  {p.model_id}  in ${p.input_price_per_mtok}/Mtok  out ${p.output_price_per_mtok}/Mtok"
        )
    click.echo(f"  source tags: {info['source_tags']}")
    if bank_obj.truncations:
        click.echo(f"  truncated embeddings: {len(bank_obj.truncations)}")


# ---- route ----

@main.command("route")
@click.option("--bank", "bank_path", required=True, type=click.Path(exists=True))
@click.option("--query", required=True)
@click.option("--query-id", default=None)
@click.option("--replay", "replay_path", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--router-only", is_flag=True, help="Skip aggregation; commit to the single best model.")
@click.option("--explain", is_flag=True, help="Keep raw similarity terms in the decision.")
@click.option("--dry-run", is_flag=True, help="Score support and candidates without any chat call.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Config override, repeatable.")
@click.option("--json", "as_json", is_flag=True, help="Print the full decision as JSON.")
@click.option("--trace-path", default="decisions.jsonl", show_default=True)
@click.option("--no-trace", is_flag=True, help="Do not append this decision to the trace file.")
@guarded
def route(
    bank_path, query, query_id, replay_path, config_path, router_only,
    explain, dry_run, overrides, as_json, trace_path, no_trace,
):
    """Route one query against a bank."""
    bank_obj = load_bank(bank_path)
    backend = _make_backend(replay_path, config_path)
    gateway = Gateway(bank_obj.models, backend)
    cfg = OrchestratorConfig().with_overrides(_parse_overrides(overrides))

    if dry_run:
        from .bank import normalize_embedding

        e = normalize_embedding(gateway.embed(query))
        support = select_support(bank_obj, e, cfg.n_base, cfg.tolerance)
        coarse = coarse_scores(bank_obj, support)
        k = min(cfg.k, bank_obj.n_models)
        candidates = select_candidates(coarse, k)
        _echo_json(
            {
                "dry_run": True,
                "support_size": support.size,
                "aggregator_id": bank_obj.models[select_aggregator(coarse)].model_id,
                "candidate_ids": [bank_obj.models[j].model_id for j in candidates],
                "coarse": {p.model_id: float(c) for p, c in zip(bank_obj.models, coarse)},
            }
        )
        return

    decision = infer(
        query, bank_obj, cfg, gateway,
        query_id=query_id, router_only=router_only, explain=explain,
    )
    cost = gateway.ledger.total_microdollars()
    if not no_trace:
        DecisionTrace(trace_path).append(decision, cost)
    if as_json:
        _echo_json({"decision": decision.to_dict(), "microdollars": cost})
        return
    click.echo(f"query_id: {decision.query_id}")
    click.echo(f"verdict: {decision.verdict} via {', '.join(decision.final_aggregatee_ids)}")
    click.echo(f"aggregator: {decision.aggregator_id}")
    click.echo(f"cost: {cost} microdollars")
    for note in decision.annotations:
        click.echo(f"note: {note}")
    click.echo(decision.final_response)


# ---- eval ----

@main.group("eval")
def eval_group():
    """Replay-based evaluation: accuracy, ablations, audits, sweeps."""


def _eval_inputs(bank_path, records_path, replay_path, config_path):
    bank_obj = load_bank(bank_path)
    records = _load_records(records_path)
    backend = _make_backend(replay_path, config_path)
    return bank_obj, records, Gateway(bank_obj.models, backend)


@eval_group.command("run")
@click.option("--bank", "bank_path", required=True, type=click.Path(exists=True))
@click.option("--records", "records_path", required=True, type=click.Path(exists=True))
@click.option("--replay", "replay_path", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--grading", type=click.Choice(["recorded", "exact"]), default="recorded", show_default=True)
@click.option("--router-only", is_flag=True)
@click.option("--lenient", is_flag=True, help="Grade decisions that degraded after failed calls.")
@click.option("--workers", default=4, show_default=True)
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
@click.option("--json-out", type=click.Path())
@click.option("--csv-out", type=click.Path())
@guarded
def eval_run(
    bank_path, records_path, replay_path, config_path, grading,
    router_only, lenient, workers, overrides, json_out, csv_out,
):
    """Route a test set and grade every answer."""
    bank_obj, records, gateway = _eval_inputs(bank_path, records_path, replay_path, config_path)
    cfg = OrchestratorConfig().with_overrides(_parse_overrides(overrides))
    report = evaluate(
        bank_obj, records, cfg, gateway,
        grading=grading, router_only=router_only, strict=not lenient, workers=workers,
    )
    click.echo(
        f"accuracy {report.accuracy:.4f} ({report.n_correct}/{report.n_queries}), "
        f"verdicts {report.verdict_counts()}, cost {report.total_microdollars()} microdollars"
    )
    for tag, stats in report.per_tag().items():
        click.echo(f"  {tag}: {stats['correct']}/{stats['n']}")
    _write_out(json_out, report.to_json(), "report")
    _write_out(csv_out, report.to_csv(), "csv")


@eval_group.command("deviation")
@click.option("--bank", "bank_path", required=True, type=click.Path(exists=True))
@click.option("--records", "records_path", required=True, type=click.Path(exists=True))
@click.option("--replay", "replay_path", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--modes", default=",".join(ALL_MODES), show_default=True)
@click.option("--workers", default=4, show_default=True)
@click.option("--json-out", type=click.Path())
@guarded
def eval_deviation(bank_path, records_path, replay_path, config_path, modes, workers, json_out):
    """Measure per-model profile deviation under term ablations."""
    bank_obj, records, gateway = _eval_inputs(bank_path, records_path, replay_path, config_path)
    mode_list = tuple(m.strip() for m in modes.split(",") if m.strip())
    report = deviation_report(
        bank_obj, records, OrchestratorConfig(), gateway, modes=mode_list, workers=workers
    )
    for mode, mean in report.means().items():
        click.echo(f"{mode}: mean deviation {mean:.3f}")
    _write_out(json_out, report.to_json(), "report")


@eval_group.command("audit")
@click.option("--bank", "bank_path", required=True, type=click.Path(exists=True))
@click.option("--records", "records_path", required=True, type=click.Path(exists=True))
@click.option("--replay", "replay_path", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--workers", default=4, show_default=True)
@click.option("--json-out", type=click.Path())
@guarded
def eval_audit(bank_path, records_path, replay_path, config_path, workers, json_out):
    """Tally switch behavior by query difficulty tier."""
    bank_obj, records, gateway = _eval_inputs(bank_path, records_path, replay_path, config_path)
    report = switch_audit(bank_obj, records, OrchestratorConfig(), gateway, workers=workers)
    for tier, stats in report.tier_stats().items():
        if stats is None:
            click.echo(f"{tier}: no queries")
        else:
            click.echo(
                f"{tier}: n={stats['n']} routed={stats['routed_pct']:.1f}% "
                f"kept={stats['mean_remained']:.2f} removed={stats['mean_removed']:.2f}"
            )
    _write_out(json_out, report.to_json(), "report")


@eval_group.command("sweep")
@click.option("--records", "records_path", required=True, type=click.Path(exists=True), help="Bank-side records.")
@click.option("--test", "test_path", required=True, type=click.Path(exists=True), help="Held-out test records.")
@click.option("--profiles", "profiles_path", required=True, type=click.Path(exists=True))
@click.option("--replay", "replay_path", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--sizes", default=None, help="Comma-separated pool sizes; default 1..M.")
@click.option("--grading", type=click.Choice(["recorded", "exact"]), default="recorded", show_default=True)
@click.option("--router-only", is_flag=True)
@click.option("--workers", default=4, show_default=True)
@click.option("--json-out", type=click.Path())
@guarded
def eval_sweep(
    records_path, test_path, profiles_path, replay_path, config_path,
    sizes, grading, router_only, workers, json_out,
):
    """Evaluate growing prefixes of the model pool."""
    records = _load_records(records_path)
    test_records = _load_records(test_path)
    profiles = _load_profiles(profiles_path)
    backend = _make_backend(replay_path, config_path)
    size_list = tuple(int(s) for s in sizes.split(",")) if sizes else None
    report = scaling_sweep(
        records, test_records, profiles, OrchestratorConfig(), backend,
        sizes=size_list, grading=grading, router_only=router_only, workers=workers,
    )
    for point in report.points:
        r = point.report
        click.echo(f"pool {point.size}: accuracy {r.accuracy:.4f} ({r.n_correct}/{r.n_queries})")
    _write_out(json_out, report.to_json(), "report")


# ---- serve ----

@main.command("serve")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8080, show_default=True)
@guarded
def serve(config_path, host, port):
    """Start the HTTP routing service."""
    import uvicorn

    from .service import create_app_from_config

    app = create_app_from_config(config_path)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
