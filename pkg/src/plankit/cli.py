"""``plankit`` command line: curate, genbench, run, score, report, stats, plan-lint.

Exit codes: 0 success, 1 usage/validation error, 2 transport failure.
Every command that writes ``--out FILE`` also writes ``FILE.manifest.json``.
"""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .bench import GenSpec, generate, ingest_qa
from .client import AuthError, CapabilityError, ModelClient, TransportError
from .config import AppConfig, ConfigError, load_config
from .curate import corpus_stats, curate, default_limits, emit_training_file, processed_ids
from .lint import LintLimits, validate_plan
from .metrics import accuracy, compare_hops, format_gain, hop_stratified, nll_decompose, pooled_nll, qa_report, relative_gain
from .mock import FixtureServer
from .records import (
    Mode,
    PlanKind,
    RecordError,
    Task,
    dump_line,
    parse_corpus_file,
    parse_items,
    parse_traces,
    parse_triples,
    read_jsonl,
    serialize_items,
)
from .runner import load_shots, run_benchmark, score_triples

log = logging.getLogger("plankit")

EXIT_OK, EXIT_USER, EXIT_TRANSPORT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_usage()}")


# --------------------------------------------------------------------------- #
# helpers
# --------------------------------------------------------------------------- #


def manifest_path(out: str | Path) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def write_manifest(
    out: str | Path,
    argv: Sequence[str],
    config: AppConfig | None,
    *,
    seeds: dict[str, Any] | None = None,
    counts: dict[str, Any] | None = None,
    extra: dict[str, Any] | None = None,
) -> Path:
    manifest: dict[str, Any] = {
        "tool": "plankit",
        "version": __version__,
        "command": list(argv),
        "cwd": os.getcwd(),
        "config": config.to_json() if config else None,
        "config_hash": config.digest() if config else None,
        "seeds": seeds or {},
        "counts": counts or {},
    }
    if extra:
        manifest.update(extra)
    path = manifest_path(out)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _config(args: argparse.Namespace) -> AppConfig:
    cfg = load_config(getattr(args, "config", None))
    server = cfg.server
    if getattr(args, "model", None):
        server = replace(server, model=args.model)
    if getattr(args, "concurrency", None):
        server = replace(server, concurrency=args.concurrency)
    if getattr(args, "base_url", None):
        server = replace(server, base_url=args.base_url)
    return replace(cfg, server=server)


def _client(cfg: AppConfig, mock_dir: str | None) -> ModelClient:
    transport = FixtureServer(mock_dir).transport if mock_dir else None
    return ModelClient(cfg.server, transport=transport)


def _add_server_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML key-value config file")
    p.add_argument("--model")
    p.add_argument("--base-url")
    p.add_argument("--concurrency", type=int)
    p.add_argument("--mock-server", metavar="DIR", help="replay recorded responses from DIR instead of HTTP")


def packaged_shots(task: Task) -> Path:
    return Path(str(resources.files("plankit").joinpath(f"data/shots/{task.value}.jsonl")))


def _write(path: str | Path, data: bytes, *, append: bool = False) -> None:
    with open(path, "ab" if append else "wb") as fh:
        fh.write(data)


# --------------------------------------------------------------------------- #
# subcommands
# --------------------------------------------------------------------------- #


def cmd_curate(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg = _config(args)
    kind = PlanKind(args.kind)
    out = Path(args.out)
    rejected_path = out.with_name(out.name + ".rejected.jsonl")
    failed_path = out.with_name(out.name + ".failed.jsonl")
    pairs = parse_corpus_file(args.input)
    if args.resume:
        done = processed_ids(out, rejected_path)
        todo = [p for p in pairs if p.id not in done]
        prior_failed = [obj for _, obj in read_jsonl(failed_path)] if failed_path.exists() else []
        retry = {p.id for p in todo}
        keep_failed = [obj for obj in prior_failed if obj.get("id") not in retry]
    else:
        todo, keep_failed = pairs, []
        for path in (out, rejected_path):
            _write(path, b"")
    _write(failed_path, b"".join(dump_line(o) for o in keep_failed))

    limits = default_limits(kind)
    if args.max_words is not None:
        limits = replace(limits, max_words=args.max_words)
    sampling = cfg.sampling
    if args.seed is not None:
        sampling = replace(sampling, seed=args.seed)

    totals = {"n_input": len(pairs), "skipped": len(pairs) - len(todo), "accepted": 0, "rejected": 0,
              "transport_failures": 0, "requests": 0}
    rules: dict[str, int] = {}

    async def go() -> None:
        async with _client(cfg, args.mock_server) as client:
            for start in range(0, len(todo), args.chunk_size):
                chunk = todo[start : start + args.chunk_size]
                result = await curate(chunk, client, sampling, kind, limits=limits, resample=args.resample)
                _write(out, emit_training_file(result.outcome.accepted, args.format), append=True)
                _write(rejected_path, b"".join(dump_line(r.to_json()) for r in result.outcome.rejected), append=True)
                _write(failed_path, b"".join(dump_line(r.to_json()) for r in result.outcome.failed), append=True)
                totals["accepted"] += result.stats.n_accepted
                totals["rejected"] += result.stats.n_rejected
                totals["transport_failures"] += result.stats.n_transport_failures
                totals["requests"] += result.requests
                for rule, n in result.stats.n_rejected_by_rule.items():
                    rules[rule] = rules.get(rule, 0) + n
                log.info("curated %d/%d", min(start + args.chunk_size, len(todo)), len(todo))

    asyncio.run(go())
    stats = corpus_stats(parse_triples(out)) if args.format == "triple" else None
    write_manifest(
        out,
        argv,
        cfg,
        seeds={"sampling_seed": sampling.seed},
        counts={**totals, "rejected_by_rule": rules},
        extra={"stats": stats.to_json() if stats else None, "kind": kind.value},
    )
    print(json.dumps(totals))
    return EXIT_TRANSPORT if totals["transport_failures"] else EXIT_OK


def cmd_genbench(args: argparse.Namespace, argv: Sequence[str]) -> int:
    spec_args: dict[str, Any] = {"task": Task(args.task), "seed": args.seed, "n": args.n}
    if args.flips is not None:
        spec_args["num_flips"] = args.flips
    if args.words is not None:
        spec_args["num_words"] = args.words
    if args.max_depth is not None:
        spec_args["max_depth"] = args.max_depth
    if args.atoms is not None:
        spec_args["atoms"] = tuple(args.atoms)
    if args.prefix_len is not None:
        spec_args["prefix_len"] = tuple(args.prefix_len)
    if args.families is not None:
        spec_args["families"] = tuple(args.families.split(","))
    spec = GenSpec(**spec_args)
    items = generate(spec)
    _write(args.out, serialize_items(items))
    write_manifest(args.out, argv, None, seeds={"seed": args.seed}, counts={"items": len(items)})
    return EXIT_OK


def cmd_ingest(args: argparse.Namespace, argv: Sequence[str]) -> int:
    items = ingest_qa(args.input, args.format)
    _write(args.out, serialize_items(items))
    hops: dict[str, int] = {}
    for it in items:
        hops[str(it.hops)] = hops.get(str(it.hops), 0) + 1
    write_manifest(args.out, argv, None, counts={"items": len(items), "by_hops": hops})
    return EXIT_OK


def cmd_run(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg = _config(args)
    mode = Mode(args.mode)
    items = parse_items(args.bench)
    if args.shots:
        shots_path = Path(args.shots)
    else:
        tasks = {it.task for it in items}
        if len(tasks) != 1:
            raise UsageError("--shots is required when the benchmark mixes tasks")
        shots_path = packaged_shots(tasks.pop())
    shots = load_shots(shots_path, args.k, mode)

    async def go():
        async with _client(cfg, args.mock_server) as client:
            return await run_benchmark(items, shots, mode, client, cfg.eval_sampling, args.out, two_call=args.two_call)

    summary = asyncio.run(go())
    write_manifest(
        args.out,
        argv,
        cfg,
        seeds={"eval_seed": cfg.eval_sampling.seed},
        counts=summary.to_json(),
        extra={"mode": mode.value, "shots": str(shots_path), "k": args.k},
    )
    print(json.dumps(summary.to_json()))
    return EXIT_TRANSPORT if summary.failures else EXIT_OK


def cmd_score(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg = _config(args)
    triples = parse_triples(args.triples)

    async def go():
        async with _client(cfg, args.mock_server) as client:
            return await score_triples(client, triples, direct=args.direct)

    rows = asyncio.run(go())
    _write(args.out, b"".join(dump_line(r) for r in rows))
    summary: dict[str, Any] = {"n": len(rows)}
    if rows:
        planned = nll_decompose(
            [(r["id"], r["stage1"]["mean_nll"]) for r in rows], [(r["id"], r["stage2"]["mean_nll"]) for r in rows]
        )
        pooled = pooled_nll(
            [(r["stage1"]["sum_nll"], r["stage1"]["n_tokens"]) for r in rows],
            [(r["stage2"]["sum_nll"], r["stage2"]["n_tokens"]) for r in rows],
        )
        summary["planned"] = vars(planned)
        summary["planned_pooled"] = vars(pooled)
        if args.direct:
            summary["direct"] = vars(nll_decompose([], [(r["id"], r["direct"]["mean_nll"]) for r in rows]))
    write_manifest(args.out, argv, cfg, counts={"records": len(rows)}, extra={"summary": summary})
    print(json.dumps(summary))
    return EXIT_OK


def _metric_report(traces, items):
    if items and all(it.task is Task.MULTIHOP for it in items):
        if all(it.hops is not None for it in items):
            return hop_stratified(traces, items)
        return qa_report(traces, items)
    return accuracy(traces, items)


def cmd_report(args: argparse.Namespace, argv: Sequence[str]) -> int:
    items = parse_items(args.bench)
    report = _metric_report(parse_traces(args.traces), items)
    out: dict[str, Any] = {"report": report.to_json()}
    if args.baseline:
        base = _metric_report(parse_traces(args.baseline), items)
        out["baseline"] = base.to_json()
        gains: dict[str, Any] = {}
        for name in ("accuracy", "em", "f1"):
            b, t = getattr(base, name), getattr(report, name)
            if b is not None and t is not None:
                gain = relative_gain(b, t)
                gains[name] = {"gain_pct": gain, "display": format_gain(gain)}
        if report.per_hop is not None and base.per_hop is not None:
            gains["per_hop_em"] = {str(h): format_gain(g) for h, g in compare_hops(report, base, "em").items()}
            gains["per_hop_f1"] = {str(h): format_gain(g) for h, g in compare_hops(report, base, "f1").items()}
        out["relative_gain"] = gains
    text = json.dumps(out, indent=2) + "\n"
    Path(args.out).write_text(text, encoding="utf-8")
    write_manifest(args.out, argv, None, counts={"items": len(items)})
    print(text, end="")
    return EXIT_OK


def cmd_stats(args: argparse.Namespace, argv: Sequence[str]) -> int:
    stats = corpus_stats(parse_triples(args.input))
    out = {"stats": stats.to_json(), "table": stats.table()}
    text = json.dumps(out, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        write_manifest(args.out, argv, None, counts={"triples": stats.n_accepted})
    print(text, end="")
    return EXIT_OK


def cmd_lint(args: argparse.Namespace, argv: Sequence[str]) -> int:
    limits = LintLimits(max_words=args.max_words, require_def_or_statement=not args.allow_no_statement, prose=args.prose)
    lines = []
    accepted = 0
    for lineno, obj in read_jsonl(args.input):
        plan = obj.get("plan")
        if not isinstance(plan, str):
            raise RecordError("missing string field 'plan'", line=lineno, field="plan")
        report = validate_plan(plan, limits)
        accepted += report.accepted
        lines.append(dump_line({"id": obj.get("id", str(lineno)), **report.to_json()}))
    data = b"".join(lines)
    if args.out:
        _write(args.out, data)
        write_manifest(args.out, argv, None, counts={"plans": len(lines), "accepted": accepted})
    else:
        sys.stdout.write(data.decode("utf-8"))
    return EXIT_OK


# --------------------------------------------------------------------------- #
# parser
# --------------------------------------------------------------------------- #


def build_parser() -> _Parser:
    parser = _Parser(prog="plankit", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default=None)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("curate", help="annotate a prompt/response corpus with plans")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=[k.value for k in PlanKind], default="code")
    p.add_argument("--format", choices=["triple", "vanilla"], default="triple")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--resample", type=int, default=0, choices=[0, 1, 2])
    p.add_argument("--max-words", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--chunk-size", type=int, default=1000)
    _add_server_flags(p)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("genbench", help="generate a symbolic benchmark (or: genbench ingest-qa ...)")
    p.add_argument("--task", required=True, choices=["boolean", "coinflip", "lastletter", "dyck"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--flips", type=int)
    p.add_argument("--words", type=int)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--atoms", type=int, nargs=2, metavar=("MIN", "MAX"))
    p.add_argument("--prefix-len", type=int, nargs=2, metavar=("MIN", "MAX"))
    p.add_argument("--families", help="comma-separated subset of (),[],{},<>")
    p.set_defaults(func=cmd_genbench)

    p = sub.add_parser("ingest-qa", help="convert MuSiQue/HotpotQA files to the benchmark schema")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", required=True, choices=["musique", "hotpotqa"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("run", help="few-shot inference over a benchmark file")
    p.add_argument("--bench", required=True)
    p.add_argument("--mode", required=True, choices=[m.value for m in Mode])
    p.add_argument("--shots")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--out", required=True)
    p.add_argument("--two-call", action="store_true")
    _add_server_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("score", help="teacher-forced stage-1/stage-2 NLL for triples")
    p.add_argument("--triples", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--direct", action="store_true", help="also score the response without the plan")
    _add_server_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="accuracy or EM/F1 for a trace file")
    p.add_argument("--traces", required=True)
    p.add_argument("--baseline")
    p.add_argument("--bench", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("stats", help="corpus statistics of a triple file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("plan-lint", help="structural validation of plans")
    lint_sub = p.add_subparsers(dest="lint_command", parser_class=_Parser, required=True)
    v = lint_sub.add_parser("validate")
    v.add_argument("--in", dest="input", required=True)
    v.add_argument("--out")
    v.add_argument("--max-words", type=int, default=200)
    v.add_argument("--prose", action="store_true", help="natural-language plans")
    v.add_argument("--allow-no-statement", action="store_true")
    v.set_defaults(func=cmd_lint)
    return parser


def dispatch(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # "genbench ingest-qa ..." is spelled as a sub-action of genbench
    parse_argv = argv
    if len(argv) >= 2 and argv[0] == "genbench" and argv[1] == "ingest-qa":
        parse_argv = argv[1:]
    parser = build_parser()
    try:
        args = parser.parse_args(parse_argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        level = args.log_level or os.environ.get("PLANKIT_LOG_LEVEL", "WARNING")
        logging.basicConfig(
            level=level.upper(), format="%(asctime)s %(levelname)s %(name)s %(message)s", stream=sys.stderr
        )
        return args.func(args, argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USER
    except (AuthError, TransportError, CapabilityError) as exc:
        sys.stderr.write(f"plankit: transport failure: {exc}\n")
        return EXIT_TRANSPORT
    except (ConfigError, RecordError, ValueError, FileNotFoundError) as exc:
        sys.stderr.write(f"plankit: error: {exc}\n")
        return EXIT_USER


def main() -> None:
    sys.exit(dispatch())
