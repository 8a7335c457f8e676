"""Command-line entry point: ``statefulrag {build,query,eval,stats}``.

Exit codes: 0 success, 2 configuration or input validation, 3 file
errors (unreadable corpus, missing or corrupt index), 4 backend failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import RunConfig, apply_overrides, load_config
from .errors import (
    BackendError,
    ConfigError,
    IndexFormatError,
    InvalidInputError,
    StatefulRAGError,
)
from .memory import Tier
from .metrics import aggregate_report
from .pipeline import Pipeline
from .report import format_summary, plot_routing, plot_token_bins, write_eval_outputs, write_summary
from .runner import Evaluator, load_corpus, load_questions, metric_record_from_dict, read_jsonl
from .tree import build_tree, load_tree, save_tree

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_BACKEND = 4

logger = logging.getLogger("statefulrag")


def _common(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("run settings (override the config file)")
    g.add_argument("--config", help="YAML config file")
    g.add_argument("--corpus", help="JSONL corpus, one {doc_id, text} per line")
    g.add_argument("--index", help="index file path")
    g.add_argument("--queries", help="JSONL question file")
    g.add_argument("--backend", choices=("stub", "remote"))
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("--tau", type=int, help="bypass the loop below this many leaves")
    g.add_argument("--gamma", type=float, help="verifier acceptance threshold")
    g.add_argument("--tmax", type=int, help="maximum loop iterations")
    g.add_argument("--beam-k", type=int, dest="beam_k")
    g.add_argument("--eta", type=float, help="child score threshold during traversal")
    g.add_argument("--topk", type=int, help="leaves returned by traversal")
    g.add_argument("--out", help="output file or directory")
    g.add_argument("--mg-snapshot", dest="mg_snapshot", help="global-memory snapshot to load and save")
    g.add_argument("--mg-mode", dest="mg_mode", choices=("persistent", "per_query"))
    g.add_argument("--anls", action="store_true", default=None, help="also compute ANLS")
    g.add_argument("--timings", action="store_true", default=None, help="include wall times in reports")
    g.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="statefulrag", description="Tree-indexed, verifier-guided retrieval.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build an index from a corpus")
    _common(p)

    p = sub.add_parser("query", help="answer one query against an index")
    _common(p)
    p.add_argument("text", help="the query")
    p.add_argument("--gold", action="append", help="reference answer (repeatable)")

    p = sub.add_parser("eval", help="evaluate a question file")
    _common(p)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("stats", help="aggregate an existing reports.jsonl")
    _common(p)
    p.add_argument("reports", help="reports.jsonl from a previous eval")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    return apply_overrides(
        cfg,
        corpus=args.corpus, index=args.index, queries=args.queries, out=args.out,
        backend=args.backend, seed=args.seed, workers=args.workers,
        mg_snapshot=args.mg_snapshot, mg_mode=args.mg_mode, anls=args.anls, timings=args.timings,
        **{
            "loop.tau": args.tau, "loop.gamma": args.gamma, "loop.max_iterations": args.tmax,
            "traversal.beam_k": args.beam_k, "traversal.eta": args.eta, "traversal.top_k": args.topk,
        },
    )


def _require(value: Optional[str], flag: str) -> str:
    if not value:
        raise ConfigError(f"{flag} is required")
    return value


def cmd_build(cfg: RunConfig) -> int:
    corpus = _require(cfg.corpus, "--corpus")
    index = _require(cfg.index or cfg.out, "--index")
    docs, skipped = load_corpus(corpus)
    if skipped:
        print(f"skipped {skipped} malformed corpus lines", file=sys.stderr)
    if not docs:
        raise InvalidInputError(f"corpus {corpus} contains no documents")
    backends = cfg.make_backends()
    memory = Evaluator(cfg, backends).new_memory()
    tree, stats = build_tree(docs, backends.embedder, backends.summarizer, memory, cfg.chunking)
    save_tree(tree, index)
    if cfg.mg_snapshot:
        memory.save_global(cfg.mg_snapshot)
    info = stats.to_dict()
    info.update(index=str(index), leaves=tree.leaf_count, depth=tree.depth,
                max_branching=tree.max_branching, global_entries=memory.size(Tier.GLOBAL))
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_query(cfg: RunConfig, text: str, gold: Optional[list[str]]) -> int:
    tree = load_tree(_require(cfg.index, "--index"))
    evaluator = Evaluator(cfg, tree=tree)
    memory = evaluator.new_memory()
    pipeline = Pipeline(evaluator.backends, memory, cfg.traversal, cfg.loop, evaluator.prompts)
    report, _ = pipeline.run(text, tree, gold=gold)
    if cfg.mg_snapshot:
        memory.save_global(cfg.mg_snapshot)
    payload = report.to_json(cfg.timings)
    if cfg.out:
        Path(cfg.out).write_text(payload + "\n", encoding="utf-8")
    print(report.answer)
    print(payload)
    if report.error:
        print(report.error, file=sys.stderr)
        return EXIT_BACKEND
    return EXIT_OK


def cmd_eval(cfg: RunConfig, figures: bool) -> int:
    records, skipped = load_questions(_require(cfg.queries, "--queries"))
    if skipped:
        print(f"skipped {skipped} malformed question records", file=sys.stderr)
    tree = load_tree(cfg.index) if cfg.index else None
    result = Evaluator(cfg, tree=tree).run(records)
    result.summary["skipped_records"] = skipped
    out = cfg.out or "statefulrag-eval"
    paths = write_eval_outputs(out, result.reports, result.metrics, result.summary, cfg.timings, figures)
    print(format_summary(result.summary))
    print(f"\nwrote {', '.join(str(p) for p in paths.values())}")
    if records and result.summary["errors"] == len(records) and any(
        (r.error or "").startswith("Backend") for r in result.reports
    ):
        return EXIT_BACKEND
    return EXIT_OK


def cmd_stats(cfg: RunConfig, reports_path: str) -> int:
    raw, skipped = read_jsonl(reports_path)
    records = []
    for rec in raw:
        try:
            records.append(metric_record_from_dict(rec, cfg.anls))
        except (TypeError, ValueError):
            skipped += 1
    summary = aggregate_report(records)
    summary["skipped_records"] = skipped
    if skipped:
        print(f"skipped {skipped} malformed report lines", file=sys.stderr)
    print(format_summary(summary))
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        write_summary(out / "summary.json", summary)
        plot_token_bins(summary, out / "token_bins.png")
        plot_routing(records, out / "routing.png")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "build":
            return cmd_build(cfg)
        if args.command == "query":
            return cmd_query(cfg, args.text, args.gold)
        if args.command == "eval":
            return cmd_eval(cfg, not args.no_figures)
        return cmd_stats(cfg, args.reports)
    except (ConfigError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, IndexFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except StatefulRAGError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
