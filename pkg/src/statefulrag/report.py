"""Report files and figures for evaluation runs.

An eval output directory holds:

* ``reports.jsonl``  one serialized query report per line, input order
* ``metrics.csv``    one row of per-query metrics
* ``summary.json``   aggregate numbers
* ``token_bins.png`` share of queries and EM per large-model token bin
* ``routing.png``    bypass / single pass / second pass / recovery counts
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import TOKEN_BIN_LABELS, MetricRecord  # noqa: E402
from .state import QueryReport  # noqa: E402

METRIC_COLUMNS = (
    "query_id", "em", "f1", "lenient", "anls", "large_tokens", "token_bin",
    "routing", "iterations", "recovery", "mg_lookups", "mg_hits", "error",
)
_PNG_META = {"Software": None}


def write_reports(path: str | Path, reports: Sequence[QueryReport], timings: bool = False) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in reports:
            fh.write(r.to_json(timings) + "\n")


def write_metrics_csv(path: str | Path, records: Sequence[MetricRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for rec in records:
            row = rec.to_dict()
            row["f1"] = f"{rec.f1:.4f}"
            if rec.anls is not None:
                row["anls"] = f"{rec.anls:.4f}"
            writer.writerow(row)


def write_summary(path: str | Path, summary: dict[str, Any]) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def plot_token_bins(summary: dict[str, Any], path: str | Path) -> None:
    bins = summary["token_bins"]
    labels = list(TOKEN_BIN_LABELS)
    shares = [bins[b]["share"] for b in labels]
    ems = [bins[b]["em"] for b in labels]
    fig, ax = plt.subplots(figsize=(8, 3.6))
    x = range(len(labels))
    ax.bar(x, shares, color="#4c72b0", width=0.65)
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_xlabel("large-model tokens per query")
    ax.set_ylabel("queries (%)")
    ax.set_ylim(0, 100)
    twin = ax.twinx()
    pts = [(i, e) for i, e in enumerate(ems) if e is not None]
    if pts:
        twin.plot([p[0] for p in pts], [p[1] for p in pts], "o", color="#c44e52")
    twin.set_ylim(0, 1.05)
    twin.set_ylabel("EM within bin", color="#c44e52")
    ax.set_title(f"Token-budget spectrum (n={summary['n']})")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def plot_routing(records: Sequence[MetricRecord], path: str | Path) -> None:
    counts = {
        "bypass": sum(1 for r in records if r.routing == "bypass"),
        "1 pass": sum(1 for r in records if r.routing != "bypass" and r.iterations <= 1),
        "2+ passes": sum(1 for r in records if r.iterations >= 2),
        "recovered": sum(1 for r in records if r.recovery),
    }
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(list(counts), list(counts.values()), color=["#8172b2", "#55a868", "#dd8452", "#c44e52"])
    ax.set_ylabel("queries")
    ax.set_title("Routing and verifier-triggered passes")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def write_eval_outputs(out_dir: str | Path, reports: Sequence[QueryReport], records: Sequence[MetricRecord],
                       summary: dict[str, Any], timings: bool = False, figures: bool = True) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "reports": out / "reports.jsonl",
        "metrics": out / "metrics.csv",
        "summary": out / "summary.json",
    }
    write_reports(paths["reports"], reports, timings)
    write_metrics_csv(paths["metrics"], records)
    write_summary(paths["summary"], summary)
    if figures:
        paths["token_bins"] = out / "token_bins.png"
        paths["routing"] = out / "routing.png"
        plot_token_bins(summary, paths["token_bins"])
        plot_routing(records, paths["routing"])
    return paths


def _fmt(value: Any, pct: bool = False) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{100 * value:.2f}%" if pct else f"{value:.4f}"
    return str(value)


def format_summary(summary: dict[str, Any]) -> str:
    """Plain-text tables for terminal output."""
    rows = [
        ("queries", _fmt(summary["n"])),
        ("EM", f"{_fmt(summary['em'])} ± {_fmt(summary['em_ci95'])}"),
        ("token F1", _fmt(summary["f1"])),
        ("lenient acc", f"{_fmt(summary['lenient'])} ± {_fmt(summary['lenient_ci95'])}"),
        ("ANLS", _fmt(summary["anls"])),
        ("large-model tokens/query", f"{summary['large_tokens_mean']:.1f}"),
        ("Mg hit rate", _fmt(summary["mg_hit_rate"], pct=True)),
        ("bypass rate", _fmt(summary["bypass_rate"], pct=True)),
        ("second-pass rate", _fmt(summary["second_iteration_rate"], pct=True)),
        ("recovery rate", _fmt(summary["recovery_rate"], pct=True)),
        ("errors", _fmt(summary["errors"])),
    ]
    width = max(len(k) for k, _ in rows)
    lines = [f"{k.ljust(width)}  {v}" for k, v in rows]
    lines.append("")
    lines.append(f"{'token bin'.ljust(12)} {'share':>8} {'count':>7} {'EM':>7}")
    for label, b in summary["token_bins"].items():
        lines.append(f"{label.ljust(12)} {b['share']:7.1f}% {b['count']:7d} {_fmt(b['em']):>7}")
    return "\n".join(lines)
