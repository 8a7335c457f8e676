"""Answer-quality metrics, confidence intervals and token-bin accounting."""

from __future__ import annotations

import math
import re
import string
from bisect import bisect_right
from collections import Counter
from dataclasses import asdict, dataclass
from statistics import NormalDist
from typing import Any, Iterable, Optional, Sequence

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)

TOKEN_BIN_EDGES = (300, 500, 800, 1200, 1800, 2500, 5000)


def _bin_labels(edges: Sequence[int]) -> list[str]:
    labels = [f"<{edges[0]}"]
    labels += [f"{lo}–{hi}" for lo, hi in zip(edges, edges[1:])]
    labels.append(f"{edges[-1]}+")
    return labels


TOKEN_BIN_LABELS = tuple(_bin_labels(TOKEN_BIN_EDGES))


def normalize_text(text: str) -> str:
    """Lower-case, drop punctuation, drop articles, collapse whitespace.

    Punctuation is deleted rather than replaced, so ``Asia-Pacific``
    becomes the single token ``asiapacific``.
    """
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def normalize_answer(text: str) -> list[str]:
    return normalize_text(text).split()


def exact_match(gold: str, pred: str) -> int:
    return int(normalize_answer(gold) == normalize_answer(pred))


def token_f1(gold: str, pred: str) -> float:
    g, p = normalize_answer(gold), normalize_answer(pred)
    if not g and not p:
        return 1.0
    if not g or not p:
        return 0.0
    common = sum((Counter(g) & Counter(p)).values())
    if common == 0:
        return 0.0
    precision, recall = common / len(p), common / len(g)
    return 2 * precision * recall / (precision + recall)


def lenient_accuracy(gold: str, pred: str) -> int:
    """1 when either normalized answer is a substring of the other."""
    g, p = normalize_text(gold), normalize_text(pred)
    if not g or not p:
        return int(g == p)
    return int(g in p or p in g)


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def anls(gold: str, pred: str, threshold: float = 0.5) -> float:
    g = " ".join(gold.lower().split())
    p = " ".join(pred.lower().split())
    if not g and not p:
        return 1.0
    sim = 1.0 - levenshtein(g, p) / max(len(g), len(p))
    return sim if sim >= threshold else 0.0


def best_over(golds: Sequence[str], pred: str, fn) -> float:
    return max(fn(g, pred) for g in golds) if golds else 0.0


def binomial_ci(p: float, n: int, level: float = 0.95) -> float:
    """Normal-approximation half-width of a binomial proportion interval."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if n < 1:
        raise ValueError("n must be >= 1")
    z = NormalDist().inv_cdf(0.5 + level / 2)
    return z * math.sqrt(p * (1 - p) / n)


def bin_tokens(count: int, edges: Sequence[int] = TOKEN_BIN_EDGES) -> str:
    """Bins are left-inclusive: 300 falls in ``300–500``."""
    if count < 0:
        raise ValueError("token count must be non-negative")
    return _bin_labels(edges)[bisect_right(edges, count)]


@dataclass
class MetricRecord:
    query_id: str
    em: int
    f1: float
    lenient: int
    anls: Optional[float]
    large_tokens: int
    token_bin: str
    routing: str = "loop"
    iterations: int = 0
    recovery: Optional[bool] = None
    mg_lookups: int = 0
    mg_hits: int = 0
    error: Optional[str] = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def score_answer(
    query_id: str,
    golds: Sequence[str],
    pred: str,
    large_tokens: int = 0,
    with_anls: bool = False,
    **extra: Any,
) -> MetricRecord:
    return MetricRecord(
        query_id=query_id,
        em=int(best_over(golds, pred, exact_match)),
        f1=best_over(golds, pred, token_f1),
        lenient=int(best_over(golds, pred, lenient_accuracy)),
        anls=best_over(golds, pred, anls) if with_anls else None,
        large_tokens=large_tokens,
        token_bin=bin_tokens(large_tokens),
        **extra,
    )


def _mean(values: Iterable[float]) -> float:
    values = list(values)
    return sum(values) / len(values) if values else 0.0


def aggregate_report(records: Sequence[MetricRecord]) -> dict[str, Any]:
    """Summary over per-query records: means, CIs, token bins, pipeline rates."""
    n = len(records)
    em = _mean(r.em for r in records)
    lenient = _mean(r.lenient for r in records)
    bins = {}
    for label in TOKEN_BIN_LABELS:
        members = [r for r in records if r.token_bin == label]
        bins[label] = {
            "count": len(members),
            "share": 100.0 * len(members) / n if n else 0.0,
            "em": _mean(r.em for r in members) if members else None,
        }
    anls_values = [r.anls for r in records if r.anls is not None]
    lookups = sum(r.mg_lookups for r in records)
    hits = sum(r.mg_hits for r in records)
    return {
        "n": n,
        "em": em,
        "f1": _mean(r.f1 for r in records),
        "lenient": lenient,
        "anls": _mean(anls_values) if anls_values else None,
        "em_ci95": binomial_ci(em, n) if n else None,
        "lenient_ci95": binomial_ci(lenient, n) if n else None,
        "large_tokens_mean": _mean(r.large_tokens for r in records),
        "token_bins": bins,
        "mg_lookups": lookups,
        "mg_hits": hits,
        "mg_hit_rate": hits / max(lookups, 1),
        "recovery_events": sum(1 for r in records if r.recovery),
        "recovery_rate": sum(1 for r in records if r.recovery) / n if n else 0.0,
        "second_iteration_rate": sum(1 for r in records if r.iterations >= 2) / n if n else 0.0,
        "bypass_rate": sum(1 for r in records if r.routing == "bypass") / n if n else 0.0,
        "errors": sum(1 for r in records if r.error),
    }
