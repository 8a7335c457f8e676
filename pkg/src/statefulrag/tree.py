"""Typed abstraction tree over a corpus: build, traverse, persist.

Leaves hold raw chunks; mid nodes summarize groups of similar leaves;
high nodes summarize groups of mid nodes; a root summarizes the high
nodes (or the single high node is promoted to root).
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np

from .errors import BuildError, IndexFormatError, IndexVersionError, InvalidInputError, StatefulRAGError
from .gateway import Embedder, Summarizer, normalize
from .memory import AccessRequest, MemoryPool, Op, Tier, TAM_BUILDER
from .state import EvidenceItem, EvidenceSet, PathStep, TraversalPath, evidence_key

logger = logging.getLogger(__name__)

LEAF, MID, HIGH, ROOT = "leaf", "mid", "high", "root"
LEVEL_RANK = {LEAF: 0, MID: 1, HIGH: 2, ROOT: 3}
FORMAT_NAME = "statefulrag-tree"
FORMAT_VERSION = 1


@dataclass
class Document:
    doc_id: str
    text: str
    metadata: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_record(cls, record: dict[str, Any]) -> "Document":
        if "doc_id" not in record or "text" not in record:
            raise InvalidInputError("document record needs 'doc_id' and 'text'")
        return cls(str(record["doc_id"]), str(record["text"]), dict(record.get("metadata") or {}))


@dataclass
class ChunkingConfig:
    chunk_size: int = 800
    overlap: int = 200
    group_cap: int = 8

    def __post_init__(self) -> None:
        if self.chunk_size < 1 or not 0 <= self.overlap < self.chunk_size:
            raise InvalidInputError("need chunk_size >= 1 and 0 <= overlap < chunk_size")
        if self.group_cap < 1:
            raise InvalidInputError("group_cap must be >= 1")


@dataclass
class TraversalConfig:
    beam_k: int = 2
    eta: float = 0.1
    top_k: int = 8

    def __post_init__(self) -> None:
        if self.beam_k < 1 or self.top_k < 1:
            raise InvalidInputError("beam_k and top_k must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise InvalidInputError("eta must lie in [0, 1]")


@dataclass
class TamNode:
    id: str
    level: str
    text: str
    embedding: np.ndarray
    children: list[str] = field(default_factory=list)
    doc_id: Optional[str] = None
    chunk_index: Optional[int] = None

    @property
    def is_leaf(self) -> bool:
        return self.level == LEAF


class TamTree:
    def __init__(self, nodes: dict[str, TamNode], root_id: str):
        self.nodes = nodes
        self.root_id = root_id

    @property
    def root(self) -> TamNode:
        return self.nodes[self.root_id]

    @property
    def leaves(self) -> list[TamNode]:
        return [n for n in self.nodes.values() if n.is_leaf]

    @property
    def leaf_count(self) -> int:
        return sum(1 for n in self.nodes.values() if n.is_leaf)

    def level_counts(self) -> dict[str, int]:
        counts = {LEAF: 0, MID: 0, HIGH: 0, ROOT: 0}
        for n in self.nodes.values():
            counts[n.level] += 1
        return counts

    @property
    def max_branching(self) -> int:
        return max((len(n.children) for n in self.nodes.values()), default=0)

    @property
    def avg_branching(self) -> float:
        inner = [len(n.children) for n in self.nodes.values() if n.children]
        return sum(inner) / len(inner) if inner else 0.0

    @property
    def depth(self) -> int:
        depth, node = 0, self.root
        while node.children:
            node = self.nodes[node.children[0]]
            depth += 1
        return depth

    @property
    def dim(self) -> int:
        return int(self.root.embedding.shape[0])

    def validate(self) -> None:
        if self.root_id not in self.nodes:
            raise IndexFormatError(f"root {self.root_id!r} missing")
        seen: set[str] = set()
        stack = [self.root_id]
        while stack:
            nid = stack.pop()
            if nid in seen:
                raise IndexFormatError(f"node {nid!r} reachable twice")
            seen.add(nid)
            node = self.nodes[nid]
            if node.is_leaf:
                if node.children:
                    raise IndexFormatError(f"leaf {nid!r} has children")
                if node.doc_id is None or node.chunk_index is None:
                    raise IndexFormatError(f"leaf {nid!r} lacks source reference")
            else:
                if not node.children:
                    raise IndexFormatError(f"inner node {nid!r} has no children")
                if not node.text.strip():
                    raise IndexFormatError(f"inner node {nid!r} has empty abstraction")
            for cid in node.children:
                if cid not in self.nodes:
                    raise IndexFormatError(f"dangling child {cid!r} of {nid!r}")
                if LEVEL_RANK[self.nodes[cid].level] >= LEVEL_RANK[node.level]:
                    raise IndexFormatError(f"level does not decrease from {nid!r} to {cid!r}")
                stack.append(cid)
        if seen != set(self.nodes):
            raise IndexFormatError("tree has unreachable nodes")

    def structurally_equal(self, other: "TamTree", atol: float = 1e-7) -> bool:
        if self.root_id != other.root_id or set(self.nodes) != set(other.nodes):
            return False
        for nid, a in self.nodes.items():
            b = other.nodes[nid]
            if (a.level, a.text, a.children, a.doc_id, a.chunk_index) != (
                b.level, b.text, b.children, b.doc_id, b.chunk_index
            ):
                return False
            if a.embedding.shape != b.embedding.shape or not np.allclose(a.embedding, b.embedding, atol=atol, rtol=0):
                return False
        return True


def leaf_count(tree: TamTree) -> int:
    return tree.leaf_count


def normalize_document_text(text: str) -> str:
    return " ".join(text.split())


def cache_key(text: str) -> str:
    return hashlib.sha256(normalize_document_text(text).encode("utf-8")).hexdigest()


def chunk_text(text: str, size: int = 800, overlap: int = 200) -> list[str]:
    """Fixed-size character windows; consecutive windows share ``overlap`` chars."""
    text = normalize_document_text(text)
    if not text:
        return []
    step = size - overlap
    chunks = []
    start = 0
    while True:
        chunks.append(text[start:start + size])
        if start + size >= len(text):
            break
        start += step
    return chunks


def greedy_cluster(ids: list[str], vectors: list[np.ndarray], cap: int) -> list[list[str]]:
    """Seed with the largest-norm unassigned item (lowest id on ties), then
    absorb its nearest unassigned neighbours by cosine until ``cap``."""
    if len(ids) != len(vectors):
        raise InvalidInputError("ids and vectors differ in length")
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    mat = np.array([np.asarray(vectors[i], dtype=np.float64) for i in order]) if ids else np.zeros((0, 1))
    norms = np.linalg.norm(mat, axis=1) if len(order) else np.zeros(0)
    unit = mat / np.where(norms == 0, 1.0, norms)[:, None] if len(order) else mat
    rounded = np.round(norms, 6)
    unassigned = list(range(len(order)))
    groups: list[list[str]] = []
    while unassigned:
        seed = max(unassigned, key=lambda i: (rounded[i], -i))
        rest = [i for i in unassigned if i != seed]
        sims = unit[rest] @ unit[seed] if rest else np.zeros(0)
        ranked = [i for _, i in sorted(zip((-sims).tolist(), rest))]
        members = [seed] + ranked[: cap - 1]
        groups.append([ids[order[i]] for i in sorted(members)])
        taken = set(members)
        unassigned = [i for i in unassigned if i not in taken]
    return groups


@dataclass
class BuildStats:
    documents: int = 0
    chunks: int = 0
    mg_lookups: int = 0
    mg_hits: int = 0
    level_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "documents": self.documents,
            "chunks": self.chunks,
            "mg_lookups": self.mg_lookups,
            "mg_hits": self.mg_hits,
            "mg_hit_rate": self.mg_hits / max(self.mg_lookups, 1),
            "level_counts": self.level_counts,
        }


def _doc_cache_entry(doc: Document, chunking: ChunkingConfig, embedder: Embedder) -> dict[str, Any]:
    chunks = chunk_text(doc.text, chunking.chunk_size, chunking.overlap)
    vectors = [embedder.embed(c) for c in chunks]
    return {
        "chunks": chunks,
        "embeddings": [np.asarray(v, dtype=np.float32).tolist() for v in vectors],
    }


def mg_doc_key(doc_text: str, chunking: ChunkingConfig) -> str:
    return f"doc:{cache_key(doc_text)}:c{chunking.chunk_size}-{chunking.overlap}"


def _summarize(summarizer: Summarizer, texts: list[str], level: str, node_id: str) -> str:
    try:
        text = summarizer.summarize(texts, level)
    except StatefulRAGError as exc:
        raise BuildError(f"summarizer failed: {exc}", node_id) from exc
    if not text or not text.strip():
        raise BuildError("summarizer returned empty abstraction", node_id)
    return text


def build_tree(
    documents: Iterable[Document],
    embedder: Embedder,
    summarizer: Summarizer,
    memory: Optional[MemoryPool] = None,
    chunking: Optional[ChunkingConfig] = None,
) -> tuple[TamTree, BuildStats]:
    """Build the abstraction tree, reusing per-document chunks and vectors
    cached in global memory when ``memory`` is given."""
    chunking = chunking or ChunkingConfig()
    stats = BuildStats()
    nodes: dict[str, TamNode] = {}
    leaf_ids: list[str] = []
    seen_docs: set[str] = set()

    for doc in documents:
        if not doc.text or not doc.text.strip():
            continue
        if doc.doc_id in seen_docs:
            logger.warning("skipping duplicate doc_id %r", doc.doc_id)
            continue
        seen_docs.add(doc.doc_id)
        stats.documents += 1
        key = mg_doc_key(doc.text, chunking)
        entry = None
        if memory is not None:
            stats.mg_lookups += 1
            entry = memory.read(AccessRequest(TAM_BUILDER, Tier.GLOBAL, Op.READ, key))
            if entry is not None:
                stats.mg_hits += 1
        if entry is None:
            entry = _doc_cache_entry(doc, chunking, embedder)
            if memory is not None:
                memory.write(AccessRequest(TAM_BUILDER, Tier.GLOBAL, Op.WRITE, key, entry))
        for idx, (chunk, vec) in enumerate(zip(entry["chunks"], entry["embeddings"])):
            nid = f"L{len(leaf_ids):06d}"
            nodes[nid] = TamNode(nid, LEAF, chunk, np.asarray(vec, dtype=np.float32), [], doc.doc_id, idx)
            leaf_ids.append(nid)
            stats.chunks += 1

    if not leaf_ids:
        raise InvalidInputError("corpus has no document with non-empty text")

    def make_level(child_ids: list[str], level: str, prefix: str) -> list[str]:
        groups = greedy_cluster(child_ids, [nodes[c].embedding for c in child_ids], chunking.group_cap)
        made = []
        for j, group in enumerate(groups):
            nid = f"{prefix}{j:06d}"
            text = _summarize(summarizer, [nodes[c].text for c in group], level, nid)
            nodes[nid] = TamNode(nid, level, text, normalize(embedder.embed(text)), list(group))
            made.append(nid)
        return made

    mid_ids = make_level(leaf_ids, MID, "M")
    high_ids = make_level(mid_ids, HIGH, "H")
    if len(high_ids) > 1:
        root_id = "R000000"
        text = _summarize(summarizer, [nodes[h].text for h in high_ids], ROOT, root_id)
        nodes[root_id] = TamNode(root_id, ROOT, text, normalize(embedder.embed(text)), list(high_ids))
    else:
        root_id = high_ids[0]

    tree = TamTree(nodes, root_id)
    tree.validate()
    stats.level_counts = tree.level_counts()
    return tree, stats


@dataclass
class TraversalResult:
    evidence: EvidenceSet
    path: TraversalPath
    comparisons: int
    max_beam: int
    rounds: int


def _sim(query_vec: np.ndarray, node: TamNode) -> float:
    return float(np.dot(query_vec, node.embedding.astype(np.float64)))


def retrieve(tree: TamTree, query: str, config: TraversalConfig, embedder: Embedder) -> TraversalResult:
    """Top-down beam routing from the root to leaf evidence.

    At each round every child of the non-leaf beam nodes is scored by
    cosine similarity to the query; up to ``beam_k`` children scoring at
    least ``eta`` are retained, or the single best child if none does.
    Reached leaves are reranked and the best ``top_k`` returned. Ties are
    broken by ascending node id.
    """
    if not query or not query.strip():
        raise InvalidInputError("query must be non-empty")
    qv = np.asarray(embedder.embed(query), dtype=np.float64)
    qn = float(np.linalg.norm(qv))
    qv = qv / qn if qn else qv
    root = tree.root
    steps = [PathStep(root.id, root.level, _sim(qv, root))]
    candidates: list[str] = []
    beam = [root.id]
    comparisons = rounds = 0
    max_beam = 1

    while any(not tree.nodes[b].is_leaf for b in beam):
        max_beam = max(max_beam, len(beam))
        candidates.extend(b for b in beam if tree.nodes[b].is_leaf)
        pool: list[str] = []
        for b in beam:
            node = tree.nodes[b]
            if not node.is_leaf:
                pool.extend(c for c in node.children if c not in pool)
        scores = {u: _sim(qv, tree.nodes[u]) for u in pool}
        comparisons += len(pool)
        rounds += 1
        ranked = sorted(pool, key=lambda u: (-scores[u], u))
        beam = [u for u in ranked if scores[u] >= config.eta][: config.beam_k]
        if not beam:
            beam = ranked[:1]
        steps.extend(PathStep(u, tree.nodes[u].level, scores[u]) for u in beam)

    candidates.extend(beam)
    unique = list(dict.fromkeys(candidates))
    leaf_scores = {v: _sim(qv, tree.nodes[v]) for v in unique}
    chosen = sorted(unique, key=lambda v: (-leaf_scores[v], v))[: config.top_k]
    items = []
    for v in chosen:
        node = tree.nodes[v]
        items.append(EvidenceItem(
            key=evidence_key(node.doc_id, node.chunk_index),
            text=node.text,
            doc_id=node.doc_id,
            chunk_index=node.chunk_index,
            score=min(1.0, max(0.0, leaf_scores[v])),
            node_id=v,
        ))
    path = TraversalPath(steps=steps, reached_leaves=unique)
    return TraversalResult(EvidenceSet(_dedupe_keys(items)), path, comparisons, max_beam, rounds)


def _dedupe_keys(items: list[EvidenceItem]) -> list[EvidenceItem]:
    seen: set[str] = set()
    out = []
    for it in items:
        if it.key not in seen:
            seen.add(it.key)
            out.append(it)
    return out


def flat_rank(tree: TamTree, query: str, embedder: Embedder, top_k: int) -> EvidenceSet:
    """Every leaf scored against the query; used by the bypass route."""
    qv = np.asarray(embedder.embed(query), dtype=np.float64)
    qn = float(np.linalg.norm(qv))
    qv = qv / qn if qn else qv
    leaves = tree.leaves
    scores = {n.id: _sim(qv, n) for n in leaves}
    ranked = sorted(leaves, key=lambda n: (-scores[n.id], n.id))[:top_k]
    items = [
        EvidenceItem(evidence_key(n.doc_id, n.chunk_index), n.text, n.doc_id, n.chunk_index,
                     min(1.0, max(0.0, scores[n.id])), n.id)
        for n in ranked
    ]
    return EvidenceSet(_dedupe_keys(items))


def _encode_vec(vec: np.ndarray) -> str:
    return base64.b64encode(np.asarray(vec, dtype="<f4").tobytes()).decode("ascii")


def _decode_vec(text: str, dim: int) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    vec = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if vec.shape != (dim,):
        raise IndexFormatError(f"embedding has {vec.size} values, expected {dim}")
    return vec


def dumps_tree(tree: TamTree) -> str:
    nodes = []
    for nid in sorted(tree.nodes):
        n = tree.nodes[nid]
        nodes.append({
            "id": n.id,
            "level": n.level,
            "text": n.text,
            "children": n.children,
            "doc_id": n.doc_id,
            "chunk_index": n.chunk_index,
            "embedding": _encode_vec(n.embedding),
        })
    doc = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "dim": tree.dim, "root": tree.root_id, "nodes": nodes}
    return json.dumps(doc, sort_keys=True, ensure_ascii=False, separators=(",", ":")) + "\n"


def loads_tree(text: str) -> TamTree:
    try:
        doc = json.loads(text)
    except ValueError as exc:
        raise IndexFormatError(f"index file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise IndexFormatError("not a statefulrag tree index")
    version = doc.get("version")
    if not isinstance(version, int):
        raise IndexFormatError("index version missing")
    if version > FORMAT_VERSION:
        raise IndexVersionError(f"index format version {version} is newer than supported {FORMAT_VERSION}")
    if version < 1:
        raise IndexVersionError(f"unsupported index format version {version}")
    try:
        dim = int(doc["dim"])
        nodes = {}
        for rec in doc["nodes"]:
            if rec["level"] not in LEVEL_RANK:
                raise IndexFormatError(f"unknown level {rec['level']!r}")
            nodes[rec["id"]] = TamNode(
                id=rec["id"],
                level=rec["level"],
                text=rec["text"],
                embedding=_decode_vec(rec["embedding"], dim),
                children=list(rec["children"]),
                doc_id=rec["doc_id"],
                chunk_index=rec["chunk_index"],
            )
        tree = TamTree(nodes, doc["root"])
    except (KeyError, TypeError, ValueError) as exc:
        raise IndexFormatError(f"malformed index: {exc!r}") from exc
    tree.validate()
    return tree


def save_tree(tree: TamTree, path: str | Path) -> None:
    Path(path).write_text(dumps_tree(tree), encoding="utf-8")


def load_tree(path: str | Path) -> TamTree:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise IndexFormatError(f"index file is not UTF-8 text: {exc}") from exc
    return loads_tree(text)
