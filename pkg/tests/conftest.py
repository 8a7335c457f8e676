from __future__ import annotations

import random

import numpy as np
import pytest

from statefulrag.gateway import Backends, HashingEmbedder, TruncatingSummarizer
from statefulrag.memory import MemoryPool
from statefulrag.stubs import OfflineChat
from statefulrag.tree import ChunkingConfig, Document, TamNode, TamTree, build_tree, LEAF, MID, HIGH, ROOT

WORDS = (
    "river mountain castle harbor engine violin orchard comet glacier lantern meadow archive "
    "falcon canyon reactor tapestry beacon quarry harvest compass summit ledger prism tundra "
    "cobalt saffron granite willow ember marble citadel delta vapor nickel basalt orbit"
).split()


def stub_backends(seed: int = 0, dim: int = 256) -> Backends:
    emb = HashingEmbedder(dim, seed)
    chat = OfflineChat(emb)
    return Backends(chat, chat, emb, TruncatingSummarizer())


@pytest.fixture
def backends() -> Backends:
    return stub_backends()


@pytest.fixture
def memory() -> MemoryPool:
    return MemoryPool()


def random_docs(rng: random.Random, n: int, words_per_doc: int = 12) -> list[Document]:
    return [
        Document(f"doc{i:03d}", " ".join(rng.choice(WORDS) for _ in range(words_per_doc)) + f" item{i}.")
        for i in range(n)
    ]


def small_chunks() -> ChunkingConfig:
    # one chunk per short synthetic document
    return ChunkingConfig(chunk_size=400, overlap=50, group_cap=8)


def tree_from_texts(texts: list[str], backends: Backends, memory: MemoryPool | None = None) -> TamTree:
    docs = [Document(f"d{i}", t) for i, t in enumerate(texts)]
    tree, _ = build_tree(docs, backends.embedder, backends.summarizer, memory, small_chunks())
    return tree


def random_tree(rng: np.random.Generator, n_leaves: int, dim: int = 16, max_children: int = 6) -> TamTree:
    """Random-shaped tree with random non-negative embeddings at every node."""
    def vec() -> np.ndarray:
        v = rng.random(dim)
        return (v / np.linalg.norm(v)).astype(np.float32)

    nodes: dict[str, TamNode] = {}
    level_ids = []
    for i in range(n_leaves):
        nid = f"L{i:06d}"
        nodes[nid] = TamNode(nid, LEAF, f"leaf {i}", vec(), [], f"doc{i}", 0)
        level_ids.append(nid)
    for level, prefix in ((MID, "M"), (HIGH, "H")):
        groups, i = [], 0
        while i < len(level_ids):
            size = int(rng.integers(1, max_children + 1))
            groups.append(level_ids[i:i + size])
            i += size
        level_ids = []
        for j, g in enumerate(groups):
            nid = f"{prefix}{j:06d}"
            nodes[nid] = TamNode(nid, level, f"{level} {j}", vec(), list(g))
            level_ids.append(nid)
    if len(level_ids) > 1:
        nodes["R000000"] = TamNode("R000000", ROOT, "root", vec(), list(level_ids))
        root = "R000000"
    else:
        root = level_ids[0]
    tree = TamTree(nodes, root)
    tree.validate()
    return tree


class VectorEmbedder:
    """Returns a fixed vector for every query text; for traversal oracles."""

    def __init__(self, vec: np.ndarray):
        self.vec = vec

    def embed(self, text: str) -> np.ndarray:
        return self.vec


# -- acceptance summary ----------------------------------------------------
# Tests marked ``criterion(number, title)`` get one PASS/FAIL line each in
# the terminal summary, whatever the verbosity or capture mode.

_CRITERIA: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    number, title = marker.args
    ok = _CRITERIA.get(number, (title, True))[1] and rep.passed
    _CRITERIA[number] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}: {title}")
