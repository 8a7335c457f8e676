"""Three-tier shared memory guarded by a fixed role/tier access policy.

Tiers: ``global`` persists across queries (document chunk/embedding cache
and other non-answer artifacts), ``task`` holds the current query's shared
state, ``agent_private`` holds one store per owning role. ``task`` and
``agent_private`` are emptied by :meth:`MemoryPool.clear_query_scope`.

Each request goes through :func:`permit`: the base policy table first,
then inherited read access (write on a tier implies read), then an
optional dynamic gate which denies when absent.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Optional

from .errors import GoldLeakError, IndexFormatError, InvalidInputError, PermissionDenied

logger = logging.getLogger(__name__)


class Tier(str, Enum):
    GLOBAL = "global"
    TASK = "task"
    AGENT = "agent_private"


class Op(str, Enum):
    READ = "read"
    WRITE = "write"
    UPDATE = "update"


TAM_BUILDER = "tam_builder"
AGENTS = ("planner", "navigator", "retriever", "verifier", "reasoner", "summarizer", "embedder", TAM_BUILDER)

_R = frozenset({Op.READ})
_W = frozenset({Op.WRITE, Op.UPDATE})
_RW = _R | _W

# Agent-private access is handled separately: owner only.
BASE_POLICY: dict[str, dict[Tier, frozenset[Op]]] = {
    "planner": {Tier.GLOBAL: _R, Tier.TASK: _RW},
    "navigator": {Tier.GLOBAL: _R, Tier.TASK: _RW},
    "retriever": {Tier.GLOBAL: _R, Tier.TASK: _RW},
    "verifier": {Tier.TASK: _RW},
    "reasoner": {Tier.TASK: _R, Tier.GLOBAL: _W},
    TAM_BUILDER: {Tier.GLOBAL: _RW},
    "summarizer": {},
    "embedder": {},
}

GOLD_KEY_PREFIXES = ("gold:", "label:", "qa:", "answer:")

DynamicGate = Callable[[str, Tier, Op], Optional[bool]]


def _agent_name(agent: Any) -> str:
    return getattr(agent, "value", agent)


@dataclass(frozen=True)
class AccessRequest:
    agent: str
    tier: Tier
    op: Op
    key: str
    value: Any = None
    owner: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "agent", _agent_name(self.agent))
        object.__setattr__(self, "tier", Tier(self.tier))
        object.__setattr__(self, "op", Op(self.op))
        if self.owner is not None:
            object.__setattr__(self, "owner", _agent_name(self.owner))
        if self.op is Op.READ and self.value is not None:
            raise InvalidInputError("read requests carry no value")
        if self.op is not Op.READ and self.value is None:
            raise InvalidInputError(f"{self.op.value} requests need a value")
        if self.tier is Tier.AGENT and not self.owner:
            raise InvalidInputError("agent-private requests need an owner role")
        if self.tier is not Tier.AGENT and self.owner is not None:
            raise InvalidInputError("only agent-private requests take an owner")


def base_permission(agent: str, tier: Tier, op: Op, owner: Optional[str] = None) -> Optional[bool]:
    """True/False when the policy table decides, ``None`` when it is silent."""
    if tier is Tier.AGENT:
        return owner == agent
    if op in BASE_POLICY.get(agent, {}).get(tier, frozenset()):
        return True
    return None


def inherited_read_permission(agent: str, tier: Tier, owner: Optional[str] = None) -> Optional[bool]:
    if tier is Tier.AGENT:
        return owner == agent
    if Op.WRITE in BASE_POLICY.get(agent, {}).get(tier, frozenset()):
        return True
    return None


def permit(request: AccessRequest, dynamic_gate: Optional[DynamicGate] = None) -> bool:
    p = base_permission(request.agent, request.tier, request.op, request.owner)
    if p is None and request.op is Op.READ:
        p = inherited_read_permission(request.agent, request.tier, request.owner)
    if p is None:
        p = dynamic_gate(request.agent, request.tier, request.op) if dynamic_gate else None
    return bool(p)


def deny_all_gate(agent: str, tier: Tier, op: Op) -> Optional[bool]:
    return False


@dataclass
class MemoryEntry:
    value: Any
    writer: str
    access_count: int = 0
    accessors: set[str] = field(default_factory=set)


@dataclass
class TierStats:
    lookups: int = 0
    hits: int = 0
    writes: int = 0
    denials: int = 0
    evictions: int = 0

    @property
    def hit_rate(self) -> float:
        return self.hits / max(self.lookups, 1)

    def to_dict(self) -> dict[str, Any]:
        return {
            "lookups": self.lookups, "hits": self.hits, "writes": self.writes,
            "denials": self.denials, "evictions": self.evictions, "hit_rate": self.hit_rate,
        }


DEFAULT_CAPACITY = {Tier.GLOBAL: 100_000, Tier.TASK: 1_000, Tier.AGENT: 256}


class MemoryPool:
    """Permission-checked key/value tiers with FIFO eviction.

    Eviction removes the earliest-inserted entry; overwriting an existing
    key keeps its original insertion position. In ``strict`` mode a denied
    request raises :class:`PermissionDenied` after being logged.
    """

    def __init__(
        self,
        capacity: Optional[dict[Tier, int]] = None,
        strict: bool = False,
        dynamic_gate: Optional[DynamicGate] = None,
    ):
        self.capacity = dict(DEFAULT_CAPACITY)
        if capacity:
            self.capacity.update({Tier(k): int(v) for k, v in capacity.items()})
        if any(c < 1 for c in self.capacity.values()):
            raise InvalidInputError("capacities must be positive")
        self.strict = strict
        self.dynamic_gate = dynamic_gate
        self._stores: dict[tuple[Tier, Optional[str]], dict[str, MemoryEntry]] = {
            (Tier.GLOBAL, None): {},
            (Tier.TASK, None): {},
        }
        self.stats: dict[Tier, TierStats] = {t: TierStats() for t in Tier}
        self.denied: list[AccessRequest] = []
        self._lock = threading.RLock()

    def _store(self, tier: Tier, owner: Optional[str], create: bool = False) -> Optional[dict[str, MemoryEntry]]:
        key = (tier, owner if tier is Tier.AGENT else None)
        store = self._stores.get(key)
        if store is None and create:
            store = self._stores[key] = {}
        return store

    def _deny(self, request: AccessRequest) -> None:
        self.stats[request.tier].denials += 1
        self.denied.append(request)
        logger.debug("denied %s %s on %s[%s] key=%s", request.agent, request.op.value,
                     request.tier.value, request.owner or "", request.key)
        if self.strict:
            raise PermissionDenied(
                f"{request.agent} may not {request.op.value} {request.tier.value}"
                + (f"[{request.owner}]" if request.owner else "")
            )

    def read(self, request: AccessRequest) -> Any:
        if request.op is not Op.READ:
            raise InvalidInputError("read() needs a read request")
        with self._lock:
            if not permit(request, self.dynamic_gate):
                self._deny(request)
                return None
            stats = self.stats[request.tier]
            stats.lookups += 1
            store = self._store(request.tier, request.owner)
            entry = store.get(request.key) if store is not None else None
            if entry is None:
                return None
            stats.hits += 1
            entry.access_count += 1
            entry.accessors.add(request.agent)
            return entry.value

    def write(self, request: AccessRequest) -> bool:
        if request.op is Op.READ:
            raise InvalidInputError("write() needs a write or update request")
        if request.tier is Tier.GLOBAL and request.key.lower().startswith(GOLD_KEY_PREFIXES):
            raise GoldLeakError(f"refusing to store gold-answer material under {request.key!r} in global memory")
        with self._lock:
            if not permit(request, self.dynamic_gate):
                self._deny(request)
                return False
            store = self._store(request.tier, request.owner, create=True)
            stats = self.stats[request.tier]
            entry = store.get(request.key)
            if entry is not None:
                entry.value = request.value
                entry.writer = request.agent
            else:
                if len(store) >= self.capacity[request.tier]:
                    oldest = next(iter(store))
                    del store[oldest]
                    stats.evictions += 1
                store[request.key] = MemoryEntry(request.value, request.agent)
            stats.writes += 1
            return True

    def access(self, request: AccessRequest) -> Any:
        return self.read(request) if request.op is Op.READ else self.write(request)

    def clear_query_scope(self) -> None:
        with self._lock:
            self._stores[(Tier.TASK, None)] = {}
            for key in [k for k in self._stores if k[0] is Tier.AGENT]:
                del self._stores[key]

    def reset_global(self) -> None:
        with self._lock:
            self._stores[(Tier.GLOBAL, None)] = {}

    def keys(self, tier: Tier, owner: Optional[str] = None) -> list[str]:
        with self._lock:
            store = self._store(Tier(tier), owner)
            return list(store) if store else []

    def size(self, tier: Tier, owner: Optional[str] = None) -> int:
        return len(self.keys(tier, owner))

    def entry(self, tier: Tier, key: str, owner: Optional[str] = None) -> Optional[MemoryEntry]:
        store = self._store(Tier(tier), owner)
        return store.get(key) if store else None

    def is_query_scope_empty(self) -> bool:
        with self._lock:
            return not any(store for (tier, _), store in self._stores.items() if tier is not Tier.GLOBAL)

    def stats_dict(self) -> dict[str, Any]:
        with self._lock:
            return {t.value: s.to_dict() for t, s in self.stats.items()}

    def save_global(self, path: str | Path) -> None:
        with self._lock:
            entries = [{"key": k, "value": e.value} for k, e in self._stores[(Tier.GLOBAL, None)].items()]
        doc = {"format": "statefulrag-mg", "version": 1, "entries": entries}
        Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")

    def load_global(self, path: str | Path) -> int:
        """Load a snapshot into global memory without touching stats."""
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
            if doc.get("format") != "statefulrag-mg" or doc.get("version") != 1:
                raise IndexFormatError("not a global-memory snapshot")
            entries = [(e["key"], e["value"]) for e in doc["entries"]]
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise IndexFormatError(f"corrupt global-memory snapshot: {exc!r}") from exc
        with self._lock:
            store = self._stores[(Tier.GLOBAL, None)]
            for key, value in entries:
                if key not in store and len(store) >= self.capacity[Tier.GLOBAL]:
                    del store[next(iter(store))]
                store[key] = MemoryEntry(value, TAM_BUILDER)
        return len(entries)
