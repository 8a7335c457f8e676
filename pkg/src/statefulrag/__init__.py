"""Tree-indexed evidence retrieval with a verifier-guided multi-agent loop and tiered shared memory."""

from .config import RunConfig, load_config
from .errors import (
    BackendError,
    ConfigError,
    GoldLeakError,
    IndexFormatError,
    InvalidInputError,
    PermissionDenied,
    StatefulRAGError,
)
from .gateway import Backends, HashingEmbedder, RemoteBackend, RemoteConfig, TruncatingSummarizer
from .memory import AccessRequest, MemoryPool, Op, Tier, permit
from .metrics import aggregate_report, anls, binomial_ci, exact_match, token_f1
from .pipeline import LoopConfig, Pipeline, rewrite_query, run_query
from .runner import Evaluator, QARecord
from .state import EvidenceItem, EvidenceSet, QueryReport, RetrievalState, VerificationSignal
from .stubs import OfflineChat, ScriptedChat
from .tree import ChunkingConfig, Document, TamTree, TraversalConfig, build_tree, load_tree, retrieve, save_tree

__version__ = "0.1.0"

__all__ = [
    "AccessRequest", "BackendError", "Backends", "ChunkingConfig", "ConfigError", "Document", "Evaluator",
    "EvidenceItem", "EvidenceSet", "GoldLeakError", "HashingEmbedder", "IndexFormatError", "InvalidInputError",
    "LoopConfig", "MemoryPool", "OfflineChat", "Op", "PermissionDenied", "Pipeline", "QARecord", "QueryReport",
    "RemoteBackend", "RemoteConfig", "RetrievalState", "RunConfig", "ScriptedChat", "StatefulRAGError", "TamTree",
    "Tier", "TraversalConfig", "TruncatingSummarizer", "VerificationSignal", "aggregate_report", "anls",
    "binomial_ci", "build_tree", "exact_match", "load_config", "load_tree", "permit", "retrieve", "rewrite_query",
    "run_query", "save_tree", "token_f1",
]
