"""Run configuration: YAML file, command-line overrides, backend construction.

Example file (every key optional)::

    backend: stub            # stub | remote
    seed: 0
    workers: 1
    embed_dim: 256
    summary_cap: 512
    anls: false
    timings: false
    mg_mode: persistent      # persistent | per_query
    mg_snapshot: null        # path to a global-memory snapshot to load/save
    traversal: {beam_k: 2, eta: 0.1, top_k: 8}
    loop: {max_iterations: 2, gamma: 0.7, tau: 5, bypass: true, select_k: 4,
           navigator_rescoring: false, path_score_floor: 0.2,
           reasoner_token_budget: 2000, write_artifacts: true}
    chunking: {chunk_size: 800, overlap: 200, group_cap: 8}
    memory: {global: 100000, task: 1000, agent_private: 256, strict: false}
    remote:
      base_url: http://localhost:8000/v1
      default_model: small-model
      models: {reasoner: large-model}
      api_key_env: STATEFULRAG_API_KEY   # the key itself only comes from the environment
      timeout_s: 60
      retries: 2
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .errors import ConfigError, InvalidInputError
from .gateway import Backends, ChatSummarizer, HashingEmbedder, RemoteBackend, RemoteConfig, TruncatingSummarizer
from .memory import MemoryPool, Tier, deny_all_gate
from .pipeline import LoopConfig
from .stubs import OfflineChat
from .tree import ChunkingConfig, TraversalConfig


@dataclass
class RunConfig:
    corpus: Optional[str] = None
    index: Optional[str] = None
    queries: Optional[str] = None
    out: Optional[str] = None
    backend: str = "stub"
    seed: int = 0
    workers: int = 1
    embed_dim: int = 256
    summary_cap: int = 512
    anls: bool = False
    timings: bool = False
    mg_mode: str = "persistent"
    mg_snapshot: Optional[str] = None
    prompts_dir: Optional[str] = None
    traversal: TraversalConfig = field(default_factory=TraversalConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    chunking: ChunkingConfig = field(default_factory=ChunkingConfig)
    memory: dict[str, Any] = field(default_factory=dict)
    remote: RemoteConfig = field(default_factory=RemoteConfig)

    def validate(self) -> None:
        if self.backend not in ("stub", "remote"):
            raise ConfigError(f"backend must be 'stub' or 'remote', not {self.backend!r}")
        if self.mg_mode not in ("persistent", "per_query"):
            raise ConfigError(f"mg_mode must be 'persistent' or 'per_query', not {self.mg_mode!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        unknown = set(self.memory) - {"global", "task", "agent_private", "strict", "dynamic_gate"}
        if unknown:
            raise ConfigError(f"unknown memory settings: {sorted(unknown)}")

    def make_memory(self) -> MemoryPool:
        caps = {Tier(k): v for k, v in self.memory.items() if k in ("global", "task", "agent_private")}
        gate = deny_all_gate if self.memory.get("dynamic_gate") else None
        try:
            return MemoryPool(caps, strict=bool(self.memory.get("strict", False)), dynamic_gate=gate)
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from exc

    def make_backends(self) -> Backends:
        if self.backend == "stub":
            embedder = HashingEmbedder(self.embed_dim, self.seed)
            chat = OfflineChat(embedder, self.summary_cap)
            return Backends(chat, chat, embedder, TruncatingSummarizer(self.summary_cap))
        remote = RemoteBackend(self.remote)
        return Backends(remote, remote, remote, ChatSummarizer(remote, self.summary_cap))


_SECTIONS = {"traversal": TraversalConfig, "loop": LoopConfig, "chunking": ChunkingConfig, "remote": RemoteConfig}


def _build_section(name: str, cls, values: Any):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    allowed = {f.name for f in fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, InvalidInputError) as exc:
        raise ConfigError(f"invalid {name!r} settings: {exc}") from exc


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a mapping")
    allowed = {f.name for f in fields(RunConfig)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kwargs[key] = _build_section(key, _SECTIONS[key], value or {})
        else:
            kwargs[key] = value
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path: Optional[str | Path]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data)


def apply_overrides(cfg: RunConfig, **overrides: Any) -> RunConfig:
    """Apply non-None command-line values; section fields use ``section.field`` names."""
    for name, value in overrides.items():
        if value is None:
            continue
        if "." in name:
            section, attr = name.split(".", 1)
            target = getattr(cfg, section)
            setattr(target, attr, value)
            try:
                post_init = getattr(target, "__post_init__", None)
                if post_init:
                    post_init()
            except InvalidInputError as exc:
                raise ConfigError(str(exc)) from exc
        else:
            setattr(cfg, name, value)
    cfg.validate()
    return cfg
