"""Prompt templates for the agent roles and their rendering.

Templates are plain-text files using ``$name`` placeholders. The packaged
set lives in ``statefulrag/prompts/``; pass a directory to
:class:`PromptLibrary` to use edited copies.
"""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path
from string import Template
from typing import Iterable, Optional

from .errors import RenderError
from .state import EvidenceItem

TEMPLATE_NAMES = (
    "planner", "navigator", "retriever", "verifier", "reasoner", "reasoner_system", "rewriter",
)
NO_EVIDENCE = "(no evidence)"
_EVIDENCE_LINE = re.compile(r"^\[(\d+)\] \(score=([0-9.]+)\) (.*)$")
_CANDIDATE_LINE = re.compile(r"^\[(\d+)\] (.*)$")


def flatten(text: str) -> str:
    return " ".join(text.split())


def format_candidates(items: Iterable[EvidenceItem]) -> str:
    lines = [f"[{i}] {flatten(it.text)}" for i, it in enumerate(items, start=1)]
    return "\n".join(lines) if lines else NO_EVIDENCE


def format_evidence(items: Iterable[EvidenceItem]) -> str:
    lines = [f"[{i}] (score={it.score:.4f}) {flatten(it.text)}" for i, it in enumerate(items, start=1)]
    return "\n".join(lines) if lines else NO_EVIDENCE


def parse_evidence_block(block: str) -> list[tuple[float, str]]:
    """Inverse of :func:`format_evidence`; used by the offline agents."""
    out = []
    for line in block.splitlines():
        m = _EVIDENCE_LINE.match(line.strip())
        if m:
            out.append((float(m.group(2)), m.group(3)))
    return out


def parse_candidate_block(block: str) -> list[str]:
    out = []
    for line in block.splitlines():
        m = _CANDIDATE_LINE.match(line.strip())
        if m:
            out.append(m.group(2))
    return out


class PromptLibrary:
    def __init__(self, directory: Optional[str | Path] = None):
        self.templates: dict[str, Template] = {}
        for name in TEMPLATE_NAMES:
            if directory is not None and (Path(directory) / f"{name}.txt").exists():
                text = (Path(directory) / f"{name}.txt").read_text(encoding="utf-8")
            else:
                text = resources.files("statefulrag").joinpath(f"prompts/{name}.txt").read_text(encoding="utf-8")
            self.templates[name] = Template(text)

    def render(self, name: str, **fields: object) -> str:
        if name not in self.templates:
            raise RenderError(f"no template named {name!r}")
        for key, value in fields.items():
            if value is None:
                raise RenderError(f"{name} prompt: missing value for {key!r}")
        try:
            return self.templates[name].substitute(**{k: str(v) for k, v in fields.items()}).rstrip() + "\n"
        except KeyError as exc:
            raise RenderError(f"{name} prompt: missing value for {exc.args[0]!r}") from exc
        except ValueError as exc:
            raise RenderError(f"{name} prompt: malformed template: {exc}") from exc

    def planner(self, query: str) -> str:
        return self.render("planner", query=flatten(query))

    def navigator(self, query: str, paths: list[str]) -> str:
        block = "\n".join(f"[{i}] {p}" for i, p in enumerate(paths, start=1)) or "(no paths)"
        return self.render("navigator", query=flatten(query), paths=block)

    def retriever(self, query: str, candidates: list[EvidenceItem], k: int) -> str:
        if k < 1:
            raise RenderError("retriever prompt: k must be positive")
        return self.render("retriever", query=flatten(query), candidates=format_candidates(candidates), k=k)

    def verifier(self, query: str, evidence: list[EvidenceItem]) -> str:
        return self.render("verifier", query=flatten(query), evidence=format_evidence(evidence))

    def reasoner(self, query: str, evidence: list[EvidenceItem]) -> tuple[str, str]:
        system = self.render("reasoner_system").strip()
        user = self.render("reasoner", query=flatten(query), evidence=format_evidence(evidence))
        return system, user

    def rewriter(self, original: str, previous: str, reason: str, evidence: list[EvidenceItem]) -> str:
        return self.render(
            "rewriter",
            original=flatten(original),
            previous=flatten(previous),
            reason=flatten(reason) or "(none)",
            evidence=format_evidence(evidence),
        )


_DEFAULT: PromptLibrary | None = None


def default_library() -> PromptLibrary:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = PromptLibrary()
    return _DEFAULT


def render_prompt(
    role: str,
    query: str,
    evidence: Optional[list[EvidenceItem]] = None,
    *,
    k: Optional[int] = None,
    paths: Optional[list[str]] = None,
    original: Optional[str] = None,
    reason: Optional[str] = None,
    library: Optional[PromptLibrary] = None,
) -> str:
    """Render the user prompt for ``role``; the reasoner's system text is prepended."""
    lib = library or default_library()
    if not query:
        raise RenderError(f"{role} prompt: missing query")
    if role == "planner":
        return lib.planner(query)
    if role == "navigator":
        if paths is None:
            raise RenderError("navigator prompt: missing paths")
        return lib.navigator(query, paths)
    if role in ("retriever", "verifier", "reasoner", "rewriter") and evidence is None:
        raise RenderError(f"{role} prompt: missing evidence")
    if role == "retriever":
        if k is None:
            raise RenderError("retriever prompt: missing k")
        return lib.retriever(query, evidence, k)
    if role == "verifier":
        return lib.verifier(query, evidence)
    if role == "reasoner":
        system, user = lib.reasoner(query, evidence)
        return system + "\n\n" + user
    if role == "rewriter":
        if original is None or reason is None:
            raise RenderError("rewriter prompt: missing original query or reason")
        return lib.rewriter(original, query, reason, evidence)
    raise RenderError(f"no prompt for role {role!r}")


def section(prompt: str, header: str) -> str:
    """Text following ``header`` up to the next blank line (inline or block)."""
    idx = prompt.find(header)
    if idx < 0:
        return ""
    rest = prompt[idx + len(header):]
    if rest.startswith("\n"):
        rest = rest[1:]
    else:
        rest = rest.lstrip(" ")
    end = rest.find("\n\n")
    return (rest if end < 0 else rest[:end]).strip()
