"""Deterministic rule-driven agents for offline runs and tests.

``OfflineChat`` answers every role by reading the rendered prompt, so the
same render/parse path is exercised as with a real model:

* planner: capitalized-word runs in the query become the entities;
* retriever: cosine top-k over the candidates with the stub embedder;
* verifier: passes iff every query entity occurs in the evidence;
* reasoner: answer span (``A: ...``) of the highest-scored evidence line;
* rewrite: appends entities still absent from the evidence to the query.
"""

from __future__ import annotations

import re
from typing import Callable, Optional

from .gateway import ChatReply, ChatRequest, Embedder, ModelRole, TruncatingSummarizer, cosine, count_tokens, first_sentence
from .prompts import NO_EVIDENCE, parse_candidate_block, parse_evidence_block, section

_STOP = {
    "who", "what", "which", "when", "where", "why", "how", "whose", "whom",
    "is", "was", "are", "were", "did", "does", "do", "has", "have", "had", "can", "could",
    "the", "a", "an", "in", "on", "of", "for", "and", "or", "to", "at", "by", "from",
    "i", "it", "its", "this", "that", "these", "those", "name", "tell", "give",
}
_ANSWER = re.compile(r"(?:^|[\s(\[])(?:A|Answer)\s*:\s*(.+?)(?=[.;]\s|[.;]$|\sQ:|$)")
_MAX_K = re.compile(r"max (\d+)")


def _strip_word(word: str) -> tuple[str, bool]:
    """Word without edge punctuation and possessive, plus whether a run break follows."""
    breaks = bool(re.search(r"[,;:?!.)\]]$", word))
    core = word.strip("\"'“”‘’()[]{}<>,;:?!.")
    core = re.sub(r"(?:'s|’s)$", "", core)
    return core, breaks


def capitalized_entities(text: str) -> list[str]:
    """Runs of consecutive capitalized words, question and function words removed."""
    entities: list[str] = []
    run: list[str] = []

    def flush() -> None:
        while run and run[0].lower() in _STOP:
            run.pop(0)
        if run:
            ent = " ".join(run)
            if ent not in entities:
                entities.append(ent)
        run.clear()

    for word in text.split():
        core, breaks = _strip_word(word)
        if core and core[0].isupper():
            run.append(core)
        else:
            flush()
        if breaks:
            flush()
    flush()
    return entities


def answer_span(text: str) -> Optional[str]:
    m = _ANSWER.search(text)
    if not m:
        return None
    span = m.group(1).strip().rstrip(".;")
    return span or None


def _reply(request: ChatRequest, text: str) -> ChatReply:
    prompt_tokens = count_tokens(request.user) + (count_tokens(request.system) if request.system else 0)
    return ChatReply(text, prompt_tokens, count_tokens(text))


def request_kind(request: ChatRequest) -> str:
    if request.role is ModelRole.PLANNER and "REWRITTEN:" in request.user:
        return "rewrite"
    return request.role.value


class OfflineChat:
    def __init__(self, embedder: Embedder, summary_cap: int = 512):
        self.embedder = embedder
        self._summarizer = TruncatingSummarizer(summary_cap)

    def chat(self, request: ChatRequest) -> ChatReply:
        kind = request_kind(request)
        handler = getattr(self, f"_{kind}", None)
        if handler is None:
            return _reply(request, "")
        return _reply(request, handler(request.user))

    def _sim(self, a: str, b: str) -> float:
        if not a.strip() or not b.strip():
            return 0.0
        return max(0.0, min(1.0, cosine(self.embedder.embed(a), self.embedder.embed(b))))

    def _planner(self, prompt: str) -> str:
        query = section(prompt, "Query:")
        ents = capitalized_entities(query)
        qtype = "multi-hop" if len(ents) >= 2 else "factual"
        return (
            f"INTENT: {query}\nSUB_QUERIES: {query}\n"
            f"ENTITIES: {', '.join(ents) if ents else 'none'}\nTYPE: {qtype}"
        )

    def _navigator(self, prompt: str) -> str:
        query = section(prompt, "Query:")
        paths = parse_candidate_block(section(prompt, "Paths:"))
        lines = [f"PATH_SCORE_{i}: {self._sim(query, p):.4f}" for i, p in enumerate(paths, start=1)]
        lines.append("RATIONALE: lexical overlap with the query")
        return "\n".join(lines)

    def _retriever(self, prompt: str) -> str:
        query = section(prompt, "Query:")
        cands = parse_candidate_block(section(prompt, "Candidates:"))
        m = _MAX_K.search(prompt)
        k = int(m.group(1)) if m else len(cands)
        scores = [round(self._sim(query, c), 4) for c in cands]
        lines = [f"CANDIDATE_{i}: {s:.4f}" for i, s in enumerate(scores, start=1)]
        ranked = sorted(range(1, len(cands) + 1), key=lambda i: (-scores[i - 1], i))[:k]
        lines.append("SELECTED: " + ", ".join(str(i) for i in ranked))
        return "\n".join(lines)

    def _verifier(self, prompt: str) -> str:
        query = section(prompt, "Query:")
        block = section(prompt, "Retrieved Evidence:")
        has_evidence = bool(block) and block != NO_EVIDENCE
        text = " ".join(t for _, t in parse_evidence_block(block)).lower()
        ents = capitalized_entities(query)
        missing = [e for e in ents if e.lower() not in text]
        relevance = 1.0 if has_evidence and (len(missing) < len(ents) or not ents) else 0.0
        sufficiency = 1.0 if has_evidence and not missing else 0.0
        consistency = 1.0 if has_evidence else 0.0
        verdict = "PASS" if relevance == sufficiency == consistency == 1.0 else "FAIL"
        if not has_evidence:
            reason = "no evidence retrieved"
        elif missing:
            reason = "missing entities: " + ", ".join(missing)
        else:
            reason = "all query entities covered"
        return (
            f"RELEVANCE: {relevance:.1f}\nSUFFICIENCY: {sufficiency:.1f}\n"
            f"CONSISTENCY: {consistency:.1f}\nVERDICT: {verdict}\nREASON: {reason}"
        )

    def _reasoner(self, prompt: str) -> str:
        items = parse_evidence_block(section(prompt, "Evidence:"))
        ranked = sorted(enumerate(items), key=lambda p: (-p[1][0], p[0]))
        for _, (_, text) in ranked:
            span = answer_span(text)
            if span:
                return span
        if ranked:
            return first_sentence(ranked[0][1][1])
        return "insufficient evidence"

    def _rewrite(self, prompt: str) -> str:
        original = section(prompt, "Original query:")
        previous = section(prompt, "Previous query:")
        reason = section(prompt, "Verifier feedback:")
        text = " ".join(t for _, t in parse_evidence_block(section(prompt, "Evidence:"))).lower()
        missing = [e for e in capitalized_entities(previous) if e.lower() not in text]
        if not missing:
            missing = [e for e in capitalized_entities(original) if e.lower() not in text]
        extra = missing
        if not extra:
            seen = set(previous.lower().split())
            extra = [w for w in re.findall(r"[A-Za-z][\w-]+", reason) if w.lower() not in seen][:4]
        new = " ".join([previous] + extra).strip()
        if new == previous:
            new = previous + " details"
        return f"REWRITTEN: {new}"

    def _summarizer(self, prompt: str) -> str:
        children = [ln[2:] for ln in prompt.splitlines() if ln.startswith("- ")]
        return self._summarizer.summarize(children or [prompt], "mid")


ReplyRule = Callable[[ChatRequest], Optional[str]]


class ScriptedChat:
    """Wraps a backend and substitutes replies for selected request kinds.

    ``rules`` maps a kind (role name, or ``"rewrite"``) to a callable that
    returns replacement reply text, or ``None`` to defer to ``base``.
    Every request is appended to ``calls``.
    """

    def __init__(self, base, rules: dict[str, ReplyRule]):
        self.base = base
        self.rules = rules
        self.calls: list[ChatRequest] = []

    def chat(self, request: ChatRequest) -> ChatReply:
        self.calls.append(request)
        rule = self.rules.get(request_kind(request))
        if rule is not None:
            text = rule(request)
            if text is not None:
                return _reply(request, text)
        return self.base.chat(request)
