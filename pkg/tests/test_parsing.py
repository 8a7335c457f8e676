import pytest

from statefulrag.errors import InvalidInputError, RenderError
from statefulrag.parsing import parse_navigator, parse_planner, parse_retriever, parse_rewriter, parse_verifier
from statefulrag.prompts import (
    NO_EVIDENCE,
    PromptLibrary,
    default_library,
    format_evidence,
    parse_evidence_block,
    render_prompt,
    section,
)
from statefulrag.state import (
    EvidenceItem,
    EvidenceSet,
    QueryType,
    Verdict,
    VerificationSignal,
    evidence_key,
    merge_evidence,
    new_state,
)


def ev(idx, score, text="text"):
    return EvidenceItem(evidence_key("d", idx), f"{text} {idx}", "d", idx, score, f"L{idx:06d}")


# -- parsers ---------------------------------------------------------------

def test_verifier_thirds():
    sig, fell_back = parse_verifier("RELEVANCE: 1.0\nSUFFICIENCY: 0.0\nCONSISTENCY: 0.0\nVERDICT: FAIL\nREASON: off-topic")
    assert not fell_back
    assert sig.aggregate == pytest.approx(0.333, abs=1e-3)
    assert sig.verdict is Verdict.FAIL and sig.reason == "off-topic"


def test_verifier_fallback_and_clamping():
    sig, fell_back = parse_verifier("I think it is fine")
    assert fell_back and sig.aggregate == 0.5 and sig.verdict is Verdict.FAIL and sig.reason == "unparseable"
    sig, _ = parse_verifier("**Relevance**: 1.7\nsufficiency: -2\nConsistency: 0.5 (ok)\nverdict: pass")
    assert (sig.relevance, sig.sufficiency, sig.consistency) == (1.0, 0.0, 0.5)
    assert sig.verdict is Verdict.PASS


def test_retriever_explicit_selection():
    sel = parse_retriever("CANDIDATE_1: 0.9\nCANDIDATE_2: 0.1\nSELECTED: 1", 2, 2)
    assert sel.selected == [1] and sel.fallback is None
    assert sel.scores == {1: 0.9, 2: 0.1}


def test_retriever_selection_truncated_and_filtered():
    sel = parse_retriever("SELECTED: 4, 9, 2, 2, 1, 3", 4, 3)
    assert sel.selected == [4, 2, 1]


def test_retriever_fallbacks():
    sel = parse_retriever("CANDIDATE_1: 0.2\nCANDIDATE_2: 0.8\nCANDIDATE_3: 0.5", 3, 2)
    assert sel.selected == [2, 3] and sel.fallback == "candidate_scores"
    sel = parse_retriever("nothing useful", 3, 2, [0.1, 0.3, 0.2])
    assert sel.selected == [2, 3] and sel.fallback == "cosine"


def test_planner_parse_and_fallback():
    plan, fell_back = parse_planner(
        "INTENT: find birthplace\nSUB_QUERIES: where born; which city\nENTITIES: Marie Curie\nTYPE: multi-hop", "q")
    assert not fell_back
    assert plan.sub_queries == ["where born", "which city"]
    assert plan.entities == ["Marie Curie"] and plan.query_type is QueryType.MULTI_HOP
    plan, fell_back = parse_planner("???", "Where was X born?")
    assert fell_back and plan.intent == "Where was X born?" and plan.query_type is QueryType.FACTUAL


def test_navigator_and_rewriter_parsers():
    assert parse_navigator("PATH_SCORE_1: 0.9\nPATH_SCORE_2: 0.3", 2) == [0.9, 0.3]
    assert parse_navigator("PATH_SCORE: 0.4", 3) == [0.4, 0.4, 0.4]
    assert parse_navigator("no", 2) is None
    assert parse_rewriter("REWRITTEN: who is X's  father") == "who is X's father"
    assert parse_rewriter("just one line") == "just one line"
    assert parse_rewriter("") is None


# -- prompts ---------------------------------------------------------------

def test_planner_prompt_output_lines():
    text = default_library().planner("Who wrote Hamlet?")
    for key in ("INTENT:", "SUB_QUERIES:", "ENTITIES:", "TYPE:"):
        assert key in text
    assert section(text, "Query:") == "Who wrote Hamlet?"


def test_verifier_prompt_criteria_and_retriever_cap():
    lib = default_library()
    v = lib.verifier("q", [ev(0, 0.5)])
    for key in ("RELEVANCE", "SUFFICIENCY", "CONSISTENCY", "VERDICT: PASS or FAIL"):
        assert key in v
    assert "max 3" in lib.retriever("q", [ev(0, 0.5)], 3)


def test_reasoner_prompt_has_system_text():
    system, user = default_library().reasoner("q", [ev(0, 0.5)])
    assert system and "q" in user
    full = render_prompt("reasoner", "q", [ev(0, 0.5)])
    assert full.startswith(system)


def test_render_is_byte_stable_and_validates_inputs():
    a = render_prompt("verifier", "q", [ev(0, 0.5), ev(1, 0.25)])
    assert a == render_prompt("verifier", "q", [ev(0, 0.5), ev(1, 0.25)])
    with pytest.raises(RenderError):
        render_prompt("verifier", "q")
    with pytest.raises(RenderError):
        render_prompt("retriever", "q", [])
    with pytest.raises(RenderError):
        render_prompt("navigator", "q")
    with pytest.raises(RenderError):
        render_prompt("unknown", "q")
    with pytest.raises(RenderError):
        render_prompt("planner", "")


def test_evidence_block_roundtrip():
    items = [ev(0, 0.75), ev(1, 0.125)]
    assert parse_evidence_block(format_evidence(items)) == [(0.75, "text 0"), (0.125, "text 1")]
    assert format_evidence([]) == NO_EVIDENCE


def test_custom_template_directory(tmp_path):
    # templates missing from the directory fall back to the packaged ones
    (tmp_path / "planner.txt").write_text("CUSTOM\nQuery: $query\n", encoding="utf-8")
    lib = PromptLibrary(tmp_path)
    assert lib.planner("x").startswith("CUSTOM")
    assert lib.verifier("x", []) == default_library().verifier("x", [])


# -- state -----------------------------------------------------------------

def test_merge_keeps_higher_score_and_orders():
    a = EvidenceSet([ev(0, 0.4), ev(1, 0.9)])
    b = EvidenceSet([ev(0, 0.6), ev(2, 0.4)])
    merged = merge_evidence(a, b)
    assert [(it.chunk_index, it.score) for it in merged] == [(1, 0.9), (0, 0.6), (2, 0.4)]


def test_evidence_invariants():
    with pytest.raises(InvalidInputError):
        EvidenceSet([ev(0, 0.1), ev(0, 0.2)])
    with pytest.raises(InvalidInputError):
        ev(0, 1.5)


def test_state_iteration_budget():
    s = new_state("q", 2)
    assert s.advance() == 1 and s.advance() == 2
    with pytest.raises(InvalidInputError):
        s.advance()
    with pytest.raises(InvalidInputError):
        new_state(" ")


def test_verification_aggregate():
    assert VerificationSignal(1, 1, 0, Verdict.FAIL, "").aggregate == pytest.approx(2 / 3)
