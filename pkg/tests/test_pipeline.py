import pytest

from conftest import stub_backends, tree_from_texts
from statefulrag.errors import BackendError, InvalidInputError
from statefulrag.gateway import Backends, ChatRequest, ModelRole
from statefulrag.memory import MemoryPool, Tier
from statefulrag.pipeline import LoopConfig, Pipeline, rewrite_query
from statefulrag.prompts import default_library
from statefulrag.state import EvidenceItem, Verdict, VerificationSignal, evidence_key
from statefulrag.stubs import OfflineChat, ScriptedChat
from statefulrag.tree import TraversalConfig, flat_rank

FACTS = [
    "Q: Where was Marie Curie born? A: Warsaw. Marie Curie was a physicist.",
    "Q: Where was Albert Einstein born? A: Ulm. Albert Einstein developed relativity.",
    "Q: What river flows through Paris? A: the Seine. Paris is the capital of France.",
    "Q: Who painted the Mona Lisa? A: Leonardo da Vinci. The Louvre holds it.",
    "Q: When was the Eiffel Tower completed? A: 1889. Gustave Eiffel designed it.",
    "Q: Who formulated gravity? A: Isaac Newton. Newton was born in Woolsthorpe.",
    "Q: Where is Mount Fuji? A: Japan. It is a volcano near Tokyo.",
    "Q: Who wrote Hamlet? A: William Shakespeare. He lived in Stratford.",
]


def verifier_rule(scores):
    """Scripted verifier that returns the given (r, s, c) per call, in order."""
    it = iter(scores)

    def rule(req):
        r, s, c = next(it)
        return f"RELEVANCE: {r}\nSUFFICIENCY: {s}\nCONSISTENCY: {c}\nVERDICT: FAIL\nREASON: need more on Newton"
    return rule


def scripted(rules, seed=0):
    base = stub_backends(seed)
    chat = ScriptedChat(base.small, rules)
    return Backends(chat, chat, base.embedder, base.summarizer), chat


@pytest.fixture
def tree():
    return tree_from_texts(FACTS, stub_backends())


def roles(report):
    return [t.role for t in report.transcripts]


def test_bypass_when_fewer_than_tau_leaves():
    b = stub_backends()
    small = tree_from_texts(FACTS[:4], b)
    report, _ = Pipeline(b, MemoryPool(), loop=LoopConfig(tau=5)).run("Where was Marie Curie born?", small)
    assert report.routing == "bypass"
    assert roles(report) == ["reasoner"]
    assert report.answer == "Warsaw"
    five = tree_from_texts(FACTS[:5], b)
    report, _ = Pipeline(b, MemoryPool(), loop=LoopConfig(tau=5)).run("Where was Marie Curie born?", five)
    assert report.routing == "loop" and "planner" in roles(report)


def test_bypass_answer_equals_direct_reasoner_on_flat_ranking():
    b = stub_backends()
    small = tree_from_texts(FACTS[:3], b)
    q = "Where was Albert Einstein born?"
    report, _ = Pipeline(b, MemoryPool()).run(q, small)
    evidence = list(flat_rank(small, q, b.embedder, TraversalConfig().top_k))
    system, user = default_library().reasoner(q, evidence)
    direct = b.chat(ChatRequest(ModelRole.REASONER, user, system)).text
    assert report.answer == direct == "Ulm"


def test_early_accept_one_iteration(tree):
    b, chat = scripted({"verifier": verifier_rule([(1, 1, 1)])})
    report, _ = Pipeline(b, MemoryPool()).run("Who formulated gravity?", tree)
    assert report.n_iterations == 1
    assert roles(report).count("reasoner") == 1
    assert not any(t.stage == "rewrite" for t in report.transcripts)


def test_always_failing_verifier_stops_at_budget(tree):
    b, chat = scripted({"verifier": verifier_rule([(0, 0, 0)] * 5)})
    report, _ = Pipeline(b, MemoryPool()).run("Who formulated gravity?", tree)
    assert report.n_iterations == 2
    assert [t.stage for t in report.transcripts].count("rewrite") == 1
    assert roles(report).count("reasoner") == 1
    assert report.transcripts[-1].stage == "answer"
    # merged evidence from both rounds reaches the reasoner
    keys = {k for it in report.iterations for k in it.evidence_keys}
    assert {e["key"] for e in report.evidence} == keys


def test_tmax_one_never_rewrites(tree):
    b, chat = scripted({"verifier": verifier_rule([(0, 0, 0)])})
    report, _ = Pipeline(b, MemoryPool(), loop=LoopConfig(max_iterations=1)).run("Who wrote Hamlet?", tree)
    assert report.n_iterations == 1
    assert all(t.stage != "rewrite" for t in report.transcripts)


def test_failure_routes_to_planner_with_new_query(tree):
    b, chat = scripted({"verifier": verifier_rule([(1, 0, 0), (1, 1, 1)])})
    report, _ = Pipeline(b, MemoryPool()).run("Who formulated gravity?", tree)
    q1, q2 = (it.query for it in report.iterations)
    assert q1 != q2
    kinds = [("rewrite" if "REWRITTEN:" in c.user else c.role.value) for c in chat.calls]
    first_verify = kinds.index("verifier")
    assert kinds[first_verify + 1] == "rewrite" and kinds[first_verify + 2] == "planner"
    assert kinds.count("reasoner") == 1 and kinds[-1] == "reasoner"


def test_verdict_follows_threshold_not_stated_verdict(tree):
    b, _ = scripted({"verifier": lambda r: "RELEVANCE: 1\nSUFFICIENCY: 1\nCONSISTENCY: 0.5\nVERDICT: FAIL"})
    report, _ = Pipeline(b, MemoryPool(), loop=LoopConfig(gamma=0.7)).run("Who wrote Hamlet?", tree)
    assert report.n_iterations == 1 and report.iterations[0].verdict == "pass"
    verify = next(t for t in report.transcripts if t.stage == "verify")
    assert verify.parsed["stated_verdict"] == "fail"


def test_memory_flow_is_policy_conformant(tree):
    pool = MemoryPool(strict=True)
    b, _ = scripted({"verifier": verifier_rule([(0, 0, 0), (0, 0, 0)])})
    report, _ = Pipeline(b, pool).run("Who formulated gravity?", tree)
    assert report.error is None and not pool.denied
    assert pool.is_query_scope_empty()
    assert any(k.startswith("artifact:evidence:") for k in pool.keys(Tier.GLOBAL))
    assert pool.stats[Tier.TASK].writes > 0


def test_token_accounting(tree):
    b = stub_backends()
    report, _ = Pipeline(b, MemoryPool()).run("Who wrote Hamlet?", tree)
    reasoner = [t for t in report.transcripts if t.role == "reasoner"]
    assert len(reasoner) == 1
    assert report.large_tokens == reasoner[0].prompt_tokens + reasoner[0].completion_tokens > 0
    others = sum(t.prompt_tokens + t.completion_tokens for t in report.transcripts if t.role != "reasoner")
    assert report.small_tokens == others


def test_parse_failures_use_fallbacks(tree):
    b, _ = scripted({"planner": lambda r: "??", "retriever": lambda r: "??", "verifier": lambda r: "??"})
    report, _ = Pipeline(b, MemoryPool()).run("Who wrote Hamlet?", tree)
    fallbacks = {t.stage: t.fallback for t in report.transcripts if t.stage in ("plan", "retrieve", "verify")}
    assert fallbacks == {"plan": "whole_query", "retrieve": "cosine", "verify": "default_scores"}
    # 0.5 < 0.7 twice: both rounds run
    assert report.n_iterations == 2 and report.answer


def test_backend_failure_gives_partial_report(tree):
    def boom(req):
        raise BackendError("down")
    pool = MemoryPool()
    b, _ = scripted({"verifier": boom})
    report, _ = Pipeline(b, pool).run("Who wrote Hamlet?", tree)
    assert report.error and "down" in report.error
    assert pool.is_query_scope_empty()
    assert not any(t.role == "reasoner" for t in report.transcripts)


def test_rewrite_query_rules():
    b = stub_backends()
    ev = [EvidenceItem(evidence_key("d", 0), "X was a farmer.", "d", 0, 0.5)]
    fail = VerificationSignal(1, 0, 1, Verdict.FAIL, "missing: father")
    new, tr = rewrite_query("who is X's father", "who is X's father", fail, ev, b)
    assert "father" in new and new != "who is X's father"
    with pytest.raises(InvalidInputError):
        rewrite_query("q", "q", VerificationSignal(1, 1, 1, Verdict.PASS, ""), ev, b)

    def boom(req):
        raise BackendError("down")
    broken, _ = scripted({"rewrite": boom})
    new, tr = rewrite_query("orig", "prev", fail, ev, broken)
    assert new == "orig" and tr.fallback == "backend_error"


def test_stub_rewrite_appends_missing_entity():
    b = stub_backends()
    ev = [EvidenceItem(evidence_key("d", 0), "Marie Curie studied physics.", "d", 0, 0.5)]
    fail = VerificationSignal(1, 0, 1, Verdict.FAIL, "missing entities: Warsaw")
    new, _ = rewrite_query("Did Marie Curie live in Warsaw?", "Did Marie Curie live in Warsaw?", fail, ev, b)
    assert new.endswith("Warsaw")


def test_navigator_rescoring_drops_low_paths(tree):
    b, _ = scripted({"navigator": lambda r: "PATH_SCORE: 0.0"})
    loop = LoopConfig(navigator_rescoring=True, path_score_floor=0.5)
    report, _ = Pipeline(b, MemoryPool(), loop=loop).run("Who wrote Hamlet?", tree)
    nav = next(t for t in report.transcripts if t.stage == "navigate")
    assert nav.prompt and nav.fallback == "all_below_floor"
    b = stub_backends()
    report, _ = Pipeline(b, MemoryPool(), loop=loop).run("Who wrote Hamlet?", tree)
    nav = next(t for t in report.transcripts if t.stage == "navigate")
    assert nav.parsed["path_scores"]


def test_reasoner_budget_truncates(tree):
    b = stub_backends()
    report, _ = Pipeline(b, MemoryPool(), loop=LoopConfig(reasoner_token_budget=5)).run("Who wrote Hamlet?", tree)
    assert report.truncated and len(report.evidence) == 1


def test_loop_config_validation():
    with pytest.raises(InvalidInputError):
        LoopConfig(max_iterations=0)
    with pytest.raises(InvalidInputError):
        LoopConfig(gamma=1.5)
    with pytest.raises(InvalidInputError):
        LoopConfig(tau=0)
