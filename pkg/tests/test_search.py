import random

import pytest
from hypothesis import given, strategies as st

from spatial_tts.clients import ScriptedChat
from spatial_tts.domain import ACTIONS, Action, ActionKind, EvidenceBuffer, FrameRecord, QuestionInstance
from spatial_tts.errors import GenerationError, TransportError, ValidationError
from spatial_tts.poses import trajectory_poses
from spatial_tts.scene import generate_question
from spatial_tts.search import (
    BeamNode,
    SearchConfig,
    SearchTrace,
    answer,
    expand,
    expected_world_calls,
    exhaustive_top_k,
    parse_answer,
    root_node,
    run_search,
    update_buffer,
)
from spatial_tts.verifiers import RandomVerifier, VerifierConfig, VisaVerifier

MF = ActionKind.MOVE_FORWARD


def _f(score, i=0):
    return FrameRecord(f"sha256:{i}", ACTIONS[i % 9], 1, score=score)


class CountingWorld:
    def __init__(self, world):
        self.world = world
        self.calls = 0

    def imagine(self, request):
        self.calls += 1
        return self.world.imagine(request)


@pytest.fixture
def question(scenes, oracle):
    return generate_question(scenes[0], 0)


def test_config_invariants():
    for bad in [dict(gamma=0), dict(top_k=0), dict(beam_width=0), dict(frames_per_rollout=0)]:
        with pytest.raises(ValidationError):
            SearchConfig(**bad)


def test_node_depth_matches_trajectory():
    with pytest.raises(ValidationError):
        BeamNode(0, None, trajectory_poses([Action(MF, 0.25)]), 0)


def test_buffer_top_k():
    buf = update_buffer(EvidenceBuffer(2), [_f(0.2, 0), _f(0.9, 1), _f(0.5, 2)])
    assert [e.score for e in buf.entries] == [0.9, 0.5]
    assert update_buffer(buf, [_f(0.1, 3)]) == buf


def test_buffer_ties_keep_first_inserted():
    buf = update_buffer(EvidenceBuffer(2), [_f(0.5, 0), _f(0.7, 1)])
    buf = update_buffer(buf, [_f(0.5, 2)])
    assert [e.image_ref for e in buf.entries] == ["sha256:1", "sha256:0"]


def test_buffer_rejects_unscored():
    with pytest.raises(ValidationError):
        update_buffer(EvidenceBuffer(1), [FrameRecord("r", ACTIONS[0], 1)])


@given(st.lists(st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), max_size=6), max_size=6), st.integers(1, 5))
def test_buffer_equals_sort_and_truncate(chunks, k):
    frames, buf, i = [], EvidenceBuffer(k), 0
    for chunk in chunks:
        batch = [_f(s, i + j) for j, s in enumerate(chunk)]
        i += len(chunk)
        frames += batch
        buf = update_buffer(buf, batch)
        assert list(buf.entries) == sorted(frames, key=lambda f: -f.score)[:k]


def test_expand_root_gives_nine_children(question, oracle):
    world, _ = oracle
    kids = expand(root_node(), world, RandomVerifier(0), question, SearchConfig(gamma=1))
    assert len(kids) == 9
    assert [k.trajectory.actions[-1] for k in kids] == list(ACTIONS)
    assert all(k.best_score == max(f.score for f in k.frames) for k in kids)


def test_expand_past_gamma_rejected(question, oracle):
    world, _ = oracle
    node = BeamNode(1, 0, trajectory_poses([ACTIONS[0]]), 1)
    with pytest.raises(ValidationError):
        expand(node, world, RandomVerifier(0), question, SearchConfig(gamma=1))


def test_failed_rollout_child_scores_zero(question, oracle):
    world, _ = oracle

    class Flaky:
        def imagine(self, request):
            if request.trajectory.actions[-1].kind is MF:
                raise GenerationError("refused")
            return world.imagine(request)

    kids = expand(root_node(), Flaky(), RandomVerifier(0), question, SearchConfig(gamma=1))
    assert [k.best_score for k in kids[:3]] == [0.0] * 3 and all(not k.frames for k in kids[:3])
    assert all(k.frames for k in kids[3:])


@pytest.mark.parametrize("gamma,bw", [(1, 3), (2, 3), (2, 9), (2, 1), (3, 2)])
def test_world_call_count(question, oracle, gamma, bw):
    world = CountingWorld(oracle[0])
    _, trace = run_search(question, SearchConfig(gamma=gamma, beam_width=bw, top_k=2), world, RandomVerifier(1))
    assert world.calls == trace.world_calls == expected_world_calls(gamma, bw)
    assert expected_world_calls(2, 9) == 90


def test_retained_nodes_dominate_discarded(question, oracle):
    _, trace = run_search(question, SearchConfig(gamma=3, beam_width=3, top_k=3), oracle[0], RandomVerifier(4))
    for depth in (1, 2, 3):
        recs = [r for r in trace.records if r.depth == depth]
        kept = [max(r.scores) for r in recs if r.retained]
        dropped = [max(r.scores) for r in recs if not r.retained]
        assert len(kept) == min(3, len(recs))
        if dropped:
            assert min(kept) >= max(dropped)


def test_full_width_search_equals_exhaustive(question, oracle):
    world, vlm = oracle
    for verifier in (RandomVerifier(2), VisaVerifier(VerifierConfig("visa"), vlm)):
        for gamma in (1, 2):
            buf, _ = run_search(question, SearchConfig(gamma=gamma, beam_width=9, top_k=4), world, verifier)
            expect = exhaustive_top_k(question, world, verifier, gamma, 4)
            key = lambda f: (f.image_ref, f.producing_action, f.depth, f.score)
            assert [key(f) for f in buf.entries] == [key(f) for f in expect]


def test_trace_roundtrip_and_determinism(question, oracle):
    cfg = SearchConfig(gamma=2, beam_width=3, top_k=3)
    _, t1 = run_search(question, cfg, oracle[0], RandomVerifier(9))
    _, t2 = run_search(question, cfg, oracle[0], RandomVerifier(9))
    assert t1.to_jsonl() == t2.to_jsonl()
    (back,) = SearchTrace.from_jsonl(t1.to_jsonl())
    assert back == t1
    assert sum(flag for r in t1.records for flag in r.in_buffer) == 3
    assert len(t1.selected_actions()) == 3


def test_parallel_expansion_matches_serial(question, oracle):
    a, ta = run_search(question, SearchConfig(gamma=2, top_k=3), oracle[0], RandomVerifier(3))
    b, tb = run_search(question, SearchConfig(gamma=2, top_k=3, parallel=4), oracle[0], RandomVerifier(3))
    assert a == b and ta.to_jsonl() == tb.to_jsonl()


# -- answering


@pytest.mark.parametrize(
    "text,n,expected",
    [
        ("Answer: B", 4, 1),
        ("answer: (c)", 4, None),
        ("The answer is C.", 4, 2),
        ("I think A. Answer: D", 4, 3),
        ("Answer: E, so B", 4, 1),
        ("B or B, maybe A", 4, 1),
        ("A then B", 4, 0),
        ("nothing here", 2, None),
        ("", 2, None),
    ],
)
def test_parse_answer(text, n, expected):
    assert parse_answer(text, n) == expected


def test_answer_prompt_and_parse():
    q = QuestionInstance("q", "sha256:x0", "Which?", ("w", "x", "y", "z"), 1)
    chat = ScriptedChat(["Answer: B"])
    buf = EvidenceBuffer(2, (_f(0.9, 1), _f(0.4, 2)))
    r = answer(q, buf, chat, verifier_name="visa", beam_depth=1)
    assert r.predicted_index == 1 and r.correct and not r.parse_failed
    from spatial_tts.prompts import Image

    refs = [p.ref for p in chat.calls[0][1] if isinstance(p, Image)]
    assert refs == ["sha256:x0", "sha256:1", "sha256:2"]
    assert r.selected_actions == (ACTIONS[1], ACTIONS[2])
    assert r.condition == ("visa", 2, 1)


def test_answer_empty_buffer_is_baseline():
    q = QuestionInstance("q", "sha256:x0", "Which?", ("a", "b"), 0)
    chat = ScriptedChat(["Answer: A"])
    answer(q, EvidenceBuffer(3), chat)
    from spatial_tts.prompts import Image

    assert [p.ref for p in chat.calls[0][1] if isinstance(p, Image)] == ["sha256:x0"]


def test_answer_parse_failure_and_backend_failure():
    q = QuestionInstance("q", "sha256:x0", "Which?", ("a", "b"), 1)
    r = answer(q, None, ScriptedChat(["no idea"]))
    assert r.predicted_index == 0 and r.parse_failed and r.error is None
    r = answer(q, None, ScriptedChat([TransportError("down")] * 3), retries=2)
    assert r.predicted_index == 0 and r.parse_failed and "TransportError" in r.error
    r = answer(q, None, ScriptedChat([TransportError("blip"), "Answer: B"]))
    assert r.predicted_index == 1 and r.error is None


def test_visa_beats_random_on_fixtures(scenes, oracle):
    world, vlm = oracle
    acc = {"visa": 0, "random": 0}
    for s in scenes[:20]:
        q = generate_question(s, 0)
        for name, v in [("visa", VisaVerifier(VerifierConfig("visa"), vlm)), ("random", RandomVerifier(0))]:
            buf, _ = run_search(q, SearchConfig(gamma=1, top_k=2), world, v)
            acc[name] += answer(q, buf, vlm).correct
    assert acc["visa"] >= acc["random"]
