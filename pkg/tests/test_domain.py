import json

import pytest
from hypothesis import given, strategies as st

from spatial_tts.domain import (
    ACTIONS,
    Action,
    ActionKind,
    Claim,
    ClaimEvaluation,
    EvidenceBuffer,
    FrameRecord,
    ImaginedVideo,
    Pose,
    QuestionInstance,
    RunResult,
    Verdict,
    describe_actions,
    parse_action_phrases,
)
from spatial_tts.errors import ValidationError
from spatial_tts.poses import trajectory_poses

MF, TL, TR = ActionKind.MOVE_FORWARD, ActionKind.TURN_LEFT, ActionKind.TURN_RIGHT


def test_action_space_has_nine_elements():
    assert len(ACTIONS) == 9
    assert len(set(ACTIONS)) == 9


@pytest.mark.parametrize("kind,mag", [(MF, 0.3), (MF, 9.0), (TL, 0.5), (TR, 45.0)])
def test_illegal_magnitude_rejected(kind, mag):
    with pytest.raises(ValidationError):
        Action(kind, mag)


def test_action_buckets_and_descriptions():
    assert Action(MF, 0.75).bucket == 2
    assert Action(TL, 9).bucket == 0
    assert Action(TR, 18).describe() == "turning right 18°"
    assert Action(MF, 0.5).describe() == "moving forward 0.5 m"
    assert Action(TL, 27).inverse() == Action(TR, 27)
    with pytest.raises(ValidationError):
        Action(MF, 0.25).inverse()


def test_describe_and_parse_actions_roundtrip():
    acts = [Action(TL, 27), Action(MF, 0.75), Action(TR, 9)]
    assert parse_action_phrases(describe_actions(acts)) == acts


def test_pose_rejects_non_rotation():
    with pytest.raises(ValidationError):
        Pose((1, 0, 0, 0, 1, 0, 0, 0, 2), (0, 0, 0))
    with pytest.raises(ValidationError):
        Pose((1, 0, 0, 0, 1, 0, 0, 0, -1), (0, 0, 0))  # reflection


def test_question_invariants():
    with pytest.raises(ValidationError):
        QuestionInstance("q", "sha256:x", "?", ("only",))
    with pytest.raises(ValidationError):
        QuestionInstance("q", "sha256:x", "?", ("a", "b"), gold_index=2)


def test_frame_record_invariants():
    with pytest.raises(ValidationError):
        FrameRecord("r", Action(MF, 0.25), 0)
    with pytest.raises(ValidationError):
        FrameRecord("r", Action(MF, 0.25), 1, score=float("nan"))


def test_claim_single_sentence():
    assert Claim("  chair appears on the left side. ", ("a", "b")).text == "chair appears on the left side."
    with pytest.raises(ValidationError):
        Claim("chair appears. Lamp too", ("a", "b"))
    with pytest.raises(ValidationError):
        Claim("   ", ("a", "b"))


def test_confidence_bounds():
    with pytest.raises(ValidationError):
        ClaimEvaluation(Verdict.ENTAILED, 1.01)


def test_buffer_invariants():
    f = lambda s: FrameRecord(f"r{s}", Action(MF, 0.25), 1, score=s)
    with pytest.raises(ValidationError):
        EvidenceBuffer(1, (f(0.1), f(0.2)))
    with pytest.raises(ValidationError):
        EvidenceBuffer(2, (f(0.1), f(0.2)))
    assert EvidenceBuffer(3, (f(0.5), f(0.5), f(0.1))).truncated(2).entries == (f(0.5), f(0.5))


def test_run_result_index_bound():
    with pytest.raises(ValidationError):
        RunResult("q", 2, False, n_choices=2)


actions_st = st.sampled_from(ACTIONS)


def _roundtrip(obj):
    return type(obj).from_dict(json.loads(json.dumps(obj.to_dict())))


@given(st.lists(actions_st, min_size=1, max_size=5), st.floats(0, 1), st.booleans())
def test_serialization_roundtrip(actions, score, gold):
    traj = trajectory_poses(actions)
    frames = tuple(FrameRecord(f"sha256:{i}", a, i + 1, score=score, node_id=i) for i, a in enumerate(actions))
    objs = [
        actions[0],
        traj.final_pose,
        traj,
        frames[0],
        ImaginedVideo(frames, traj, "c"),
        Claim("lamp moves closer to the left edge", ("a", "b")),
        ClaimEvaluation(Verdict.CONTRADICTED, score, "r"),
        EvidenceBuffer(len(frames), frames),
        QuestionInstance("q1", "sha256:x", "Where?", ("yes", "no"), 1 if gold else None, "EgoM"),
        RunResult("q1", 1, True, tuple(actions), (-0.5, -1.0), "visa", 2, 1, gold_index=1),
    ]
    for obj in objs:
        assert _roundtrip(obj) == obj
