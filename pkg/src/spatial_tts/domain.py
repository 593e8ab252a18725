"""Shared value types for the test-time scaling engine.

Every type is a frozen dataclass with ``to_dict``/``from_dict`` helpers that
produce the canonical JSON form (angles in degrees, distances in meters).
Images never appear inline; they are referenced by content hash.
"""

from __future__ import annotations

import enum
import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .errors import ValidationError

ORTHO_TOL = 1e-9


class ActionKind(str, enum.Enum):
    MOVE_FORWARD = "MoveForward"
    TURN_LEFT = "TurnLeft"
    TURN_RIGHT = "TurnRight"


FORWARD_MAGNITUDES = (0.25, 0.5, 0.75)
TURN_MAGNITUDES = (9.0, 18.0, 27.0)


def legal_magnitudes(kind: ActionKind) -> tuple[float, ...]:
    return FORWARD_MAGNITUDES if kind is ActionKind.MOVE_FORWARD else TURN_MAGNITUDES


@dataclass(frozen=True)
class Action:
    """A primitive egocentric move: meters for MoveForward, degrees for turns."""

    kind: ActionKind
    magnitude: float

    def __post_init__(self):
        object.__setattr__(self, "kind", ActionKind(self.kind))
        object.__setattr__(self, "magnitude", float(self.magnitude))
        if self.magnitude not in legal_magnitudes(self.kind):
            raise ValidationError(
                f"illegal magnitude {self.magnitude} for {self.kind.value}; "
                f"expected one of {legal_magnitudes(self.kind)}"
            )

    @property
    def bucket(self) -> int:
        """Magnitude bucket index 0..2 (0.25m/9deg, 0.5m/18deg, 0.75m/27deg)."""
        return legal_magnitudes(self.kind).index(self.magnitude)

    def inverse(self) -> "Action":
        if self.kind is ActionKind.MOVE_FORWARD:
            raise ValidationError("MoveForward has no inverse in the action space")
        other = ActionKind.TURN_RIGHT if self.kind is ActionKind.TURN_LEFT else ActionKind.TURN_LEFT
        return Action(other, self.magnitude)

    def describe(self) -> str:
        if self.kind is ActionKind.MOVE_FORWARD:
            return f"moving forward {self.magnitude:g} m"
        side = "left" if self.kind is ActionKind.TURN_LEFT else "right"
        return f"turning {side} {self.magnitude:g}°"

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "magnitude": self.magnitude}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Action":
        return cls(ActionKind(d["kind"]), d["magnitude"])


ACTIONS: tuple[Action, ...] = tuple(
    Action(kind, mag) for kind in ActionKind for mag in legal_magnitudes(kind)
)

_PHRASE = re.compile(
    r"(?:moving forward (?P<d>[0-9.]+) ?m|turning (?P<side>left|right) (?P<deg>[0-9.]+) ?°)"
)


def describe_actions(actions: Sequence[Action]) -> str:
    parts = [a.describe() for a in actions]
    if len(parts) <= 1:
        return "".join(parts)
    return ", then ".join(parts)


def parse_action_phrases(text: str) -> list[Action]:
    """Inverse of :func:`describe_actions`; unknown text is ignored."""
    out = []
    for m in _PHRASE.finditer(text):
        if m.group("d") is not None:
            out.append(Action(ActionKind.MOVE_FORWARD, float(m.group("d"))))
        else:
            kind = ActionKind.TURN_LEFT if m.group("side") == "left" else ActionKind.TURN_RIGHT
            out.append(Action(kind, float(m.group("deg"))))
    return out


@dataclass(frozen=True)
class Pose:
    """Rigid camera transform; rotation stored row-major as 9 floats."""

    rotation: tuple[float, ...]
    translation: tuple[float, float, float]

    def __post_init__(self):
        rot = tuple(float(x) for x in np.asarray(self.rotation, dtype=float).reshape(-1))
        tr = tuple(float(x) for x in np.asarray(self.translation, dtype=float).reshape(-1))
        if len(rot) != 9 or len(tr) != 3:
            raise ValidationError("pose needs a 3x3 rotation and a 3-vector translation")
        if not all(math.isfinite(x) for x in rot + tr):
            raise ValidationError("pose entries must be finite")
        R = np.array(rot).reshape(3, 3)
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValidationError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(tuple(np.eye(3).reshape(-1)), (0.0, 0.0, 0.0))

    @property
    def R(self) -> np.ndarray:
        return np.array(self.rotation).reshape(3, 3)

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def to_dict(self) -> dict[str, Any]:
        return {"rotation": list(self.rotation), "translation": list(self.translation)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Pose":
        return cls(tuple(d["rotation"]), tuple(d["translation"]))


@dataclass(frozen=True)
class Trajectory:
    """Ordered (action, cumulative pose) steps relative to the start camera."""

    steps: tuple[tuple[Action, Pose], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple((a, p) for a, p in self.steps))

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def actions(self) -> tuple[Action, ...]:
        return tuple(a for a, _ in self.steps)

    @property
    def final_pose(self) -> Pose:
        return self.steps[-1][1] if self.steps else Pose.identity()

    def to_dict(self) -> list[dict[str, Any]]:
        return [{"action": a.to_dict(), "pose": p.to_dict()} for a, p in self.steps]

    @classmethod
    def from_dict(cls, d: list[dict[str, Any]]) -> "Trajectory":
        return cls(tuple((Action.from_dict(s["action"]), Pose.from_dict(s["pose"])) for s in d))


def image_hash(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class QuestionInstance:
    qid: str
    image_ref: str
    question: str
    choices: tuple[str, ...]
    gold_index: Optional[int] = None
    category: str = "uncategorized"

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple(self.choices))
        if len(self.choices) < 2:
            raise ValidationError("a question needs at least two choices")
        if self.gold_index is not None and not 0 <= self.gold_index < len(self.choices):
            raise ValidationError(f"gold_index {self.gold_index} out of range")

    def to_dict(self) -> dict[str, Any]:
        return {
            "qid": self.qid,
            "image_ref": self.image_ref,
            "question": self.question,
            "choices": list(self.choices),
            "gold_index": self.gold_index,
            "category": self.category,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "QuestionInstance":
        return cls(
            qid=d["qid"],
            image_ref=d["image_ref"],
            question=d["question"],
            choices=tuple(d["choices"]),
            gold_index=d.get("gold_index"),
            category=d.get("category", "uncategorized"),
        )


@dataclass(frozen=True)
class FrameRecord:
    image_ref: str
    producing_action: Action
    depth: int
    score: Optional[float] = None
    quality_score: Optional[float] = None
    node_id: Optional[int] = None

    def __post_init__(self):
        if self.depth < 1:
            raise ValidationError("frame depth must be >= 1")
        if self.score is not None:
            object.__setattr__(self, "score", float(self.score))
            if not math.isfinite(self.score):
                raise ValidationError("frame score must be finite")

    def to_dict(self) -> dict[str, Any]:
        return {
            "image_ref": self.image_ref,
            "producing_action": self.producing_action.to_dict(),
            "depth": self.depth,
            "score": self.score,
            "quality_score": self.quality_score,
            "node_id": self.node_id,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FrameRecord":
        return cls(
            image_ref=d["image_ref"],
            producing_action=Action.from_dict(d["producing_action"]),
            depth=d["depth"],
            score=d.get("score"),
            quality_score=d.get("quality_score"),
            node_id=d.get("node_id"),
        )


@dataclass(frozen=True)
class ImaginedVideo:
    frames: tuple[FrameRecord, ...]
    source_trajectory: Trajectory
    prompt: str = ""

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if not self.frames:
            raise ValidationError("an imagined video has at least one frame")

    def to_dict(self) -> dict[str, Any]:
        return {
            "frames": [f.to_dict() for f in self.frames],
            "source_trajectory": self.source_trajectory.to_dict(),
            "prompt": self.prompt,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ImaginedVideo":
        return cls(
            tuple(FrameRecord.from_dict(f) for f in d["frames"]),
            Trajectory.from_dict(d["source_trajectory"]),
            d.get("prompt", ""),
        )


_SENTENCE_BREAK = re.compile(r"[.!?]\s+\S")


@dataclass(frozen=True)
class Claim:
    text: str
    frame_range: tuple[str, str]

    def __post_init__(self):
        text = self.text.strip()
        if not text:
            raise ValidationError("claim text is empty")
        if _SENTENCE_BREAK.search(text):
            raise ValidationError(f"claim is not a single sentence: {text!r}")
        object.__setattr__(self, "text", text)
        object.__setattr__(self, "frame_range", tuple(self.frame_range))

    def to_dict(self) -> dict[str, Any]:
        return {"text": self.text, "frame_range": list(self.frame_range)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Claim":
        return cls(d["text"], tuple(d["frame_range"]))


class Verdict(str, enum.Enum):
    ENTAILED = "ENTAILED"
    CONTRADICTED = "CONTRADICTED"
    INSUFFICIENT = "INSUFFICIENT"


@dataclass(frozen=True)
class ClaimEvaluation:
    verdict: Verdict
    confidence: float
    reasoning: str = ""

    def __post_init__(self):
        object.__setattr__(self, "verdict", Verdict(self.verdict))
        object.__setattr__(self, "confidence", float(self.confidence))
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence {self.confidence} outside [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return {"verdict": self.verdict.value, "confidence": self.confidence, "reasoning": self.reasoning}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ClaimEvaluation":
        return cls(Verdict(d["verdict"]), d["confidence"], d.get("reasoning", ""))


@dataclass(frozen=True)
class EvidenceBuffer:
    """Global top-k frames, score-descending, ties in insertion order."""

    capacity: int
    entries: tuple[FrameRecord, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if self.capacity < 1:
            raise ValidationError("buffer capacity must be >= 1")
        if len(self.entries) > self.capacity:
            raise ValidationError("buffer holds more entries than its capacity")
        scores = [e.score for e in self.entries]
        if any(s is None for s in scores):
            raise ValidationError("buffer entries must be scored")
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValidationError("buffer entries must be sorted by score descending")

    def __len__(self) -> int:
        return len(self.entries)

    def truncated(self, k: int) -> "EvidenceBuffer":
        return EvidenceBuffer(k, self.entries[:k])

    def to_dict(self) -> dict[str, Any]:
        return {"capacity": self.capacity, "entries": [e.to_dict() for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EvidenceBuffer":
        return cls(d["capacity"], tuple(FrameRecord.from_dict(e) for e in d["entries"]))


@dataclass(frozen=True)
class RunResult:
    qid: str
    predicted_index: int
    correct: bool
    selected_actions: tuple[Action, ...] = ()
    choice_log_likelihoods: Optional[tuple[float, ...]] = None
    verifier: str = "baseline"
    top_k: int = 0
    beam_depth: int = 0
    n_choices: int = 2
    gold_index: Optional[int] = None
    category: str = "uncategorized"
    parse_failed: bool = False
    error: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "selected_actions", tuple(self.selected_actions))
        if not 0 <= self.predicted_index < self.n_choices:
            raise ValidationError("predicted_index out of range")

    @property
    def condition(self) -> tuple[str, int, int]:
        return (self.verifier, self.top_k, self.beam_depth)

    def to_dict(self) -> dict[str, Any]:
        lls = self.choice_log_likelihoods
        return {
            "qid": self.qid,
            "predicted_index": self.predicted_index,
            "correct": self.correct,
            "selected_actions": [a.to_dict() for a in self.selected_actions],
            "choice_log_likelihoods": None if lls is None else list(lls),
            "verifier": self.verifier,
            "top_k": self.top_k,
            "beam_depth": self.beam_depth,
            "n_choices": self.n_choices,
            "gold_index": self.gold_index,
            "category": self.category,
            "parse_failed": self.parse_failed,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunResult":
        lls = d.get("choice_log_likelihoods")
        return cls(
            qid=d["qid"],
            predicted_index=d["predicted_index"],
            correct=d["correct"],
            selected_actions=tuple(Action.from_dict(a) for a in d.get("selected_actions", [])),
            choice_log_likelihoods=None if lls is None else tuple(lls),
            verifier=d.get("verifier", "baseline"),
            top_k=d.get("top_k", 0),
            beam_depth=d.get("beam_depth", 0),
            n_choices=d.get("n_choices", 2),
            gold_index=d.get("gold_index"),
            category=d.get("category", "uncategorized"),
            parse_failed=d.get("parse_failed", False),
            error=d.get("error"),
        )
