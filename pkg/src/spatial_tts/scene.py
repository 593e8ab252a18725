"""Deterministic symbolic scene simulator.

Acts as a perfect world model, a ground-truth claim verifier and a question
generator so the whole pipeline can run without GPUs. Objects are points;
nothing occludes anything.

Bearing convention: degrees from the camera forward axis, positive to the
right. A TurnLeft of theta therefore adds +theta to every bearing.
"""

from __future__ import annotations

import functools
import io
import itertools
import json
import math
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from PIL import Image, ImageColor, ImageDraw
from PIL.PngImagePlugin import PngInfo

from .domain import (
    ACTIONS,
    Action,
    ActionKind,
    Claim,
    ClaimEvaluation,
    Pose,
    QuestionInstance,
    Verdict,
    describe_actions,
    image_hash,
    parse_action_phrases,
)
from .errors import ValidationError
from .poses import camera_pose, trajectory_poses

DEFAULT_FOV = 90.0
PNG_KEY = "spatial_tts.frame"
_EPS = 1e-6


@dataclass(frozen=True)
class SceneObject:
    name: str
    position: tuple[float, float, float]
    color: str = "gray"

    def __post_init__(self):
        pos = tuple(float(x) for x in self.position)
        if len(pos) != 3 or not all(math.isfinite(x) for x in pos):
            raise ValidationError(f"object {self.name!r} needs a finite 3-vector position")
        object.__setattr__(self, "position", pos)

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "position": list(self.position), "color": self.color}


@dataclass(frozen=True)
class Scene:
    name: str
    objects: tuple[SceneObject, ...]
    camera_start: Pose = Pose.identity()

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        names = [o.name for o in self.objects]
        if len(set(names)) != len(names):
            raise ValidationError(f"scene {self.name!r} has duplicate object names")

    def object(self, name: str) -> Optional[SceneObject]:
        for o in self.objects:
            if o.name.lower() == name.lower():
                return o
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "objects": [o.to_dict() for o in self.objects],
            "camera_start": self.camera_start.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Scene":
        return cls(
            name=d["name"],
            objects=tuple(SceneObject(o["name"], tuple(o["position"]), o.get("color", "gray")) for o in d["objects"]),
            camera_start=Pose.from_dict(d["camera_start"]) if "camera_start" in d else Pose.identity(),
        )


def load_scene(path: str | Path) -> Scene:
    return Scene.from_dict(json.loads(Path(path).read_text()))


def load_scenes(directory: str | Path) -> list[Scene]:
    return [load_scene(p) for p in sorted(Path(directory).glob("*.json"))]


def bundled_scene_dir() -> Path:
    return Path(__file__).parent / "data" / "scenes"


@dataclass(frozen=True)
class VisibleObject:
    name: str
    bearing_deg: float
    distance: float
    in_left_half: bool
    color: str = "gray"

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "bearing_deg": self.bearing_deg,
            "distance": self.distance,
            "in_left_half": self.in_left_half,
            "color": self.color,
        }


@dataclass(frozen=True)
class SymbolicFrame:
    """What the camera sees; ``vocabulary`` lists every object in the scene."""

    scene: str
    pose: Pose
    fov_deg: float
    visible: tuple[VisibleObject, ...]
    vocabulary: tuple[str, ...]

    def get(self, name: str) -> Optional[VisibleObject]:
        for v in self.visible:
            if v.name.lower() == name.lower():
                return v
        return None

    def knows(self, name: str) -> Optional[str]:
        for n in self.vocabulary:
            if n.lower() == name.lower():
                return n
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "scene": self.scene,
            "pose": self.pose.to_dict(),
            "fov_deg": self.fov_deg,
            "visible": [v.to_dict() for v in self.visible],
            "vocabulary": list(self.vocabulary),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SymbolicFrame":
        return cls(
            scene=d["scene"],
            pose=Pose.from_dict(d["pose"]),
            fov_deg=d["fov_deg"],
            visible=tuple(
                VisibleObject(v["name"], v["bearing_deg"], v["distance"], v["in_left_half"], v.get("color", "gray"))
                for v in d["visible"]
            ),
            vocabulary=tuple(d["vocabulary"]),
        )


def bearing_and_distance(pose: Pose, point: Sequence[float]) -> tuple[float, float]:
    c = pose.R.T @ (np.asarray(point, dtype=float) - pose.t)
    # camera +x is left, so rightward bearing uses -x
    return math.degrees(math.atan2(-c[0], c[2])), float(np.linalg.norm(c))


def render_view(scene: Scene, pose: Pose, fov_deg: float = DEFAULT_FOV) -> SymbolicFrame:
    if not 0.0 < fov_deg <= 180.0:
        raise ValidationError(f"fov must lie in (0, 180], got {fov_deg}")
    visible = []
    for obj in scene.objects:
        bearing, dist = bearing_and_distance(pose, obj.position)
        if dist > 0.0 and abs(bearing) <= fov_deg / 2:
            visible.append(VisibleObject(obj.name, bearing, dist, bearing < 0.0, obj.color))
    return SymbolicFrame(scene.name, pose, fov_deg, tuple(visible), tuple(o.name for o in scene.objects))


def view_after(scene: Scene, actions: Sequence[Action], fov_deg: float = DEFAULT_FOV) -> SymbolicFrame:
    if not actions:
        return render_view(scene, scene.camera_start, fov_deg)
    return render_view(scene, camera_pose(scene.camera_start, trajectory_poses(actions)), fov_deg)


# -- rasterization ----------------------------------------------------------

RASTER_SIZE = (128, 96)


def _rgb(color: str) -> tuple[int, int, int]:
    try:
        return ImageColor.getrgb(color)[:3]
    except ValueError:
        return (128, 128, 128)


@functools.lru_cache(maxsize=4096)
def rasterize(frame: SymbolicFrame) -> bytes:
    """Colored discs on white; the symbolic frame rides along in a PNG text chunk."""
    w, h = RASTER_SIZE
    img = Image.new("RGB", RASTER_SIZE, "white")
    draw = ImageDraw.Draw(img)
    for v in sorted(frame.visible, key=lambda v: -v.distance):
        x = w / 2 + v.bearing_deg / (frame.fov_deg / 2) * (w / 2)
        r = max(2.0, min(30.0, 40.0 / max(v.distance, 1e-3)))
        draw.ellipse([x - r, h / 2 - r, x + r, h / 2 + r], fill=_rgb(v.color))
    info = PngInfo()
    info.add_text(PNG_KEY, json.dumps(frame.to_dict(), sort_keys=True, separators=(",", ":")))
    buf = io.BytesIO()
    img.save(buf, format="PNG", pnginfo=info)
    return buf.getvalue()


@functools.lru_cache(maxsize=4096)
def decode_symbolic(data: bytes) -> Optional[SymbolicFrame]:
    """Recover the symbolic frame from a rasterized PNG, or None for foreign images."""
    try:
        img = Image.open(io.BytesIO(data))
        text = img.text.get(PNG_KEY)  # type: ignore[attr-defined]
    except Exception:
        return None
    if text is None:
        return None
    return SymbolicFrame.from_dict(json.loads(text))


def render_image(scene: Scene, pose: Pose, fov_deg: float = DEFAULT_FOV) -> bytes:
    return rasterize(render_view(scene, pose, fov_deg))


# -- claim grammar ----------------------------------------------------------

_TAIL = r"(?: of the (?:frame|view|image))?\s*\.?"
_CLAIM_PATTERNS = [
    ("visibility", re.compile(r"^(?:the\s+)?(?P<obj>.+?)\s+(?P<op>appears|disappears)\s+on\s+the\s+(?P<side>left|right)\s+side" + _TAIL + "$", re.I)),
    ("edge", re.compile(r"^(?:the\s+)?(?P<obj>.+?)\s+moves\s+(?P<op>closer\s+to|further\s+from)\s+the\s+(?P<side>left|right)\s+edge" + _TAIL + "$", re.I)),
    ("degree", re.compile(r"^(?:the\s+)?(?P<obj>.+?)\s+becomes\s+(?P<op>more|less)\s+visible\s+on\s+the\s+(?P<side>left|right)\s+side" + _TAIL + "$", re.I)),
]


@dataclass(frozen=True)
class ParsedClaim:
    family: str
    obj: str
    op: str
    side: str


def parse_claim(text: str) -> Optional[ParsedClaim]:
    text = text.strip()
    for family, pat in _CLAIM_PATTERNS:
        m = pat.match(text)
        if m:
            op = re.sub(r"\s+", " ", m.group("op").lower())
            return ParsedClaim(family, m.group("obj").strip(), op, m.group("side").lower())
    return None


def _on_side(v: Optional[VisibleObject], side: str) -> bool:
    return v is not None and v.in_left_half == (side == "left")


def _claim_holds(pc: ParsedClaim, b: Optional[VisibleObject], a: Optional[VisibleObject]) -> bool:
    if pc.family == "visibility":
        if pc.op == "appears":
            return b is None and _on_side(a, pc.side)
        return a is None and _on_side(b, pc.side)
    if pc.family == "edge":
        if a is None or b is None:
            return False
        toward_left = a.bearing_deg < b.bearing_deg
        toward_right = a.bearing_deg > b.bearing_deg
        closer = toward_left if pc.side == "left" else toward_right
        further = toward_right if pc.side == "left" else toward_left
        return closer if pc.op == "closer to" else further
    # degree: more visible = now on that side and newly visible or nearer
    if pc.op == "more":
        return _on_side(a, pc.side) and (b is None or a.distance < b.distance)
    return _on_side(b, pc.side) and (a is None or a.distance > b.distance)


def oracle_verify(claim: Claim, before: SymbolicFrame, after: SymbolicFrame) -> ClaimEvaluation:
    pc = parse_claim(claim.text)
    if pc is None:
        return ClaimEvaluation(Verdict.INSUFFICIENT, 0.0, "claim outside the oracle grammar")
    name = before.knows(pc.obj) or after.knows(pc.obj)
    if name is None:
        return ClaimEvaluation(Verdict.INSUFFICIENT, 0.0, f"no object named {pc.obj!r} in the scene")
    holds = _claim_holds(pc, before.get(name), after.get(name))
    verdict = Verdict.ENTAILED if holds else Verdict.CONTRADICTED
    return ClaimEvaluation(verdict, 1.0, f"symbolic state {'supports' if holds else 'opposes'} the claim")


def describe_change(name: str, before: SymbolicFrame, after: SymbolicFrame) -> Optional[str]:
    """The one true grammar claim about ``name`` between two frames, if any change is visible."""
    b, a = before.get(name), after.get(name)
    if b is None and a is not None:
        return f"{name} appears on the {'left' if a.in_left_half else 'right'} side of the frame"
    if b is not None and a is None:
        return f"{name} disappears on the {'left' if b.in_left_half else 'right'} side of the frame"
    if b is not None and a is not None:
        if a.bearing_deg < b.bearing_deg - _EPS:
            return f"{name} moves closer to the left edge"
        if a.bearing_deg > b.bearing_deg + _EPS:
            return f"{name} moves closer to the right edge"
    return None


# -- question generation ----------------------------------------------------

_QUESTION = re.compile(r"^After (?P<traj>.+), is the (?P<obj>.+) on the (?P<side>left|right) side of the view\?$")
MAX_QUESTION_ATTEMPTS = 100


def all_trajectories(max_depth: int) -> list[tuple[Action, ...]]:
    """Every action sequence of length 1..max_depth in canonical (breadth-first) order."""
    out: list[tuple[Action, ...]] = []
    for d in range(1, max_depth + 1):
        out.extend(itertools.product(ACTIONS, repeat=d))
    return out


def parse_question(text: str) -> Optional[tuple[list[Action], str, str]]:
    m = _QUESTION.match(text.strip())
    if not m:
        return None
    return parse_action_phrases(m.group("traj")), m.group("obj"), m.group("side")


def question_gold(scene: Scene, actions: Sequence[Action], obj: str, side: str, fov_deg: float = DEFAULT_FOV) -> int:
    """0 ("yes") iff ``obj`` sits in the ``side`` half of the view after ``actions``."""
    v = view_after(scene, actions, fov_deg).get(obj)
    return 0 if _on_side(v, side) else 1


def generate_question(scene: Scene, seed: int, fov_deg: float = DEFAULT_FOV) -> QuestionInstance:
    """A two-choice viewpoint question whose target object is hidden at the start view."""
    if len(scene.objects) < 2:
        raise ValidationError("question generation needs at least two objects")
    start = render_view(scene, scene.camera_start, fov_deg)
    for attempt in range(MAX_QUESTION_ATTEMPTS):
        rng = random.Random(f"{seed}:{attempt}")
        hidden = sorted(o.name for o in scene.objects if start.get(o.name) is None)
        if not hidden:
            continue
        target = rng.choice(hidden)
        revealing = {1: [], 2: []}
        for traj in all_trajectories(2):
            v = view_after(scene, traj, fov_deg).get(target)
            if v is not None:
                revealing[len(traj)].append((traj, v))
        pool = revealing[1] or revealing[2]
        if not pool:
            continue
        traj, v = pool[rng.randrange(len(pool))]
        if abs(v.bearing_deg) < _EPS or abs(abs(v.bearing_deg) - fov_deg / 2) < _EPS:
            continue
        side = rng.choice(["left", "right"])
        text = f"After {describe_actions(traj)}, is the {target} on the {side} side of the view?"
        only_turns = all(a.kind is not ActionKind.MOVE_FORWARD for a in traj)
        return QuestionInstance(
            qid=f"{scene.name}-q{seed}",
            image_ref=image_hash(render_image(scene, scene.camera_start, fov_deg)),
            question=text,
            choices=("yes", "no"),
            gold_index=question_gold(scene, traj, target, side, fov_deg),
            category="EgoM" if only_turns else "EgoAct",
        )
    raise ValidationError(f"could not generate a question for scene {scene.name!r} after {MAX_QUESTION_ATTEMPTS} attempts")
