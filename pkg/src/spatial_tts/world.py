"""World-model interface: imagine a rollout from (x0, prompt, trajectory).

Wire protocol for HTTP backends (POST ``path``)::

    {"reference_image": <base64 png>, "prompt": str,
     "trajectory": [{"action": {...}, "pose": {...}}, ...], "frames_per_rollout": int}
    -> [<base64 png>, ...]            # exactly frames_per_rollout entries

A 422 response with ``{"error": msg}`` is a generation refusal.
"""

from __future__ import annotations

import binascii
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

from .clients import Transport
from .domain import FrameRecord, ImaginedVideo, Pose, Trajectory
from .errors import ProtocolError, ValidationError
from .images import ImageStore, b64decode, b64encode
from .poses import compose, motion_pose
from .scene import DEFAULT_FOV, Scene, decode_symbolic, rasterize, render_view


@dataclass(frozen=True)
class WorldModelRequest:
    reference_image: str
    trajectory: Trajectory
    prompt: str = ""
    frames_per_rollout: int = 1

    def __post_init__(self):
        if self.frames_per_rollout < 1:
            raise ValidationError("frames_per_rollout must be >= 1")
        if len(self.trajectory) == 0:
            raise ValidationError("world-model request needs a nonempty trajectory")


class WorldModel(Protocol):
    def imagine(self, request: WorldModelRequest) -> ImaginedVideo: ...


def _video(request: WorldModelRequest, refs: Sequence[str]) -> ImaginedVideo:
    last = request.trajectory.actions[-1]
    depth = len(request.trajectory)
    frames = tuple(FrameRecord(ref, last, depth) for ref in refs)
    return ImaginedVideo(frames, request.trajectory, request.prompt)


class HttpWorldModel:
    def __init__(self, transport: Transport, store: ImageStore, path: str = "/v1/imagine"):
        self.transport = transport
        self.store = store
        self.path = path

    def imagine(self, request: WorldModelRequest) -> ImaginedVideo:
        body = {
            "reference_image": b64encode(self.store.get(request.reference_image)),
            "prompt": request.prompt,
            "trajectory": request.trajectory.to_dict(),
            "frames_per_rollout": request.frames_per_rollout,
        }
        payload = self.transport.post_json(self.path, body)
        if not isinstance(payload, list) or not all(isinstance(x, str) for x in payload):
            raise ProtocolError("world-model response must be a JSON array of base64 strings")
        if len(payload) != request.frames_per_rollout:
            raise ProtocolError(f"expected {request.frames_per_rollout} frames, got {len(payload)}")
        try:
            refs = [self.store.put(b64decode(x)) for x in payload]
        except (binascii.Error, ValueError) as e:
            raise ProtocolError("world-model frame is not valid base64") from e
        return _video(request, refs)


class OracleWorldModel:
    """Perfect world model over symbolic scenes.

    The scene and start pose are recovered from the reference image itself, so
    the same object also backs the stub wire server. Frames j = 1..m sweep the
    last action in equal fractions; frame m is the full step.
    """

    def __init__(self, scenes: Iterable[Scene], store: ImageStore, fov_deg: float = DEFAULT_FOV):
        self.scenes = {s.name: s for s in scenes}
        self.store = store
        self.fov_deg = fov_deg

    def rollout_images(self, reference: bytes, trajectory: Trajectory, m: int) -> list[bytes]:
        start = decode_symbolic(reference)
        if start is None or start.scene not in self.scenes:
            raise ProtocolError("reference image does not belong to a known oracle scene")
        scene = self.scenes[start.scene]
        prefix = trajectory.steps[-2][1] if len(trajectory) > 1 else Pose.identity()
        last = trajectory.actions[-1]
        out = []
        for j in range(1, m + 1):
            rel = compose(prefix, motion_pose(last.kind, last.magnitude * j / m)) if j < m else trajectory.final_pose
            out.append(rasterize(render_view(scene, compose(start.pose, rel), self.fov_deg)))
        return out

    def imagine(self, request: WorldModelRequest) -> ImaginedVideo:
        images = self.rollout_images(self.store.get(request.reference_image), request.trajectory, request.frames_per_rollout)
        return _video(request, [self.store.put(b) for b in images])
