"""Oracle model backends over symbolic scenes.

``OracleVLM`` answers the same prompts a real VLM would get (claim
generation, claim verification, joint helpfulness, multiple-choice solving,
teacher-forced log-probabilities) by decoding the symbolic frame carried in
each rasterized image. ``wire_handler`` exposes it, together with an
:class:`OracleWorldModel`, behind the HTTP wire protocol for stub servers.

Behaviour, in short:

* claims: for each object named in the question, the true change between the
  two views, or the hypothesis that it appears on the left when it is in
  neither view; then true changes for the other objects.
* verification: :func:`oracle_verify`.
* helpfulness: fraction of scene objects in view (rewards busy frames).
* solver: correct whenever some shown image contains the queried object,
  otherwise a seeded guess.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from typing import Any, Callable, Iterable, Optional, Sequence

from .clients import TokenLogprobs, check_logprobs
from .domain import Claim, Trajectory, Verdict
from .errors import ProtocolError
from .images import ImageStore, b64decode, b64encode
from .prompts import (
    CLAIM_GENERATION_ASSET,
    CLAIM_VERIFICATION_ASSET,
    HELPFULNESS_SYSTEM,
    SOLVER_SYSTEM,
    Image,
    Part,
    Text,
    letter,
    system_prompt,
)
from .scene import Scene, SymbolicFrame, decode_symbolic, describe_change, oracle_verify, parse_question, question_gold
from .world import OracleWorldModel

_QLINE = re.compile(r"^(?:The original question is|Question): (.*)$", re.M)
_CLAIM_LINE = re.compile(r"^Claim: '(.*)'$", re.M)


def _hash_unit(*parts: object) -> float:
    h = hashlib.sha256("|".join(map(str, parts)).encode()).digest()
    return int.from_bytes(h[:8], "big") / 2**64


class OracleVLM:
    supports_logprobs = True

    def __init__(self, scenes: Iterable[Scene], store: Optional[ImageStore] = None, seed: int = 0):
        self.scenes = {s.name: s for s in scenes}
        self.store = store
        self.seed = seed
        self.calls = 0

    # local entry points resolve refs through the store
    def chat_with_images(self, system: str, parts: Sequence[Part], options: Optional[dict] = None) -> str:
        texts = [p.text for p in parts if isinstance(p, Text)]
        images = [self._bytes(p.ref) for p in parts if isinstance(p, Image)]
        return self.respond(system, "\n".join(texts), images)

    def teacher_forced_logprobs(self, prompt: str, images: Sequence[str], answer_text: str) -> TokenLogprobs:
        return check_logprobs(self.logprobs(prompt, [self._bytes(r) for r in images], answer_text))

    def _bytes(self, ref: str) -> bytes:
        if self.store is None:
            raise ProtocolError("OracleVLM needs an image store to resolve references")
        return self.store.get(ref)

    # byte-level behaviour shared with the wire handler
    def respond(self, system: str, text: str, images: Sequence[bytes]) -> str:
        self.calls += 1
        frames = [decode_symbolic(b) for b in images]
        if system == system_prompt(CLAIM_GENERATION_ASSET):
            return self._claims(text, frames)
        if system == system_prompt(CLAIM_VERIFICATION_ASSET):
            return self._verify(text, frames)
        if system == HELPFULNESS_SYSTEM:
            return json.dumps([self._salience(f) for f in frames[1:]])
        if system == SOLVER_SYSTEM:
            return self._solve(text, frames)
        return "I can only help with spatial questions about oracle scenes."

    def _question_objects(self, text: str, frame: SymbolicFrame) -> list[str]:
        m = _QLINE.search(text)
        q = m.group(1) if m else ""
        return [n for n in frame.vocabulary if re.search(rf"\b{re.escape(n)}\b", q, re.I)]

    def _claims(self, text: str, frames: list[Optional[SymbolicFrame]]) -> str:
        if len(frames) < 2 or frames[0] is None or frames[1] is None:
            return "No clear changes observed."
        before, after = frames[0], frames[1]
        focus = self._question_objects(text, before)
        lines = []
        for name in focus:
            lines.append(describe_change(name, before, after) or f"{name} appears on the left side of the frame")
        for name in before.vocabulary:
            if name not in focus:
                c = describe_change(name, before, after)
                if c:
                    lines.append(c)
        if not lines:
            return "No clear changes observed."
        return "\n".join(f"- {c}" for c in lines[:4])

    def _verify(self, text: str, frames: list[Optional[SymbolicFrame]]) -> str:
        m = _CLAIM_LINE.search(text)
        if not m or len(frames) < 2 or frames[0] is None or frames[1] is None:
            return "VERDICT: INSUFFICIENT\nCONFIDENCE: 0.0\nREASONING: cannot read the claim or frames"
        ev = oracle_verify(Claim(m.group(1), ("", "")), frames[0], frames[1])
        return f"VERDICT: {ev.verdict.value}\nCONFIDENCE: {ev.confidence:.2f}\nREASONING: {ev.reasoning}"

    @staticmethod
    def _salience(frame: Optional[SymbolicFrame]) -> float:
        if frame is None or not frame.vocabulary:
            return 0.0
        return round(len(frame.visible) / len(frame.vocabulary), 4)

    def _decide(self, question: str, frames: Sequence[Optional[SymbolicFrame]]) -> Optional[int]:
        """Gold index if the evidence shows the queried object, else None."""
        parsed = parse_question(question)
        known = [f for f in frames if f is not None]
        if parsed is None or not known or known[0].scene not in self.scenes:
            return None
        actions, obj, side = parsed
        if not any(f.get(obj) is not None for f in known):
            return None
        scene = self.scenes[known[0].scene]
        return question_gold(scene, actions, obj, side, known[0].fov_deg)

    def _solve(self, text: str, frames: list[Optional[SymbolicFrame]]) -> str:
        m = _QLINE.search(text)
        question = m.group(1) if m else ""
        n = max(2, len(re.findall(r"^[A-Z]\. ", text, re.M)))
        idx = self._decide(question, frames)
        if idx is None:
            idx = int(_hash_unit(self.seed, question) * n)
        return f"Answer: {letter(idx)}"

    def logprobs(self, prompt: str, images: Sequence[bytes], answer_text: str) -> dict[str, Any]:
        """Whitespace tokens; answer tokens share the choice's total log-probability."""
        if not prompt.endswith(answer_text) or "\nAnswer:" not in prompt:
            raise ProtocolError("prompt must be question + '\\nAnswer:' + answer_text")
        prefix = prompt[: len(prompt) - len(answer_text)]
        question = prefix.rsplit("\nAnswer:", 1)[0]
        pre_tokens = prefix.split()
        ans_tokens = answer_text.split() or [answer_text]
        frames = [decode_symbolic(b) for b in images]
        gold = self._decide(question, frames)
        choice = 0 if answer_text.strip().lower() == "yes" else 1
        if gold is not None:
            total = math.log(0.9) if choice == gold else math.log(0.1)
        else:
            total = math.log(0.5) + 0.3 * (2 * _hash_unit(self.seed, question, answer_text) - 1)
        per = total / len(ans_tokens)
        return {"token_logprobs": [-1.0] * len(pre_tokens) + [per] * len(ans_tokens), "answer_start": len(pre_tokens)}


def wire_handler(world: OracleWorldModel, vlm: OracleVLM) -> Callable[[str, dict], Any]:
    """``(path, body) -> json`` implementing the world, chat and logprob endpoints."""

    def handle(path: str, body: dict) -> Any:
        if path.endswith("/imagine"):
            traj = Trajectory.from_dict(body["trajectory"])
            imgs = world.rollout_images(b64decode(body["reference_image"]), traj, int(body["frames_per_rollout"]))
            return [b64encode(b) for b in imgs]
        if path.endswith("/chat"):
            texts = [p["text"] for p in body["parts"] if p["type"] == "text"]
            images = [b64decode(p["data"]) for p in body["parts"] if p["type"] == "image"]
            return {"text": vlm.respond(body["system"], "\n".join(texts), images)}
        if path.endswith("/logprobs"):
            return vlm.logprobs(body["prompt"], [b64decode(x) for x in body["images"]], body["answer_text"])
        raise ProtocolError(f"unknown endpoint {path}")

    return handle


def httpx_handler(handle: Callable[[str, dict], Any]):
    """Adapt a wire handler to ``httpx.MockTransport``."""
    import httpx

    def fn(request: httpx.Request) -> httpx.Response:
        try:
            out = handle(request.url.path, json.loads(request.content))
        except ProtocolError as e:
            return httpx.Response(400, json={"error": str(e)})
        return httpx.Response(200, content=json.dumps(out).encode(), headers={"content-type": "application/json"})

    return fn
