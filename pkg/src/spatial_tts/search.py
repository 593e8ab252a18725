"""Exploration beam search over egocentric action trajectories.

Each depth expands every retained node with all 9 primitive actions, scores
the new frames, merges them into one global top-k evidence buffer and keeps
the ``beam_width`` nodes with the highest max-frame score. Retained nodes are
expanded in node-id order so results do not depend on score ties.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

from .clients import ChatBackend
from .domain import ACTIONS, Action, EvidenceBuffer, FrameRecord, QuestionInstance, RunResult, Trajectory
from .errors import BackendError, ValidationError
from .poses import extend
from .prompts import solver_prompt
from .scene import all_trajectories
from .verifiers import Verifier, VerifierConfig
from .world import WorldModel, WorldModelRequest

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchConfig:
    gamma: int = 1
    top_k: int = 1
    beam_width: int = 3
    frames_per_rollout: int = 1
    prompt: str = ""
    parallel: int = 1
    verifier: Optional[VerifierConfig] = None

    def __post_init__(self):
        if self.gamma < 1 or self.top_k < 1 or self.beam_width < 1 or self.frames_per_rollout < 1:
            raise ValidationError("gamma, top_k, beam_width and frames_per_rollout must all be >= 1")


@dataclass(frozen=True)
class BeamNode:
    node_id: int
    parent_id: Optional[int]
    trajectory: Trajectory
    depth: int
    frames: tuple[FrameRecord, ...] = ()
    best_score: float = 0.0

    def __post_init__(self):
        if self.depth != len(self.trajectory):
            raise ValidationError("node depth must equal its trajectory length")


def root_node() -> BeamNode:
    return BeamNode(0, None, Trajectory(), 0)


@dataclass
class TraceRecord:
    node_id: int
    parent_id: Optional[int]
    action: Action
    depth: int
    frame_refs: list[str]
    scores: list[float]
    retained: bool
    in_buffer: list[bool] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id,
            "parent_id": self.parent_id,
            "action": self.action.to_dict(),
            "depth": self.depth,
            "frame_refs": self.frame_refs,
            "scores": self.scores,
            "retained": self.retained,
            "in_buffer": self.in_buffer,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TraceRecord":
        return cls(
            d["node_id"], d["parent_id"], Action.from_dict(d["action"]), d["depth"],
            list(d["frame_refs"]), list(d["scores"]), d["retained"], list(d.get("in_buffer", [])),
        )


@dataclass
class SearchTrace:
    qid: str
    records: list[TraceRecord] = field(default_factory=list)

    @property
    def world_calls(self) -> int:
        return len(self.records)

    def mark_buffer(self, buffer: EvidenceBuffer) -> "SearchTrace":
        """Copy with ``in_buffer`` flags set from ``buffer`` membership."""
        members = {(e.node_id, e.image_ref) for e in buffer.entries}
        recs = [
            dataclasses.replace(r, in_buffer=[(r.node_id, ref) in members for ref in r.frame_refs])
            for r in self.records
        ]
        return SearchTrace(self.qid, recs)

    def selected_actions(self) -> list[Action]:
        return [r.action for r in self.records for flag in r.in_buffer if flag]

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"qid": self.qid, **r.to_dict()}, sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> list["SearchTrace"]:
        traces: dict[str, SearchTrace] = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            traces.setdefault(d["qid"], SearchTrace(d["qid"])).records.append(TraceRecord.from_dict(d))
        return list(traces.values())


def _imagine_child(world: WorldModel, question: QuestionInstance, traj: Trajectory, config: SearchConfig) -> tuple[FrameRecord, ...]:
    req = WorldModelRequest(question.image_ref, traj, config.prompt, config.frames_per_rollout)
    try:
        return world.imagine(req).frames
    except BackendError as e:
        log.warning("rollout %s failed: %s", [a.describe() for a in traj.actions], e)
        return ()


def expand(
    node: BeamNode,
    world: WorldModel,
    verifier: Verifier,
    question: QuestionInstance,
    config: SearchConfig,
    first_id: Optional[int] = None,
) -> list[BeamNode]:
    """The 9 children of ``node``, imagined and scored. Child ids start at ``first_id``."""
    if node.depth >= config.gamma:
        raise ValidationError(f"node at depth {node.depth} cannot be expanded past gamma={config.gamma}")
    first_id = node.node_id * len(ACTIONS) + 1 if first_id is None else first_id
    trajs = [extend(node.trajectory, a) for a in ACTIONS]
    if config.parallel > 1:
        with ThreadPoolExecutor(max_workers=config.parallel) as pool:
            rollouts = list(pool.map(lambda t: _imagine_child(world, question, t, config), trajs))
    else:
        rollouts = [_imagine_child(world, question, t, config) for t in trajs]

    flat = [f for frames in rollouts for f in frames]
    scores: list[float] = []
    if flat:
        try:
            scores = list(verifier.score(flat, question))
        except BackendError as e:
            log.warning("verifier failed on %d frames: %s", len(flat), e)
            scores = [0.0] * len(flat)
    children = []
    pos = 0
    for i, (traj, frames) in enumerate(zip(trajs, rollouts)):
        cid = first_id + i
        scored = tuple(
            dataclasses.replace(f, score=s, node_id=cid) for f, s in zip(frames, scores[pos : pos + len(frames)])
        )
        pos += len(frames)
        best = max((f.score for f in scored), default=0.0)
        children.append(BeamNode(cid, node.node_id, traj, node.depth + 1, scored, best))  # type: ignore[arg-type]
    return children


def update_buffer(buffer: EvidenceBuffer, frames: Sequence[FrameRecord]) -> EvidenceBuffer:
    """Merge ``frames`` into the global top-k; earlier insertions win ties."""
    for f in frames:
        if f.score is None:
            raise ValidationError(f"frame {f.image_ref} has no score")
    merged = sorted(list(buffer.entries) + list(frames), key=lambda f: -f.score)  # stable
    return EvidenceBuffer(buffer.capacity, tuple(merged[: buffer.capacity]))


def run_search(
    question: QuestionInstance,
    config: SearchConfig,
    world: WorldModel,
    verifier: Verifier,
) -> tuple[EvidenceBuffer, SearchTrace]:
    frontier = [root_node()]
    buffer = EvidenceBuffer(config.top_k)
    trace = SearchTrace(question.qid)
    next_id = 1
    for _ in range(config.gamma):
        level: list[BeamNode] = []
        for node in frontier:
            kids = expand(node, world, verifier, question, config, first_id=next_id)
            next_id += len(kids)
            level.extend(kids)
        for kid in level:
            buffer = update_buffer(buffer, kid.frames)
        ranked = sorted(level, key=lambda n: (-n.best_score, n.node_id))
        keep = {n.node_id for n in ranked[: config.beam_width]}
        for n in level:
            trace.records.append(
                TraceRecord(
                    n.node_id, n.parent_id, n.trajectory.actions[-1], n.depth,
                    [f.image_ref for f in n.frames], [f.score for f in n.frames], n.node_id in keep,  # type: ignore[misc]
                )
            )
        frontier = [n for n in level if n.node_id in keep]
    return buffer, trace.mark_buffer(buffer)


def expected_world_calls(gamma: int, beam_width: int) -> int:
    return sum(min(beam_width, 9 ** (d - 1)) * 9 for d in range(1, gamma + 1))


def exhaustive_top_k(
    question: QuestionInstance,
    world: WorldModel,
    verifier: Verifier,
    gamma: int,
    top_k: int,
    frames_per_rollout: int = 1,
) -> list[FrameRecord]:
    """Brute force: imagine every trajectory up to ``gamma``, score, sort, truncate.

    Only meaningful for verifiers that score frames independently.
    """
    pool: list[FrameRecord] = []
    for actions in all_trajectories(gamma):
        traj = Trajectory()
        for a in actions:
            traj = extend(traj, a)
        frames = world.imagine(WorldModelRequest(question.image_ref, traj, "", frames_per_rollout)).frames
        scores = verifier.score(list(frames), question)
        pool.extend(dataclasses.replace(f, score=s) for f, s in zip(frames, scores))
    return sorted(pool, key=lambda f: -f.score)[:top_k]  # type: ignore[operator]


# -- answering --------------------------------------------------------------

_ANSWER_TOKEN = re.compile(r"\banswer\b", re.I)
_CAPITAL = re.compile(r"\b([A-Z])\b")


def parse_answer(text: str, n_choices: int) -> Optional[int]:
    """Letter index from a solver reply, or None when nothing parses.

    Prefers the first valid standalone capital after an "Answer" token, then
    the most frequent valid standalone capital anywhere (earliest on ties).
    """
    valid = {chr(ord("A") + i) for i in range(n_choices)}
    m = _ANSWER_TOKEN.search(text)
    if m:
        for c in _CAPITAL.finditer(text, m.end()):
            if c.group(1) in valid:
                return ord(c.group(1)) - ord("A")
    found = [c.group(1) for c in _CAPITAL.finditer(text) if c.group(1) in valid]
    if not found:
        return None
    counts = Counter(found)
    best = max(counts.values())
    first = next(x for x in found if counts[x] == best)
    return ord(first) - ord("A")


def answer(
    question: QuestionInstance,
    buffer: Optional[EvidenceBuffer],
    solver: ChatBackend,
    *,
    x0: Optional[str] = None,
    verifier_name: str = "baseline",
    beam_depth: int = 0,
    retries: int = 2,
) -> RunResult:
    """Pose the question with x0 plus buffer frames (score-descending)."""
    entries = buffer.entries if buffer is not None else ()
    evidence = [e.image_ref for e in entries]
    system, parts = solver_prompt(x0 or question.image_ref, evidence, question.question, question.choices)
    error = None
    reply = ""
    for attempt in range(retries + 1):
        try:
            reply = solver.chat_with_images(system, parts)
            break
        except BackendError as e:
            error = f"{type(e).__name__}: {e}"
    else:
        log.warning("solver failed for %s: %s", question.qid, error)
    idx = parse_answer(reply, len(question.choices)) if reply else None
    parse_failed = idx is None
    if parse_failed and reply:
        log.warning("could not parse an answer letter for %s from %r", question.qid, reply[:80])
    pred = 0 if idx is None else idx
    return RunResult(
        qid=question.qid,
        predicted_index=pred,
        correct=question.gold_index is not None and pred == question.gold_index,
        selected_actions=tuple(e.producing_action for e in entries),
        verifier=verifier_name,
        top_k=buffer.capacity if buffer is not None else 0,
        beam_depth=beam_depth,
        n_choices=len(question.choices),
        gold_index=question.gold_index,
        category=question.category,
        parse_failed=parse_failed,
        error=error if not reply else None,
    )
