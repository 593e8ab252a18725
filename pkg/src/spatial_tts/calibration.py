"""Teacher-forced answer entropy.

For each choice the backend scores ``question + "\\nAnswer:" + choice`` under
teacher forcing; the log-probabilities of the answer tokens are summed into a
per-choice log-likelihood. The entropy of the softmax over choices measures
how sure the model is. Natural log throughout.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .clients import LogprobBackend
from .domain import QuestionInstance, RunResult
from .errors import AlignmentError, CapabilityError

log = logging.getLogger(__name__)

GROUPS = ("overall", "correct", "wrong")
MIN_PROB = 1e-10


@dataclass(frozen=True)
class ChoiceLikelihoods:
    lls: tuple[float, ...]
    qid: str = ""
    condition: str = "baseline"

    @property
    def valid(self) -> bool:
        return bool(self.lls) and not any(x == -math.inf for x in self.lls)


def answer_log_likelihood(question: str, choice: str, images: Sequence[str], backend: LogprobBackend) -> float:
    """Sum of log-probabilities of the tokens of ``choice`` given question and images."""
    if not getattr(backend, "supports_logprobs", False):
        raise CapabilityError("backend does not support teacher-forced log-probabilities")
    if not choice:
        raise AlignmentError("empty choice has no answer tokens to score")
    full_prompt = question + "\nAnswer:" + choice
    out = backend.teacher_forced_logprobs(full_prompt, list(images), choice)
    if not 0 <= out.answer_start < len(out.token_logprobs):
        raise AlignmentError(f"answer start {out.answer_start} outside {len(out.token_logprobs)} tokens")
    return math.fsum(out.token_logprobs[out.answer_start :])  # -inf propagates


def choice_likelihoods(
    question: QuestionInstance,
    images: Sequence[str],
    backend: LogprobBackend,
    condition: str = "baseline",
    parallel: int = 1,
) -> ChoiceLikelihoods:
    def one(choice: str) -> float:
        return answer_log_likelihood(question.question, choice, images, backend)

    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            lls = list(pool.map(one, question.choices))
    else:
        lls = [one(c) for c in question.choices]
    return ChoiceLikelihoods(tuple(lls), question.qid, condition)


def entropy_over_choices(lls: ChoiceLikelihoods | Sequence[float]) -> Optional[float]:
    """Shannon entropy of softmax(lls); None if empty or any entry is -inf."""
    values = list(lls.lls if isinstance(lls, ChoiceLikelihoods) else lls)
    if not values or any(v == -math.inf for v in values):
        return None
    top = max(values)
    weights = [math.exp(v - top) for v in values]
    z = math.fsum(weights)
    h = 0.0
    for w in weights:
        p = w / z
        if p > MIN_PROB:
            h -= p * math.log(p)
    return max(0.0, h)


@dataclass
class GroupStats:
    mean_entropy: Optional[float]
    n_valid: int
    n_invalid: int

    def to_dict(self) -> dict:
        return {"mean_entropy": self.mean_entropy, "n_valid": self.n_valid, "n_invalid": self.n_invalid}


@dataclass
class EntropySummary:
    # condition -> group -> stats
    groups: dict[str, dict[str, GroupStats]] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    def get(self, condition: str, group: str) -> GroupStats:
        return self.groups[condition][group]

    def to_dict(self) -> dict:
        return {
            "conditions": {c: {g: s.to_dict() for g, s in gs.items()} for c, gs in sorted(self.groups.items())},
            "skipped": list(self.skipped),
        }


def entropy_report(pairs: Sequence[tuple[RunResult, ChoiceLikelihoods]], skipped: Sequence[str] = ()) -> EntropySummary:
    """Mean entropy per (condition, overall/correct/wrong); invalid entries are counted, not averaged."""
    buckets: dict[str, dict[str, list[Optional[float]]]] = {}
    for result, lls in pairs:
        h = entropy_over_choices(lls)
        per = buckets.setdefault(lls.condition, {g: [] for g in GROUPS})
        per["overall"].append(h)
        per["correct" if result.correct else "wrong"].append(h)
    summary = EntropySummary(skipped=list(skipped))
    for cond, per in buckets.items():
        summary.groups[cond] = {}
        for g in GROUPS:
            valid = [h for h in per[g] if h is not None]
            mean = math.fsum(valid) / len(valid) if valid else None
            summary.groups[cond][g] = GroupStats(mean, len(valid), len(per[g]) - len(valid))
    return summary
