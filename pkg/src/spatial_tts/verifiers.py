"""Test-time rewards for imagined frames.

* ``random``: seeded i.i.d. uniform scores.
* ``helpfulness``: one joint VLM call ranks every candidate frame at once.
* ``visa``: per frame, generate micro-claims about the before/after change,
  verify each claim separately, and score the frame by Evidence Quality.

All verifiers return exactly one finite score in [0, 1] per input frame, in
input order, whatever the backend does.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Protocol, Sequence

from .clients import ChatBackend
from .domain import Claim, ClaimEvaluation, FrameRecord, QuestionInstance, Verdict
from .errors import BackendError, ProtocolError, ValidationError
from .prompts import claim_generation_prompt, claim_verification_prompt, helpfulness_prompt

log = logging.getLogger(__name__)


class VerifierKind(str, enum.Enum):
    RANDOM = "random"
    HELPFULNESS = "helpfulness"
    VISA = "visa"


@dataclass(frozen=True)
class VerifierConfig:
    kind: VerifierKind
    seed: Optional[int] = None
    claim_min: int = 2
    claim_max: int = 4
    retries: int = 2
    backoff_s: float = 0.0
    # non-canonical: average confidence over entailed claims only
    entailed_only_confidence: bool = False
    parallel: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", VerifierKind(self.kind))
        if self.claim_min > self.claim_max:
            raise ValidationError("claim_min must not exceed claim_max")
        if (self.seed is not None) != (self.kind is VerifierKind.RANDOM):
            raise ValidationError("seed is required for, and only for, the random verifier")


def _with_retries(fn: Callable[[], Any], retries: int, backoff_s: float, what: str) -> Any:
    for attempt in range(retries + 1):
        try:
            return fn()
        except BackendError as e:
            if attempt == retries:
                raise
            log.info("%s failed (%s); retry %d", what, e, attempt + 1)
            if backoff_s:
                time.sleep(backoff_s * 2**attempt)


# -- random -----------------------------------------------------------------


def frame_key(frame: FrameRecord) -> str:
    a = frame.producing_action
    return f"{frame.image_ref}|{a.kind.value}:{a.magnitude:g}|{frame.depth}"


def score_random(frames: Sequence[FrameRecord], seed: int) -> list[float]:
    """Uniform [0, 1) per frame from ``random.Random(f"{seed}|{frame_key}")``.

    Python's string seeding goes through SHA-512 and the Mersenne Twister, both
    stable across platforms and releases, so scores are bit-reproducible and
    depend only on the seed and the frame itself.
    """
    if not frames:
        raise ValidationError("score_random needs at least one frame")
    return [random.Random(f"{seed}|{frame_key(f)}").random() for f in frames]


# -- helpfulness ------------------------------------------------------------

_ARRAY = re.compile(r"\[[^\[\]]*\]", re.S)


def parse_score_array(text: str, n: int) -> list[float]:
    """First JSON array in ``text``; must hold ``n`` numbers. Clamped to [0, 1]."""
    m = _ARRAY.search(text)
    if not m:
        raise ProtocolError("no JSON array in helpfulness reply")
    try:
        values = json.loads(m.group(0))
    except ValueError as e:
        raise ProtocolError("helpfulness array is not valid JSON") from e
    if len(values) != n:
        raise ProtocolError(f"expected {n} scores, got {len(values)}")
    out = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ProtocolError(f"non-numeric score {v!r}")
        out.append(min(1.0, max(0.0, float(v))))
    return out


def score_helpfulness(
    frames: Sequence[FrameRecord],
    question: QuestionInstance,
    backend: ChatBackend,
    retries: int = 2,
    backoff_s: float = 0.0,
) -> list[float]:
    if not frames:
        raise ValidationError("score_helpfulness needs at least one frame")
    system, parts = helpfulness_prompt(question.image_ref, question.question, question.choices, [f.image_ref for f in frames])

    def call():
        return parse_score_array(backend.chat_with_images(system, parts), len(frames))

    try:
        return _with_retries(call, retries, backoff_s, "helpfulness scoring")
    except BackendError as e:
        log.warning("helpfulness scoring failed after %d retries (%s); scoring %d frames 0.0", retries, e, len(frames))
        return [0.0] * len(frames)


# -- claim generation / verification ----------------------------------------


def parse_claim_lines(text: str, before_ref: str, after_ref: str, claim_max: int = 4) -> list[Claim]:
    claims = []
    for line in text.splitlines():
        line = line.strip()
        if not line.startswith("- "):
            continue
        try:
            claims.append(Claim(line[2:], (before_ref, after_ref)))
        except ValidationError:
            log.debug("dropping malformed claim line %r", line)
    return claims[:claim_max]


def generate_claims(
    before: str,
    after: FrameRecord,
    question: QuestionInstance,
    backend: ChatBackend,
    claim_min: int = 2,
    claim_max: int = 4,
    action_description: Optional[str] = None,
) -> list[Claim]:
    """Micro-claims about what changed from ``before`` to ``after``.

    Fewer than ``claim_min`` claims are accepted as-is; extras past
    ``claim_max`` are dropped from the tail.
    """
    desc = action_description or after.producing_action.describe()
    system, parts = claim_generation_prompt(desc, question.question, question.choices, before, after.image_ref)
    reply = backend.chat_with_images(system, parts)
    claims = parse_claim_lines(reply, before, after.image_ref, claim_max)
    if len(claims) < claim_min:
        log.debug("only %d claims for %s (min %d)", len(claims), after.image_ref, claim_min)
    return claims


_NUMBER = re.compile(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?")
_KEY_LINE = re.compile(r"^\s*(VERDICT|CONFIDENCE|REASONING)\s*:\s*(.*)$", re.I)


def parse_verification(text: str) -> ClaimEvaluation:
    fields: dict[str, str] = {}
    lines = text.splitlines()
    for i, line in enumerate(lines):
        m = _KEY_LINE.match(line)
        if m and m.group(1).upper() not in fields:
            key = m.group(1).upper()
            value = m.group(2).strip()
            if key == "REASONING":
                value = "\n".join([value] + lines[i + 1 :]).strip()
            fields[key] = value
    raw_verdict = re.sub(r"[^A-Z]", "", fields.get("VERDICT", "").upper())
    try:
        verdict = Verdict(raw_verdict)
        m = _NUMBER.match(fields["CONFIDENCE"].lstrip("[( "))
        conf = float(m.group(0))  # type: ignore[union-attr]
    except (ValueError, KeyError, AttributeError):
        return ClaimEvaluation(Verdict.INSUFFICIENT, 0.0, text)
    return ClaimEvaluation(verdict, min(1.0, max(0.0, conf)), fields.get("REASONING", ""))


def verify_claim(claim: Claim, before: str, after: FrameRecord, backend: ChatBackend) -> ClaimEvaluation:
    system, parts = claim_verification_prompt(claim.text, before, after.image_ref)
    return parse_verification(backend.chat_with_images(system, parts))


def evidence_quality(evals: Sequence[ClaimEvaluation], entailed_only_confidence: bool = False) -> float:
    """(fraction of claims entailed) x (mean confidence over all claims); 0.0 when empty."""
    n = len(evals)
    if n == 0:
        return 0.0
    entailed = [e for e in evals if e.verdict is Verdict.ENTAILED]
    if not entailed:
        return 0.0
    if entailed_only_confidence:
        mean_conf = sum(e.confidence for e in entailed) / len(entailed)
    else:
        mean_conf = sum(e.confidence for e in evals) / n
    return (len(entailed) / n) * mean_conf


@dataclass
class VerificationTrace:
    """Collects {frame_ref, claims, evaluations, eq} rows, one per scored frame."""

    rows: list[dict] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, row: dict) -> None:
        with self._lock:
            self.rows.append(row)


def _score_one_visa(
    frame: FrameRecord,
    x0: str,
    question: QuestionInstance,
    config: VerifierConfig,
    generator: ChatBackend,
    checker: ChatBackend,
) -> tuple[float, dict]:
    try:
        claims = _with_retries(
            lambda: generate_claims(x0, frame, question, generator, config.claim_min, config.claim_max),
            config.retries,
            config.backoff_s,
            "claim generation",
        )
    except BackendError as e:
        log.warning("claim generation failed for %s: %s", frame.image_ref, e)
        claims = []
    evals = []
    for c in claims:
        try:
            ev = _with_retries(lambda: verify_claim(c, x0, frame, checker), config.retries, config.backoff_s, "claim verification")
        except BackendError as e:
            ev = ClaimEvaluation(Verdict.INSUFFICIENT, 0.0, f"verification failed: {e}")
        evals.append(ev)
    eq = evidence_quality(evals, config.entailed_only_confidence)
    row = {
        "frame_ref": frame.image_ref,
        "claims": [c.text for c in claims],
        "evaluations": [e.to_dict() for e in evals],
        "eq": eq,
    }
    return eq, row


def score_visa(
    frames: Sequence[FrameRecord],
    x0: str,
    question: QuestionInstance,
    config: VerifierConfig,
    generator: ChatBackend,
    checker: Optional[ChatBackend] = None,
    trace: Optional[VerificationTrace] = None,
) -> list[float]:
    """Evidence Quality per frame; frames are always scored independently."""
    if not frames:
        raise ValidationError("score_visa needs at least one frame")
    checker = checker or generator

    def one(f):
        return _score_one_visa(f, x0, question, config, generator, checker)

    if config.parallel > 1 and len(frames) > 1:
        with ThreadPoolExecutor(max_workers=config.parallel) as pool:
            results = list(pool.map(one, frames))
    else:
        results = [one(f) for f in frames]
    if trace is not None:
        for _, row in results:
            trace.add(row)
    return [eq for eq, _ in results]


# -- uniform verifier objects used by the search engine ---------------------


class Verifier(Protocol):
    name: str

    def score(self, frames: Sequence[FrameRecord], question: QuestionInstance) -> list[float]: ...


class RandomVerifier:
    name = "random"

    def __init__(self, seed: int):
        self.seed = seed

    def score(self, frames, question):
        return score_random(frames, self.seed)


class HelpfulnessVerifier:
    name = "helpfulness"

    def __init__(self, backend: ChatBackend, retries: int = 2, backoff_s: float = 0.0):
        self.backend = backend
        self.retries = retries
        self.backoff_s = backoff_s

    def score(self, frames, question):
        return score_helpfulness(frames, question, self.backend, self.retries, self.backoff_s)


class VisaVerifier:
    name = "visa"

    def __init__(self, config: VerifierConfig, generator: ChatBackend, checker: Optional[ChatBackend] = None, trace: Optional[VerificationTrace] = None):
        self.config = config
        self.generator = generator
        self.checker = checker or generator
        self.trace = trace

    def score(self, frames, question):
        return score_visa(frames, question.image_ref, question, self.config, self.generator, self.checker, self.trace)


def make_verifier(config: VerifierConfig, backend: Optional[ChatBackend] = None, checker: Optional[ChatBackend] = None, trace: Optional[VerificationTrace] = None) -> Verifier:
    if config.kind is VerifierKind.RANDOM:
        return RandomVerifier(config.seed)  # type: ignore[arg-type]
    if backend is None:
        raise ValidationError(f"{config.kind.value} verifier needs a backend")
    if config.kind is VerifierKind.HELPFULNESS:
        return HelpfulnessVerifier(backend, config.retries, config.backoff_s)
    return VisaVerifier(config, backend, checker, trace)
