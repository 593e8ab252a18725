"""Prompt assets and renderers.

The two claim templates ship verbatim as versioned text files under
``prompts/``. Each file is a list of upper-case section headers followed by
double-quoted strings; rendering keeps the quoted strings in order, fills
the bracketed placeholders and turns image placeholders into image parts.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence, Union

CLAIM_GENERATION_ASSET = "claim_generation_v1.txt"
CLAIM_VERIFICATION_ASSET = "claim_verification_v1.txt"

_ASSET_DIR = Path(__file__).parent / "prompts"
_HEADER = re.compile(r"^(?:\[[^\]]+\]|[A-Z][A-Z0-9 ()./\-]+):\s*$")
_QUOTED = re.compile(r'"(.*?)"', re.S)
_PLACEHOLDER = re.compile(r"\[([a-z_0-9]+)\]")


@dataclass(frozen=True)
class Text:
    text: str


@dataclass(frozen=True)
class Image:
    ref: str


Part = Union[Text, Image]


def read_asset(name: str) -> str:
    return (_ASSET_DIR / name).read_text(encoding="utf-8")


@lru_cache(maxsize=None)
def template_sections(name: str) -> tuple[tuple[str, tuple[str, ...]], ...]:
    """(header, quoted strings) pairs in file order."""
    sections: list[tuple[str, list[str]]] = []
    body: list[str] = []

    def flush():
        if sections:
            sections[-1][1].extend(_QUOTED.findall("\n".join(body)))

    for line in read_asset(name).splitlines():
        if _HEADER.match(line.strip()) and not line.startswith(" "):
            flush()
            body = []
            sections.append((line.strip()[:-1], []))
        else:
            body.append(line)
    flush()
    return tuple((h, tuple(q)) for h, q in sections)


def system_prompt(name: str) -> str:
    for header, quoted in template_sections(name):
        if header == "SYSTEM PROMPT":
            return quoted[0]
    raise KeyError(f"{name} has no SYSTEM PROMPT section")


def _fill(text: str, values: dict[str, str], images: dict[str, str]) -> list[Part]:
    parts: list[Part] = []
    pos = 0
    buf = ""
    for m in _PLACEHOLDER.finditer(text):
        key = m.group(1)
        buf += text[pos:m.start()]
        if key in images:
            if buf:
                parts.append(Text(buf))
            parts.append(Image(images[key]))
            buf = ""
        elif key in values:
            buf += values[key]
        else:
            buf += m.group(0)
        pos = m.end()
    buf += text[pos:]
    if buf.strip():
        parts.append(Text(buf))
    return parts


_CHOICE_BLOCK = re.compile(r"((?:^[ \t]*- \[choice_[0-9a-z]+\]\n?)+)", re.M)


def _expand_choices(text: str, choices: Sequence[str]) -> str:
    m = _CHOICE_BLOCK.search(text)
    if not m:
        return text
    indent = re.match(r"[ \t]*", m.group(1)).group(0)
    lines = "".join(f"{indent}- {c}\n" for c in choices)
    return text[: m.start()] + lines + text[m.end():]


def claim_generation_prompt(
    action_description: str,
    question: str,
    choices: Sequence[str],
    before_ref: str,
    after_ref: str,
) -> tuple[str, list[Part]]:
    values = {"action_description": action_description, "question": question}
    images = {"input_image": before_ref, "world_model_view": after_ref}
    parts: list[Part] = []
    for header, quoted in template_sections(CLAIM_GENERATION_ASSET):
        if header == "SYSTEM PROMPT":
            continue
        for q in quoted:
            if "[choice_" in q and not choices:
                continue
            parts.extend(_fill(_expand_choices(q, choices), values, images))
    return system_prompt(CLAIM_GENERATION_ASSET), parts


def claim_verification_prompt(claim_text: str, before_ref: str, after_ref: str) -> tuple[str, list[Part]]:
    values = {"claim_text": claim_text}
    images = {"frame_path_1": before_ref, "frame_path_2": after_ref}
    parts: list[Part] = []
    for header, quoted in template_sections(CLAIM_VERIFICATION_ASSET):
        if header == "SYSTEM PROMPT":
            continue
        for q in quoted:
            parts.extend(_fill(q, values, images))
    return system_prompt(CLAIM_VERIFICATION_ASSET), parts


HELPFULNESS_SYSTEM = (
    "You are a spatial reasoning assistant. You will see a reference image, a question, "
    "and several imagined views of the same scene. Rate how helpful each view is for "
    "answering the question."
)


def helpfulness_prompt(x0_ref: str, question: str, choices: Sequence[str], frame_refs: Sequence[str]) -> tuple[str, list[Part]]:
    parts: list[Part] = [Text("Reference image:"), Image(x0_ref), Text(f"Question: {question}")]
    parts.append(Text("Choices:\n" + "\n".join(f"  - {c}" for c in choices)))
    for i, ref in enumerate(frame_refs, start=1):
        parts.append(Text(f"View {i}:"))
        parts.append(Image(ref))
    parts.append(
        Text(
            f"Return only a JSON array of {len(frame_refs)} numbers in [0, 1], one helpfulness "
            "score per view, in the order the views were shown."
        )
    )
    return HELPFULNESS_SYSTEM, parts


SOLVER_SYSTEM = (
    "You are a spatial reasoning assistant. Answer the multiple-choice question about the "
    "scene using the reference image and any additional views provided."
)


def letter(i: int) -> str:
    return chr(ord("A") + i)


def solver_prompt(x0_ref: str, evidence_refs: Sequence[str], question: str, choices: Sequence[str]) -> tuple[str, list[Part]]:
    parts: list[Part] = [Text("Reference image:"), Image(x0_ref)]
    if evidence_refs:
        parts.append(Text("Additional views of the scene, most helpful first:"))
        parts.extend(Image(r) for r in evidence_refs)
    parts.append(Text(f"Question: {question}"))
    parts.append(Text("\n".join(f"{letter(i)}. {c}" for i, c in enumerate(choices))))
    parts.append(Text("Reply in the form 'Answer: <letter>'."))
    return SOLVER_SYSTEM, parts
