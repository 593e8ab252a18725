"""Question manifests.

Canonical layout, one JSON object per line (image paths relative to the
manifest file)::

    {"qid": str, "image": path, "question": str, "choices": [str, ...],
     "gold_index": int, "category": str}

SAT-style layout (JSON array or JSON lines)::

    {"question_id": str, "img_paths": [path, ...], "question": str,
     "answers": [str, ...], "correct_answer": str, "question_type": str}

MMSI-style layout (JSON lines, usually four choices)::

    {"id": str, "images": [path, ...], "question": str, "options": [str, ...],
     "answer": "A".."D", "question_type": str}

Multi-image records use the first image as the reference view.
"""

from __future__ import annotations

import json
import random
from pathlib import Path
from typing import Any, Iterable, Sequence

from .domain import QuestionInstance
from .errors import ConfigError, ValidationError
from .images import ImageStore
from .scene import DEFAULT_FOV, Scene, generate_question, render_image


def _records(path: Path) -> list[dict[str, Any]]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read dataset manifest {path}: {e.strerror}") from e
    stripped = text.lstrip()
    if stripped.startswith("["):
        try:
            return list(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}: malformed manifest JSON: {e.msg}") from e
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{lineno}: malformed manifest JSON: {e.msg}") from e
    return rows


def _image(base: Path, rel: str, store: ImageStore) -> str:
    p = (base / rel) if not Path(rel).is_absolute() else Path(rel)
    try:
        return store.put_file(p)
    except OSError as e:
        raise ConfigError(f"cannot read image {p}: {e.strerror}") from e


def _build(path: Path, rows: Iterable[dict], convert) -> list[QuestionInstance]:
    out = []
    for i, row in enumerate(rows, start=1):
        try:
            out.append(convert(row))
        except (KeyError, IndexError, TypeError, ValueError) as e:
            raise ConfigError(f"{path}: record {i}: {e}") from e
    return out


def load_canonical(path: str | Path, store: ImageStore) -> list[QuestionInstance]:
    path = Path(path)

    def convert(r):
        return QuestionInstance(
            r["qid"], _image(path.parent, r["image"], store), r["question"], tuple(r["choices"]),
            r.get("gold_index"), r.get("category", "uncategorized"),
        )

    return _build(path, _records(path), convert)


def load_sat(path: str | Path, store: ImageStore) -> list[QuestionInstance]:
    path = Path(path)

    def convert(r):
        choices = tuple(r["answers"])
        gold = r["correct_answer"]
        gold_index = gold if isinstance(gold, int) else choices.index(gold)
        return QuestionInstance(
            str(r.get("question_id", r.get("id"))), _image(path.parent, r["img_paths"][0], store),
            r["question"], choices, gold_index, r.get("question_type", "uncategorized"),
        )

    return _build(path, _records(path), convert)


def load_mmsi(path: str | Path, store: ImageStore) -> list[QuestionInstance]:
    path = Path(path)

    def convert(r):
        choices = tuple(r["options"])
        letter = str(r["answer"]).strip().upper()[:1]
        if not letter or not "A" <= letter < chr(ord("A") + len(choices)):
            raise ValueError(f"answer {r['answer']!r} is not a valid option letter")
        return QuestionInstance(
            str(r["id"]), _image(path.parent, r["images"][0], store), r["question"], choices,
            ord(letter) - ord("A"), r.get("question_type", "uncategorized"),
        )

    return _build(path, _records(path), convert)


LOADERS = {"canonical": load_canonical, "sat": load_sat, "mmsi": load_mmsi}


def oracle_questions(
    scenes: Sequence[Scene], store: ImageStore, seed: int = 0, count: int | None = None, fov_deg: float = DEFAULT_FOV
) -> list[QuestionInstance]:
    """One generated question per scene; start views are rendered into ``store``."""
    out = []
    for scene in scenes[:count]:
        store.put(render_image(scene, scene.camera_start, fov_deg))
        try:
            out.append(generate_question(scene, seed, fov_deg))
        except ValidationError as e:
            raise ConfigError(f"scene {scene.name}: {e}") from e
    return out


def sample_questions(questions: Sequence[QuestionInstance], n: int | None, seed: int) -> list[QuestionInstance]:
    """Seeded subsample of size ``n``, kept in manifest order."""
    if n is None or n >= len(questions):
        return list(questions)
    keep = set(random.Random(f"sample:{seed}").sample(range(len(questions)), n))
    return [q for i, q in enumerate(questions) if i in keep]
