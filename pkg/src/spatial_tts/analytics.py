"""Aggregates and report emitters.

* action grids: counts of (action kind x magnitude bucket) over traces
* accuracy tables keyed by (verifier, top_k, gamma) x category, pooled Avg.
* perceptual-quality ingestion from CSV and group means by (benchmark, gamma)
* deterministic CSV / JSON / SVG emitters (tables: 2 decimals, raw: 4)

CSV schemas written by :func:`emit_report`::

    accuracy.csv  verifier,top_k,gamma,<category>...,Avg.,n
    actions.csv   label,kind,b1,b2,b3,total
    entropy.csv   condition,group,mean_entropy,n_valid,n_invalid
    quality.csv   benchmark,gamma,mean,n        (gamma "avg" is pooled)
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence
from xml.sax.saxutils import escape

from .calibration import GROUPS, EntropySummary
from .domain import Action, ActionKind, FrameRecord, RunResult
from .errors import ValidationError
from .search import SearchTrace

log = logging.getLogger(__name__)

KINDS = (ActionKind.MOVE_FORWARD, ActionKind.TURN_LEFT, ActionKind.TURN_RIGHT)
KIND_LABEL = {ActionKind.MOVE_FORWARD: "MF", ActionKind.TURN_LEFT: "TL", ActionKind.TURN_RIGHT: "TR"}
BUCKET_LABELS = ("0.25m/9°", "0.5m/18°", "0.75m/27°")
EMPTY_CELL = "—"
AVG = "Avg."
FORMATS = ("csv", "json", "svg")


# -- action distribution ----------------------------------------------------


@dataclass
class ActionGrid:
    counts: dict[ActionKind, list[int]] = field(default_factory=lambda: {k: [0, 0, 0] for k in KINDS})

    def add(self, action: Action) -> None:
        self.counts[action.kind][action.bucket] += 1

    def totals(self) -> dict[ActionKind, int]:
        return {k: sum(v) for k, v in self.counts.items()}

    @property
    def total(self) -> int:
        return sum(self.totals().values())

    def share(self, kind: ActionKind) -> float:
        return self.totals()[kind] / self.total if self.total else 0.0

    def to_rows(self) -> list[list[int]]:
        return [list(self.counts[k]) for k in KINDS]


def action_distribution(traces: Iterable[SearchTrace], selected_only: bool = True) -> ActionGrid:
    """Counts of buffer-selected producing actions, or of every expanded action."""
    grid = ActionGrid()
    for t in traces:
        actions = t.selected_actions() if selected_only else [r.action for r in t.records]
        for a in actions:
            grid.add(a)
    return grid


# -- accuracy tables --------------------------------------------------------

Condition = tuple[str, int, int]


@dataclass
class AccuracyTable:
    categories: list[str]
    # condition -> category -> (correct, total); AVG pools every result of the condition
    cells: dict[Condition, dict[str, tuple[int, int]]]

    def value(self, cond: Condition, category: str = AVG) -> Optional[float]:
        c, n = self.cells.get(cond, {}).get(category, (0, 0))
        return 100.0 * c / n if n else None

    def conditions(self) -> list[Condition]:
        # baseline first, then verifier name, gamma, k (Table-1 column order)
        return sorted(self.cells, key=lambda c: (c[0] != "baseline", c[0], c[2], c[1]))

    def render(self) -> str:
        header = ["verifier", "top_k", "gamma", *self.categories, AVG]
        lines = [" | ".join(header)]
        for cond in self.conditions():
            vals = [_fmt2(self.value(cond, cat)) for cat in [*self.categories, AVG]]
            lines.append(" | ".join([cond[0], str(cond[1]), str(cond[2]), *vals]))
        return "\n".join(lines) + "\n"


def _fmt2(x: Optional[float]) -> str:
    return EMPTY_CELL if x is None else f"{x:.2f}"


def accuracy_table(results: Iterable[RunResult], categories: Optional[Mapping[str, str]] = None) -> AccuracyTable:
    """Percent correct per (verifier, k, gamma) x category.

    ``categories`` maps qid to category; results with no label fall back to
    their own ``category`` field, and then to "uncategorized".
    """
    cells: dict[Condition, dict[str, list[int]]] = {}
    cats: set[str] = set()
    for r in results:
        if r.gold_index is None:
            raise ValidationError(f"result {r.qid} has no gold answer")
        cat = (categories or {}).get(r.qid) or r.category or "uncategorized"
        cats.add(cat)
        row = cells.setdefault(r.condition, {})
        for key in (cat, AVG):
            cell = row.setdefault(key, [0, 0])
            cell[0] += int(r.correct)
            cell[1] += 1
    frozen = {c: {k: (v[0], v[1]) for k, v in row.items()} for c, row in cells.items()}
    return AccuracyTable(sorted(cats), frozen)


# -- perceptual quality -----------------------------------------------------


@dataclass
class QualityReport:
    scores: dict[str, float]
    frames: dict[str, FrameRecord]
    # (benchmark, gamma) -> (mean, n); gamma None is the pooled mean over all rows of the benchmark
    means: dict[tuple[str, Optional[int]], tuple[float, int]]

    def mean(self, benchmark: str, gamma: Optional[int] = None) -> float:
        return self.means[(benchmark, gamma)][0]

    def render(self, benchmark: str, gamma: Optional[int] = None) -> str:
        return f"{self.mean(benchmark, gamma):.2f}"


def ingest_quality_scores(path: str | Path, frames: Optional[Mapping[str, FrameRecord]] = None) -> QualityReport:
    """Read {frame_ref, benchmark, gamma, score} rows and compute group means.

    With ``frames`` given, rows for unknown refs are skipped with a warning and
    known frames get ``quality_score`` attached. Duplicate refs: last row wins.
    """
    rows: dict[str, tuple[str, int, float]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        for lineno, row in enumerate(csv.DictReader(f), start=2):
            ref = row["frame_ref"].strip()
            if frames is not None and ref not in frames:
                log.warning("quality row %d: unknown frame_ref %s skipped", lineno, ref)
                continue
            if ref in rows:
                log.warning("quality row %d: duplicate frame_ref %s, keeping the later row", lineno, ref)
                del rows[ref]
            rows[ref] = (row["benchmark"].strip(), int(row["gamma"]), float(row["score"]))
    groups: dict[tuple[str, Optional[int]], list[float]] = {}
    for bench, gamma, score in rows.values():
        groups.setdefault((bench, gamma), []).append(score)
        groups.setdefault((bench, None), []).append(score)
    means = {k: (math.fsum(v) / len(v), len(v)) for k, v in groups.items()}
    attached = {}
    if frames is not None:
        attached = {ref: replace(frames[ref], quality_score=s) for ref, (_, _, s) in rows.items()}
    return QualityReport({ref: s for ref, (_, _, s) in rows.items()}, attached, means)


# -- report emission --------------------------------------------------------


@dataclass
class ReportBundle:
    accuracy: Optional[AccuracyTable] = None
    entropy: Optional[EntropySummary] = None
    actions: dict[str, ActionGrid] = field(default_factory=dict)
    quality: Optional[QualityReport] = None


def _r2(x: Optional[float]) -> Optional[float]:
    return None if x is None else round(x, 2)


def _r4(x: Optional[float]) -> Optional[float]:
    return None if x is None else round(x, 4)


def _fmt4(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.4f}"


def _accuracy_rows(t: AccuracyTable) -> list[dict]:
    out = []
    for cond in t.conditions():
        row: dict = {"verifier": cond[0], "top_k": cond[1], "gamma": cond[2]}
        for cat in [*t.categories, AVG]:
            row[cat] = _r2(t.value(cond, cat))
        row["n"] = t.cells[cond][AVG][1]
        out.append(row)
    return out


def _entropy_rows(s: EntropySummary) -> list[dict]:
    return [
        {"condition": c, "group": g, "mean_entropy": _r4(st.mean_entropy), "n_valid": st.n_valid, "n_invalid": st.n_invalid}
        for c in sorted(s.groups)
        for g, st in ((g, s.groups[c][g]) for g in GROUPS)
    ]


def _quality_rows(q: QualityReport) -> list[dict]:
    keys = sorted(q.means, key=lambda k: (k[0], k[1] is None, k[1] or 0))
    return [
        {"benchmark": b, "gamma": "avg" if g is None else g, "mean": _r4(q.means[(b, g)][0]), "n": q.means[(b, g)][1]}
        for b, g in keys
    ]


def _action_rows(actions: Mapping[str, ActionGrid]) -> list[dict]:
    out = []
    for label in sorted(actions):
        grid = actions[label]
        for k in KINDS:
            c = grid.counts[k]
            out.append({"label": label, "kind": KIND_LABEL[k], "b1": c[0], "b2": c[1], "b3": c[2], "total": sum(c)})
    return out


def _csv_text(rows: list[dict], columns: Sequence[str], floats: Mapping[str, str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        out = []
        for c in columns:
            v = row.get(c)
            if v is None:
                out.append(EMPTY_CELL if floats.get(c) == "2" else "")
            elif c in floats:
                out.append(f"{v:.{floats[c]}f}")
            else:
                out.append(str(v))
        w.writerow(out)
    return buf.getvalue()


def report_tables(bundle: ReportBundle) -> dict[str, list[dict]]:
    tables: dict[str, list[dict]] = {}
    if bundle.accuracy is not None:
        tables["accuracy"] = _accuracy_rows(bundle.accuracy)
    if bundle.actions:
        tables["actions"] = _action_rows(bundle.actions)
    if bundle.entropy is not None:
        tables["entropy"] = _entropy_rows(bundle.entropy)
    if bundle.quality is not None:
        tables["quality"] = _quality_rows(bundle.quality)
    return tables


def _svg_bars(title: str, labels: Sequence[str], values: Sequence[float]) -> str:
    width, bar, gap, height = 60 + len(values) * 50, 36, 14, 220
    top = max([v for v in values if v is not None] + [1e-9])
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + 60}" viewBox="0 0 {width} {height + 60}">',
        f'<text x="10" y="18" font-size="13">{escape(title)}</text>',
    ]
    for i, (lab, v) in enumerate(zip(labels, values)):
        x = 40 + i * (bar + gap)
        h = 0.0 if v is None else height * v / top
        y = 30 + height - h
        parts.append(f'<rect x="{x}" y="{y:.2f}" width="{bar}" height="{h:.2f}" fill="#4a7ab7"/>')
        parts.append(f'<text x="{x}" y="{y - 3:.2f}" font-size="9">{_fmt4(v)}</text>')
        parts.append(
            f'<text x="{x}" y="{height + 44}" font-size="9" transform="rotate(30 {x} {height + 44})">{escape(lab)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(bundle: ReportBundle, fmt: str, out_dir: str | Path) -> list[Path]:
    """Write the bundle in one format; same bundle gives byte-identical files."""
    if fmt not in FORMATS:
        raise ValidationError(f"unknown report format {fmt!r}; expected one of {FORMATS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables = report_tables(bundle)
    files: dict[str, str] = {}
    if fmt == "json":
        files["report.json"] = json.dumps(tables, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
    elif fmt == "csv":
        if bundle.accuracy is not None:
            cols = ["verifier", "top_k", "gamma", *bundle.accuracy.categories, AVG, "n"]
            files["accuracy.csv"] = _csv_text(tables["accuracy"], cols, {c: "2" for c in [*bundle.accuracy.categories, AVG]})
        if "actions" in tables:
            files["actions.csv"] = _csv_text(tables["actions"], ["label", "kind", "b1", "b2", "b3", "total"], {})
        if "entropy" in tables:
            files["entropy.csv"] = _csv_text(
                tables["entropy"], ["condition", "group", "mean_entropy", "n_valid", "n_invalid"], {"mean_entropy": "4"}
            )
        if "quality" in tables:
            files["quality.csv"] = _csv_text(tables["quality"], ["benchmark", "gamma", "mean", "n"], {"mean": "4"})
    else:
        if bundle.entropy is not None:
            rows = tables["entropy"]
            files["entropy.svg"] = _svg_bars(
                "mean answer entropy", [f"{r['condition']}/{r['group']}" for r in rows], [r["mean_entropy"] for r in rows]
            )
        for label in sorted(bundle.actions):
            grid = bundle.actions[label]
            labels = [f"{KIND_LABEL[k]} {b}" for k in KINDS for b in BUCKET_LABELS]
            values = [float(c) for row in grid.to_rows() for c in row]
            files[f"actions_{_slug(label)}.svg"] = _svg_bars(f"action distribution ({label})", labels, values)
    paths = []
    for name in sorted(files):
        p = out / name
        p.write_bytes(files[name].encode("utf-8"))
        paths.append(p)
    return paths


def _slug(s: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in s)
