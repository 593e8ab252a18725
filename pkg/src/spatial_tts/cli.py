"""Command-line entry point: ``spatial-tts {run,entropy,simulate}``.

Exit codes: 0 success (possibly degraded, with a warnings summary),
1 verification failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .analytics import ReportBundle, accuracy_table, action_distribution, emit_report
from .calibration import choice_likelihoods, entropy_report
from .clients import CallableTransport, HttpTransport, HttpVLMClient, ReplayTransport, TranscriptRecorder, Transport
from .config import RunConfig, apply_overrides, backend_env, load_config
from .datasets import LOADERS, oracle_questions, sample_questions
from .domain import QuestionInstance, RunResult
from .errors import BackendError, CapabilityError, ConfigError, ReplayMiss
from .images import ImageStore
from .oracle import OracleVLM, wire_handler
from .scene import bundled_scene_dir, load_scenes
from .search import SearchConfig, SearchTrace, answer, exhaustive_top_k, run_search
from .verifiers import VerificationTrace, VerifierConfig, make_verifier
from .world import HttpWorldModel, OracleWorldModel

log = logging.getLogger("spatial_tts")

TRANSCRIPT = "transcript.jsonl"


class _WarningCounter(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.messages: list[str] = []

    def emit(self, record):
        self.messages.append(record.getMessage())


@dataclass
class Backends:
    store: ImageStore
    world: HttpWorldModel
    vlm: HttpVLMClient
    transports: list = field(default_factory=list)

    def check_replay(self) -> None:
        """A replay miss means the transcript is not a recording of this run; degraded output would differ."""
        misses = sum(getattr(t, "misses", 0) for t in {id(t): t for t in self.transports}.values())
        if misses:
            raise ReplayMiss(f"{misses} request(s) not found in the replay transcript")


def _scenes(directory: Optional[str]):
    path = Path(directory) if directory else bundled_scene_dir()
    if not path.is_dir():
        raise ConfigError(f"scene directory {path} does not exist")
    try:
        scenes = load_scenes(path)
    except (ValueError, KeyError, TypeError) as e:
        raise ConfigError(f"corrupted scene fixture in {path}: {e}") from e
    if not scenes:
        raise ConfigError(f"no scene fixtures in {path}")
    return scenes


def build_backends(cfg: RunConfig, out_dir: Path, replay: Optional[str]) -> Backends:
    store = ImageStore()
    b = cfg.backend
    logprobs = b.supports_logprobs if b.supports_logprobs is not None else b.kind == "oracle"
    world_t: Transport
    vlm_t: Transport
    if replay:
        try:
            world_t = vlm_t = ReplayTransport.from_file(replay)
        except (OSError, ValueError, KeyError) as e:
            raise ConfigError(f"cannot load replay transcript {replay}: {e}") from e
    else:
        recorder = TranscriptRecorder(out_dir / TRANSCRIPT)
        if b.kind == "oracle":
            scenes = _scenes(b.scene_dir or cfg.dataset.scene_dir)
            handler = wire_handler(OracleWorldModel(scenes, store, b.fov_deg), OracleVLM(scenes, seed=cfg.seed))
            world_t = vlm_t = CallableTransport(handler, recorder)
        else:
            env = backend_env()
            world_url, vlm_url = b.world_url or env["world_url"], b.vlm_url or env["vlm_url"]
            if not world_url or not vlm_url:
                raise ConfigError("http backend needs world_url and vlm_url (config or environment)")
            deadline = float(env["deadline_s"]) if env["deadline_s"] else b.deadline_s
            kw = dict(token=env["token"], deadline_s=deadline, retries=b.retries, max_in_flight=b.max_in_flight, recorder=recorder)
            world_t = HttpTransport(world_url, **kw)
            vlm_t = HttpTransport(vlm_url, **kw)
    world = HttpWorldModel(world_t, store, b.world_path)
    vlm = HttpVLMClient(vlm_t, store, chat_path=b.chat_path, logprob_path=b.logprob_path, supports_logprobs=logprobs)
    return Backends(store, world, vlm, [world_t, vlm_t])


def load_questions(cfg: RunConfig, store: ImageStore) -> list[QuestionInstance]:
    d = cfg.dataset
    if d.kind == "oracle":
        qs = oracle_questions(_scenes(d.scene_dir or cfg.backend.scene_dir), store, cfg.seed, d.count, cfg.backend.fov_deg)
    else:
        if not d.path:
            raise ConfigError(f"dataset kind {d.kind!r} needs a path")
        if not Path(d.path).exists():
            raise ConfigError(f"dataset path {d.path} does not exist")
        qs = LOADERS[d.kind](d.path, store)
    return sample_questions(qs, d.sample, cfg.seed)


def _verifier_config(cfg: RunConfig, kind: str) -> VerifierConfig:
    v = cfg.verifier
    return VerifierConfig(
        kind, seed=cfg.seed if kind == "random" else None, claim_min=v.claim_min, claim_max=v.claim_max,
        retries=v.retries, entailed_only_confidence=v.entailed_only_confidence, parallel=cfg.parallel,
    )


def _write_manifest(out: Path, command: str, cfg: RunConfig, config_path: str, replay: Optional[str], extra: dict) -> None:
    manifest = {
        "command": command,
        "config_path": str(config_path),
        "config_sha256": cfg.digest(),
        "config": cfg.model_dump(mode="json"),
        "seeds": {"run": cfg.seed, "random_verifier": cfg.seed, "sample": cfg.seed},
        "version": __version__,
        "replay": replay,
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")


def cmd_run(cfg: RunConfig, out: Path, config_path: str, replay: Optional[str], formats: Sequence[str]) -> int:
    be = build_backends(cfg, out, replay)
    questions = load_questions(cfg, be.store)
    sw = cfg.sweep
    kmax = max(sw.top_k)
    results: list[RunResult] = []
    trace_rows: list[dict] = []
    verification_rows: list[dict] = []
    grids = {}
    if sw.baseline:
        results += [answer(q, None, be.vlm, retries=cfg.verifier.retries) for q in questions]
    for vname in sw.verifiers:
        for gamma in sorted(sw.gamma):
            vtrace = VerificationTrace()
            verifier = make_verifier(_verifier_config(cfg, vname), be.vlm, trace=vtrace)
            scfg = SearchConfig(gamma, kmax, sw.beam_width, sw.frames_per_rollout, sw.prompt, cfg.parallel)
            traces: list[SearchTrace] = []
            for q in questions:
                # one search at the largest k; smaller k are prefixes of the same global top-k
                buffer, trace = run_search(q, scfg, be.world, verifier)
                traces.append(trace)
                for k in sorted(sw.top_k):
                    results.append(
                        answer(q, buffer.truncated(k), be.vlm, verifier_name=vname, beam_depth=gamma, retries=cfg.verifier.retries)
                    )
                trace_rows += [{"verifier": vname, "gamma": gamma, **json.loads(line)} for line in trace.to_jsonl().splitlines()]
            verification_rows += [{"verifier": vname, "gamma": gamma, **r} for r in sorted(vtrace.rows, key=lambda r: json.dumps(r, sort_keys=True))]
            grids[f"{vname}_g{gamma}_k{kmax}"] = action_distribution(traces, selected_only=True)
    be.check_replay()
    results.sort(key=lambda r: (r.verifier != "baseline", r.verifier, r.beam_depth, r.top_k, r.qid))
    _write_jsonl(out / "results.jsonl", [r.to_dict() for r in results])
    _write_jsonl(out / "traces.jsonl", trace_rows)
    _write_jsonl(out / "verification.jsonl", verification_rows)
    table = accuracy_table(results)
    bundle = ReportBundle(accuracy=table, actions=grids)
    for fmt in formats:
        emit_report(bundle, fmt, out / "reports")
    (out / "reports" / "accuracy.txt").write_text(table.render(), encoding="utf-8")
    _write_manifest(out, "run", cfg, config_path, replay, {"n_questions": len(questions), "conditions": [list(c) for c in table.conditions()]})
    print(table.render(), end="")
    return 0


def _parse_condition(text: str) -> tuple[str, int, int]:
    if text == "baseline":
        return ("baseline", 0, 0)
    try:
        v, k, g = text.split(":")
        return (v, int(k), int(g))
    except ValueError:
        raise ConfigError(f"entropy condition {text!r} must be 'baseline' or 'verifier:top_k:gamma'") from None


def cmd_entropy(cfg: RunConfig, out: Path, config_path: str, replay: Optional[str], formats: Sequence[str]) -> int:
    be = build_backends(cfg, out, replay)
    conds = [_parse_condition(c) for c in cfg.entropy.conditions]
    questions = sample_questions(load_questions(cfg, be.store), cfg.entropy.sample_size, cfg.seed)
    pairs = []
    skipped: list[str] = []
    for vname, k, gamma in conds:
        label = "baseline" if vname == "baseline" else f"{vname}:k{k}:g{gamma}"
        verifier = None if vname == "baseline" else make_verifier(_verifier_config(cfg, vname), be.vlm)
        cond_pairs = []
        try:
            for q in questions:
                buffer = None
                if verifier is not None:
                    scfg = SearchConfig(gamma, k, cfg.sweep.beam_width, cfg.sweep.frames_per_rollout, cfg.sweep.prompt, cfg.parallel)
                    buffer, _ = run_search(q, scfg, be.world, verifier)
                result = answer(q, buffer, be.vlm, verifier_name=vname, beam_depth=gamma)
                images = [q.image_ref] + ([e.image_ref for e in buffer.entries] if buffer else [])
                cond_pairs.append((result, choice_likelihoods(q, images, be.vlm, label, cfg.parallel)))
        except CapabilityError as e:
            print(f"notice: skipping condition {label}: {e}", file=sys.stderr)
            skipped.append(label)
            continue
        pairs += cond_pairs
    be.check_replay()
    summary = entropy_report(pairs, skipped)
    for c, groups in sorted(summary.groups.items()):
        for g, st in groups.items():
            mean = "n/a" if st.mean_entropy is None else f"{st.mean_entropy:.4f}"
            print(f"{c:<20} {g:<8} H={mean} valid={st.n_valid} invalid={st.n_invalid}")
        if all(st.n_valid == 0 for st in groups.values()):
            print(f"note: condition {c} has zero valid entropies")
    bundle = ReportBundle(entropy=summary)
    for fmt in formats:
        emit_report(bundle, fmt, out / "reports")
    (out / "entropy.json").write_text(json.dumps(summary.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _write_manifest(out, "entropy", cfg, config_path, replay, {"n_questions": len(questions)})
    return 0


def _key(f):
    return (f.image_ref, f.producing_action.kind.value, f.producing_action.magnitude, f.depth, f.score)


def cmd_simulate(cfg: RunConfig, out: Path, config_path: str, replay: Optional[str], formats: Sequence[str]) -> int:
    if cfg.dataset.kind != "oracle" or cfg.backend.kind != "oracle":
        raise ConfigError("simulate needs dataset.kind and backend.kind 'oracle'")
    be = build_backends(cfg, out, replay)
    questions = load_questions(cfg, be.store)
    sim = cfg.simulate
    failures = []
    results: list[RunResult] = []
    for vname in sim.verifiers:
        verifier = make_verifier(_verifier_config(cfg, vname), be.vlm)
        for gamma in sorted(sim.gamma):
            scfg = SearchConfig(gamma, sim.top_k, 9, cfg.sweep.frames_per_rollout, "", cfg.parallel)
            for q in questions:
                buffer, _ = run_search(q, scfg, be.world, verifier)
                expected = exhaustive_top_k(q, be.world, verifier, gamma, sim.top_k, cfg.sweep.frames_per_rollout)
                ok = [_key(f) for f in buffer.entries] == [_key(f) for f in expected]
                print(f"{'PASS' if ok else 'FAIL'} {q.qid} verifier={vname} gamma={gamma}")
                if not ok:
                    failures.append(f"{q.qid} ({vname}, gamma={gamma})")
                results.append(answer(q, buffer, be.vlm, verifier_name=vname, beam_depth=gamma))
    be.check_replay()
    table = accuracy_table(results)
    print(table.render(), end="")
    for fmt in formats:
        emit_report(ReportBundle(accuracy=table), fmt, out / "reports")
    _write_manifest(out, "simulate", cfg, config_path, replay, {"failures": failures})
    if failures:
        print("buffer optimality check failed for: " + ", ".join(failures), file=sys.stderr)
        return 1
    print(f"all {len(results)} buffer optimality checks passed")
    return 0


COMMANDS = {"run": cmd_run, "entropy": cmd_entropy, "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spatial-tts", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="YAML or JSON run config")
        s.add_argument("--out-dir", default="out", help="output directory (default: out)")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--parallel", type=int, help="override the config parallelism")
        s.add_argument("--replay", metavar="TRANSCRIPT", help="serve every backend call from a recorded transcript")
        s.add_argument("--format", choices=["csv", "json", "svg"], action="append", help="report format (repeatable)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    counter = _WarningCounter()
    log.addHandler(counter)
    try:
        cfg = apply_overrides(load_config(args.config), seed=args.seed, parallel=args.parallel)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if not args.replay:
            (out / TRANSCRIPT).unlink(missing_ok=True)
        code = COMMANDS[args.command](cfg, out, args.config, args.replay, args.format or cfg.formats)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except BackendError as e:
        print(f"backend error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    finally:
        log.removeHandler(counter)
    if counter.messages:
        print(f"{len(counter.messages)} warning(s); first: {counter.messages[0]}", file=sys.stderr)
    return code
