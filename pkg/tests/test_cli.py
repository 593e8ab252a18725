import json

import pytest

import spatial_tts.search as search_mod
from spatial_tts.cli import main
from spatial_tts.oracle import OracleVLM
from spatial_tts.search import EvidenceBuffer


def config(tmp_path, text):
    p = tmp_path / "run.yaml"
    p.write_text(text)
    return str(p)


SMALL = """
seed: 0
dataset: {kind: oracle, count: 4}
sweep: {verifiers: [random, visa], top_k: [1, 2], gamma: [1]}
entropy: {sample_size: 3, conditions: [baseline, "visa:2:1"]}
simulate: {gamma: [1], verifiers: [visa]}
"""


def run(*argv):
    return main(list(argv))


def test_run_smoke_twenty_scenes(tmp_path, capsys):
    cfg = config(tmp_path, "dataset: {kind: oracle, count: 20}\nsweep: {verifiers: [visa], top_k: [2], gamma: [1]}\n")
    out = tmp_path / "out"
    assert run("run", "--config", cfg, "--out-dir", str(out), "--format", "csv") == 0
    printed = capsys.readouterr().out
    assert "baseline" in printed and "visa" in printed
    assert (out / "reports" / "accuracy.txt").read_text() == printed
    results = [json.loads(line) for line in (out / "results.jsonl").read_text().splitlines()]
    assert len(results) == 40
    assert (out / "reports" / "accuracy.csv").exists()


def test_sweep_cells(tmp_path):
    cfg = config(tmp_path, "dataset: {kind: oracle, count: 2}\nsweep: {verifiers: [random], top_k: [1, 2, 3, 4], gamma: [1, 2]}\n")
    out = tmp_path / "out"
    assert run("run", "--config", cfg, "--out-dir", str(out), "--format", "json") == 0
    manifest = json.loads((out / "manifest.json").read_text())
    conds = [tuple(c) for c in manifest["conditions"]]
    assert len(conds) == 9 and conds[0][0] == "baseline"
    assert len({c for c in conds if c[0] == "random"}) == 8
    rows = [json.loads(line) for line in (out / "results.jsonl").read_text().splitlines()]
    assert all(len(r["selected_actions"]) <= r["top_k"] for r in rows if r["verifier"] == "random")


def test_manifest_contents(tmp_path):
    cfg = config(tmp_path, SMALL)
    out = tmp_path / "out"
    assert run("run", "--config", cfg, "--out-dir", str(out), "--seed", "3", "--format", "json") == 0
    m = json.loads((out / "manifest.json").read_text())
    assert len(m["config_sha256"]) == 64
    assert m["seeds"]["run"] == 3 and m["config"]["seed"] == 3
    assert m["version"] == "0.1.0"


def test_missing_dataset_path_exits_2(tmp_path, capsys):
    cfg = config(tmp_path, f"dataset: {{kind: canonical, path: {tmp_path / 'absent.jsonl'}}}\n")
    assert run("run", "--config", cfg, "--out-dir", str(tmp_path / "out")) == 2
    assert "does not exist" in capsys.readouterr().err


def test_string_seed_in_config_exits_2(tmp_path, capsys):
    cfg = config(tmp_path, 'seed: "7"\n')
    assert run("run", "--config", cfg, "--out-dir", str(tmp_path / "out")) == 2
    assert ":1:7: seed:" in capsys.readouterr().err


def test_string_seed_on_command_line_exits_2(tmp_path):
    cfg = config(tmp_path, SMALL)
    with pytest.raises(SystemExit) as e:
        run("run", "--config", cfg, "--seed", "abc")
    assert e.value.code == 2


def test_corrupted_scene_dir_exits_2(tmp_path, capsys):
    scenes = tmp_path / "scenes"
    scenes.mkdir()
    (scenes / "scene_00.json").write_text('{"name": "broken", "objects": [')
    cfg = config(tmp_path, f"dataset: {{kind: oracle, scene_dir: {scenes}}}\n")
    assert run("run", "--config", cfg, "--out-dir", str(tmp_path / "out")) == 2
    assert "scene" in capsys.readouterr().err


def test_entropy_deterministic(tmp_path, capsys):
    cfg = config(tmp_path, SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("entropy", "--config", cfg, "--out-dir", str(a), "--format", "json") == 0
    first = capsys.readouterr().out
    assert run("entropy", "--config", cfg, "--out-dir", str(b), "--format", "json") == 0
    assert capsys.readouterr().out == first
    assert (a / "entropy.json").read_bytes() == (b / "entropy.json").read_bytes()
    summary = json.loads((a / "entropy.json").read_text())
    assert set(summary["conditions"]) == {"baseline", "visa:k2:g1"}


def test_entropy_without_logprobs_skips_with_notice(tmp_path, capsys):
    cfg = config(tmp_path, SMALL + "backend: {kind: oracle, supports_logprobs: false}\n")
    out = tmp_path / "out"
    assert run("entropy", "--config", cfg, "--out-dir", str(out), "--format", "json") == 0
    err = capsys.readouterr().err
    assert "notice: skipping condition baseline" in err and "visa:k2:g1" in err
    assert json.loads((out / "entropy.json").read_text())["skipped"] == ["baseline", "visa:k2:g1"]


def test_entropy_all_invalid_notes_condition(tmp_path, capsys, monkeypatch):
    real = OracleVLM.logprobs

    def neg_inf(self, prompt, images, answer_text):
        out = real(self, prompt, images, answer_text)
        out["token_logprobs"][-1] = float("-inf")
        return out

    monkeypatch.setattr(OracleVLM, "logprobs", neg_inf)
    cfg = config(tmp_path, SMALL)
    assert run("entropy", "--config", cfg, "--out-dir", str(tmp_path / "out"), "--format", "json") == 0
    printed = capsys.readouterr().out
    assert "note: condition baseline has zero valid entropies" in printed
    assert "invalid=3" in printed


def test_simulate_passes(tmp_path, capsys):
    cfg = config(tmp_path, SMALL)
    assert run("simulate", "--config", cfg, "--out-dir", str(tmp_path / "out"), "--format", "json") == 0
    out = capsys.readouterr().out
    assert out.count("PASS ") == 4 and "FAIL" not in out


def test_simulate_detects_buffer_bug(tmp_path, capsys, monkeypatch):
    def keep_last(buffer, frames):
        merged = sorted(list(buffer.entries) + list(frames), key=lambda f: f.score)  # wrong direction
        return EvidenceBuffer(buffer.capacity, tuple(merged[: buffer.capacity]))

    monkeypatch.setattr(search_mod, "update_buffer", keep_last)
    cfg = config(tmp_path, SMALL)
    assert run("simulate", "--config", cfg, "--out-dir", str(tmp_path / "out"), "--format", "json") == 1
    captured = capsys.readouterr()
    assert "FAIL" in captured.out
    assert "buffer optimality check failed" in captured.err


def test_simulate_requires_oracle(tmp_path):
    cfg = config(tmp_path, "backend: {kind: http, world_url: 'http://x', vlm_url: 'http://y'}\n")
    assert run("simulate", "--config", cfg, "--out-dir", str(tmp_path / "out")) == 2


def test_http_backend_without_urls_exits_2(tmp_path, monkeypatch):
    monkeypatch.delenv("SPATIAL_TTS_WORLD_URL", raising=False)
    monkeypatch.delenv("SPATIAL_TTS_VLM_URL", raising=False)
    cfg = config(tmp_path, "backend: {kind: http}\n")
    assert run("run", "--config", cfg, "--out-dir", str(tmp_path / "out")) == 2


def test_replay_is_byte_identical(tmp_path):
    cfg = config(tmp_path, SMALL)
    live, replayed = tmp_path / "live", tmp_path / "replay"
    assert run("run", "--config", cfg, "--out-dir", str(live)) == 0
    transcript = str(live / "transcript.jsonl")
    assert run("run", "--config", cfg, "--out-dir", str(replayed), "--replay", transcript) == 0
    for name in ["results.jsonl", "traces.jsonl", "verification.jsonl", "reports/report.json",
                 "reports/accuracy.csv", "reports/actions.csv", "reports/accuracy.txt"]:
        assert (live / name).read_bytes() == (replayed / name).read_bytes(), name
    svgs = sorted(p.name for p in (live / "reports").glob("*.svg"))
    assert svgs
    for name in svgs:
        assert (live / "reports" / name).read_bytes() == (replayed / "reports" / name).read_bytes()


def test_replay_miss_exits_1(tmp_path, capsys):
    cfg = config(tmp_path, SMALL)
    live = tmp_path / "live"
    assert run("run", "--config", cfg, "--out-dir", str(live)) == 0
    other = config(tmp_path, SMALL.replace("count: 4", "count: 6"))
    assert run("run", "--config", other, "--out-dir", str(tmp_path / "r"), "--replay", str(live / "transcript.jsonl")) == 1
    assert "ReplayMiss" in capsys.readouterr().err
