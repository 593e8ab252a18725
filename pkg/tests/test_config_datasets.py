import json

import pytest

from spatial_tts.config import RunConfig, apply_overrides, load_config
from spatial_tts.datasets import load_canonical, load_mmsi, load_sat, oracle_questions, sample_questions
from spatial_tts.domain import QuestionInstance, image_hash
from spatial_tts.errors import ConfigError
from spatial_tts.images import ImageStore


def write(tmp_path, text, name="run.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_defaults(tmp_path):
    cfg = load_config(write(tmp_path, ""))
    assert cfg == RunConfig()
    assert cfg.sweep.top_k == [1, 2, 3, 4]
    assert cfg.sweep.gamma == [1, 2]
    assert cfg.entropy.sample_size == 50


def test_full_config_round_trip(tmp_path):
    cfg = load_config(write(tmp_path, "name: x\nseed: 7\nsweep:\n  verifiers: [visa]\n  top_k: [2]\n"))
    assert cfg.seed == 7 and cfg.sweep.verifiers == ["visa"] and cfg.sweep.top_k == [2]


def test_json_config(tmp_path):
    cfg = load_config(write(tmp_path, json.dumps({"seed": 3, "backend": {"kind": "oracle"}}), "run.json"))
    assert cfg.seed == 3


def test_string_seed_reports_line_and_column(tmp_path):
    p = write(tmp_path, "name: x\nseed: \"0\"\n")
    with pytest.raises(ConfigError) as e:
        load_config(p)
    assert f"{p}:2:7: seed:" in str(e.value)


def test_float_seed_rejected(tmp_path):
    with pytest.raises(ConfigError, match="seed"):
        load_config(write(tmp_path, "seed: 1.5\n"))


def test_nested_error_location(tmp_path):
    p = write(tmp_path, "sweep:\n  top_k: [1, two]\n")
    with pytest.raises(ConfigError) as e:
        load_config(p)
    assert f"{p}:2:14: sweep.top_k.1:" in str(e.value)


def test_unknown_field_points_at_key(tmp_path):
    p = write(tmp_path, "seed: 0\nbackend:\n  colour: red\n")
    with pytest.raises(ConfigError) as e:
        load_config(p)
    assert f"{p}:3:3: backend.colour:" in str(e.value)


def test_retry_cap(tmp_path):
    with pytest.raises(ConfigError, match="backend.retries"):
        load_config(write(tmp_path, "backend: {retries: 5}\n"))


def test_bad_yaml_and_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config(write(tmp_path, "seed: [1,\n"))
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.yaml")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(write(tmp_path, "- 1\n"))


def test_overrides():
    cfg = apply_overrides(RunConfig(), seed=5, parallel=None)
    assert cfg.seed == 5 and cfg.parallel == 1
    with pytest.raises(ConfigError, match="--parallel"):
        apply_overrides(RunConfig(), parallel=0)


def test_digest_tracks_content():
    assert RunConfig().digest() == RunConfig().digest()
    assert RunConfig(seed=1).digest() != RunConfig().digest()


@pytest.fixture
def images(tmp_path):
    (tmp_path / "img").mkdir()
    a, b = tmp_path / "img" / "a.png", tmp_path / "img" / "b.png"
    a.write_bytes(b"first image")
    b.write_bytes(b"second image")
    return a, b


def test_canonical_loader(tmp_path, images):
    p = tmp_path / "q.jsonl"
    rows = [
        {"qid": "q1", "image": "img/a.png", "question": "Q?", "choices": ["x", "y"], "gold_index": 1, "category": "ego"},
        {"qid": "q2", "image": "img/b.png", "question": "R?", "choices": ["x", "y", "z"]},
    ]
    p.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    store = ImageStore()
    qs = load_canonical(p, store)
    assert [q.qid for q in qs] == ["q1", "q2"]
    assert qs[0].image_ref == image_hash(b"first image") and qs[0].gold_index == 1 and qs[0].category == "ego"
    assert qs[1].gold_index is None and qs[1].category == "uncategorized"
    assert store.get(qs[1].image_ref) == b"second image"


def test_sat_loader_json_array(tmp_path, images):
    p = tmp_path / "sat.json"
    p.write_text(json.dumps([
        {"question_id": 9, "img_paths": ["img/a.png", "img/b.png"], "question": "Q?",
         "answers": ["left", "right"], "correct_answer": "right", "question_type": "goal_aim"},
    ]))
    (q,) = load_sat(p, ImageStore())
    assert q.qid == "9" and q.gold_index == 1 and q.category == "goal_aim"
    assert q.image_ref == image_hash(b"first image")


def test_mmsi_loader(tmp_path, images):
    p = tmp_path / "mmsi.jsonl"
    p.write_text(json.dumps({"id": "m1", "images": ["img/b.png"], "question": "Q?",
                             "options": ["a", "b", "c", "d"], "answer": "C", "question_type": "motion"}) + "\n")
    (q,) = load_mmsi(p, ImageStore())
    assert q.gold_index == 2 and q.category == "motion"


@pytest.mark.parametrize("row, msg", [
    ({"id": "m1", "images": ["img/b.png"], "question": "Q?", "options": ["a", "b"], "answer": "D"}, "record 1"),
    ({"id": "m1", "images": ["img/missing.png"], "question": "Q?", "options": ["a", "b"], "answer": "A"}, "cannot read image"),
    ({"id": "m1", "question": "Q?", "options": ["a", "b"], "answer": "A"}, "record 1"),
])
def test_mmsi_loader_errors(tmp_path, images, row, msg):
    p = tmp_path / "mmsi.jsonl"
    p.write_text(json.dumps(row) + "\n")
    with pytest.raises(ConfigError, match=msg):
        load_mmsi(p, ImageStore())


def test_malformed_manifest(tmp_path):
    p = tmp_path / "q.jsonl"
    p.write_text('{"qid": "q1"}\n{not json\n')
    with pytest.raises(ConfigError, match=":2:"):
        load_canonical(p, ImageStore())


def test_oracle_questions_render_start_views(scenes):
    store = ImageStore()
    qs = oracle_questions(scenes, store, seed=0, count=3)
    assert len(qs) == 3
    for q in qs:
        assert q.image_ref in store


def qlist(n):
    return [QuestionInstance(f"q{i}", "sha256:0", "Q?", ("a", "b")) for i in range(n)]


def test_sample_questions_seeded_and_ordered():
    qs = qlist(100)
    a = sample_questions(qs, 50, seed=1)
    assert a == sample_questions(qs, 50, seed=1)
    assert a != sample_questions(qs, 50, seed=2)
    assert len(a) == 50
    idx = [qs.index(q) for q in a]
    assert idx == sorted(idx)
    assert sample_questions(qs, None, 0) == qs
    assert sample_questions(qs, 500, 0) == qs
