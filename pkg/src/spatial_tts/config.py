"""Run configuration: one YAML (or JSON) file per run, validated by pydantic.

Validation errors are reported with the line and column of the offending
value in the source file. Scalar fields can be overridden from the command
line (``--seed``, ``--parallel``); backend credentials come from the
environment.

Example::

    name: sat-sweep
    seed: 0
    dataset: {kind: oracle, count: 24}
    backend: {kind: oracle}
    sweep:
      verifiers: [random, visa]
      top_k: [1, 2, 3, 4]
      gamma: [1, 2]
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Literal, Optional

import pydantic
import yaml
from pydantic import BaseModel, ConfigDict, Field, StrictInt

from .errors import ConfigError

ENV_WORLD_URL = "SPATIAL_TTS_WORLD_URL"
ENV_VLM_URL = "SPATIAL_TTS_VLM_URL"
ENV_TOKEN = "SPATIAL_TTS_TOKEN"
ENV_DEADLINE = "SPATIAL_TTS_DEADLINE_S"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetConfig(_Strict):
    kind: Literal["oracle", "canonical", "sat", "mmsi"] = "oracle"
    path: Optional[str] = None
    # oracle: number of bundled (or scene_dir) scenes to pose questions on
    count: Optional[StrictInt] = Field(default=None, ge=1)
    scene_dir: Optional[str] = None
    # random subsample of the manifest, seeded by the run seed
    sample: Optional[StrictInt] = Field(default=None, ge=1)


class BackendConfig(_Strict):
    kind: Literal["oracle", "http"] = "oracle"
    world_url: Optional[str] = None
    vlm_url: Optional[str] = None
    world_path: str = "/v1/imagine"
    chat_path: str = "/v1/chat"
    logprob_path: str = "/v1/logprobs"
    # None: the oracle backend supports logprobs, http backends do not
    supports_logprobs: Optional[bool] = None
    deadline_s: float = Field(default=60.0, gt=0)
    retries: StrictInt = Field(default=2, ge=0, le=2)
    max_in_flight: StrictInt = Field(default=4, ge=1)
    # oracle only: scenes the stub world model and VLM know about
    scene_dir: Optional[str] = None
    fov_deg: float = Field(default=90.0, gt=0, le=180)


class VerifierSettings(_Strict):
    claim_min: StrictInt = Field(default=2, ge=0)
    claim_max: StrictInt = Field(default=4, ge=1)
    retries: StrictInt = Field(default=2, ge=0)
    entailed_only_confidence: bool = False


class SweepConfig(_Strict):
    verifiers: list[Literal["random", "helpfulness", "visa"]] = ["random", "helpfulness", "visa"]
    top_k: list[StrictInt] = [1, 2, 3, 4]
    gamma: list[StrictInt] = [1, 2]
    beam_width: StrictInt = Field(default=3, ge=1)
    frames_per_rollout: StrictInt = Field(default=1, ge=1)
    prompt: str = ""
    baseline: bool = True


class EntropyConfig(_Strict):
    sample_size: StrictInt = Field(default=50, ge=1)
    conditions: list[str] = ["baseline", "random:1:1", "visa:1:1"]


class SimulateConfig(_Strict):
    gamma: list[StrictInt] = [1, 2]
    top_k: StrictInt = Field(default=4, ge=1)
    verifiers: list[Literal["random", "visa"]] = ["random", "visa"]


class RunConfig(_Strict):
    name: str = "run"
    seed: StrictInt = 0
    parallel: StrictInt = Field(default=1, ge=1)
    formats: list[Literal["csv", "json", "svg"]] = ["csv", "json", "svg"]
    dataset: DatasetConfig = DatasetConfig()
    backend: BackendConfig = BackendConfig()
    verifier: VerifierSettings = VerifierSettings()
    sweep: SweepConfig = SweepConfig()
    entropy: EntropyConfig = EntropyConfig()
    simulate: SimulateConfig = SimulateConfig()

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()).hexdigest()


def _node_at(node: Optional[yaml.Node], loc: tuple, key_node: bool = False) -> Optional[yaml.Node]:
    """Deepest YAML node along a pydantic error location (the key itself if ``key_node``)."""
    best = node
    for i, key in enumerate(loc):
        if isinstance(node, yaml.MappingNode):
            pair = next(((k, v) for k, v in node.value if k.value == str(key)), None)
            child = None if pair is None else pair[0 if key_node and i == len(loc) - 1 else 1]
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            child = node.value[key]
        else:
            child = None
        if child is None:
            break
        node = best = child
    return best


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e.strerror}") from e
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark else str(path)
        raise ConfigError(f"{where}: invalid YAML: {getattr(e, 'problem', e)}") from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:1:1: config must be a mapping")
    try:
        return RunConfig.model_validate(data)
    except pydantic.ValidationError as e:
        msgs = []
        for err in e.errors():
            node = _node_at(root, tuple(err["loc"]), key_node=err["type"] == "extra_forbidden")
            where = f"{path}:{node.start_mark.line + 1}:{node.start_mark.column + 1}" if node is not None else str(path)
            field = ".".join(str(x) for x in err["loc"])
            msgs.append(f"{where}: {field}: {err['msg']}")
        raise ConfigError("\n".join(msgs)) from e


def apply_overrides(config: RunConfig, **overrides: Any) -> RunConfig:
    """Override top-level scalars (unset values are ignored) and revalidate."""
    data = config.model_dump()
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.model_validate(data)
    except pydantic.ValidationError as e:
        raise ConfigError("; ".join(f"--{'.'.join(map(str, x['loc']))}: {x['msg']}" for x in e.errors())) from e


def backend_env() -> dict[str, Optional[str]]:
    return {
        "world_url": os.environ.get(ENV_WORLD_URL),
        "vlm_url": os.environ.get(ENV_VLM_URL),
        "token": os.environ.get(ENV_TOKEN),
        "deadline_s": os.environ.get(ENV_DEADLINE),
    }
