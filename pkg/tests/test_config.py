import json

import pytest

from conftest import INPUTS

from hoptrace.config import RunConfig, interpolate
from hoptrace.errors import ConfigError
from hoptrace.filtering import SelectionMode
from hoptrace.model import Dataset


def test_toy_config_resolves_paths_next_to_the_file():
    config = RunConfig.from_yaml(INPUTS / "toy_config.yaml")
    assert config.mock
    assert config.paths.questions == INPUTS / "toy_questions.jsonl"
    assert config.paths.corpus == INPUTS / "toy_corpus.jsonl"
    assert config.paths.eval_dataset_kind is Dataset.CUSTOM
    assert config.mcts.children_a2 == 3
    assert config.filter.mode is SelectionMode.SP_AV_LJ
    assert config.workers == 4
    config.require("questions", "corpus", "eval_dataset")


def test_interpolation(monkeypatch):
    monkeypatch.setenv("HOPTRACE_TEST_HOST", "gpu-01")
    monkeypatch.delenv("HOPTRACE_TEST_UNSET", raising=False)
    tree = {"url": "http://${HOPTRACE_TEST_HOST}:8000/v1", "items": ["${HOPTRACE_TEST_UNSET:-fallback}", 3]}
    assert interpolate(tree) == {"url": "http://gpu-01:8000/v1", "items": ["fallback", 3]}
    assert interpolate("${HOPTRACE_TEST_UNSET:-}") == ""
    with pytest.raises(ConfigError):
        interpolate("${HOPTRACE_TEST_UNSET}")


@pytest.mark.parametrize("mapping", [
    {"mcts": {"rollouts": 0}},
    {"mcts": {"rolouts": 4}},
    {"generator": {"endpoint": "http://localhost"}},
    {"retriever": {"kind": "elastic"}},
    {"filter": {"mode": "SP_LJ"}},
    {"filter": {"w_redundant": -1}},
    {"eval": {"limit": 0}},
    {"paths": {"eval_dataset_kind": "triviaqa"}},
    {"parallelism": {"workers": 0}},
    {"generatr": {}},
    {"paths": ["questions.jsonl"]},
])
def test_invalid_settings_are_config_errors(mapping):
    with pytest.raises(ConfigError):
        RunConfig.from_mapping(mapping)


def test_unreadable_files_are_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_yaml(tmp_path / "missing.yaml")
    broken = tmp_path / "broken.yaml"
    broken.write_text("mcts: [unclosed\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        RunConfig.from_yaml(broken)
    scalar = tmp_path / "scalar.yaml"
    scalar.write_text("42\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        RunConfig.from_yaml(scalar)


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("", encoding="utf-8")
    config = RunConfig.from_yaml(path)
    assert config == RunConfig.from_mapping({}, base_dir=tmp_path)
    assert config.paths.output_dir == tmp_path / "runs" / "default"


def test_overrides(tmp_path):
    config = RunConfig.from_mapping({}).with_overrides(seed=9, mode="sp+av", limit=5, mock=True,
                                                       output_dir=tmp_path)
    assert (config.seed, config.filter.mode, config.eval.limit, config.mock) == (9, SelectionMode.SP_AV, 5, True)
    assert config.paths.output_dir == tmp_path
    with pytest.raises(ConfigError):
        config.with_overrides(mode="best")
    with pytest.raises(ConfigError):
        config.with_overrides(limit=0)


def test_agent_backend_defaults_to_the_generator():
    config = RunConfig.from_mapping({"generator": {"endpoint_url": "http://gen", "model_name": "g",
                                                   "max_concurrent_requests": 16}})
    assert config.agent_backend == config.generator
    config = RunConfig.from_mapping({
        "generator": {"endpoint_url": "http://gen", "model_name": "g"},
        "agent": {"endpoint_url": "http://agent", "model_name": "a", "max_concurrent_requests": 2},
    })
    assert config.agent_backend.model_name == "a"
    assert config.max_in_flight == 2


def test_snapshot_carries_key_names_only(monkeypatch):
    monkeypatch.setenv("HOPTRACE_GENERATOR_API_KEY", "sk-generator-secret")
    monkeypatch.setenv("HOPTRACE_JUDGE_API_KEY", "sk-judge-secret")
    config = RunConfig.from_yaml(INPUTS / "toy_config.yaml")
    text = json.dumps(config.snapshot())
    assert "sk-generator-secret" not in text and "sk-judge-secret" not in text
    assert config.snapshot()["generator"]["api_key_env_var"] == "HOPTRACE_GENERATOR_API_KEY"


def test_require_names_the_missing_input(tmp_path):
    config = RunConfig.from_mapping({"paths": {"corpus": "nowhere.jsonl"}}, base_dir=tmp_path)
    with pytest.raises(ConfigError, match="eval_dataset"):
        config.require("eval_dataset")
    with pytest.raises(ConfigError, match="nowhere"):
        config.require("corpus")
