from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import pytest

from config import AppConfig, apply_overrides, config_from_dict, load_config
from errors import ConfigError

PROJECT_ROOT = Path(__file__).resolve().parents[1]
TOY_CONFIG = PROJECT_ROOT / "config" / "decor.toy.json"
MULTIHOP_CONFIG = PROJECT_ROOT / "config" / "decor.multihop_rag.json"


def _toy_data() -> dict[str, Any]:
    return json.loads(TOY_CONFIG.read_text(encoding="utf-8"))


def test_toy_config_loads_and_resolves_paths_against_its_directory() -> None:
    config = load_config(TOY_CONFIG)

    assert Path(config.paths.corpus) == PROJECT_ROOT / "data" / "toy" / "corpus.json"
    assert Path(config.paths.corpus).exists()
    assert config.workdir == PROJECT_ROOT / "work" / "toy"
    assert config.corpus.chunk_size == 24
    assert config.embedder.cache_model == "mock_hashed_bow/512"
    assert config.llm.backend == "heuristic"
    assert config.pipeline.method == "decor"
    assert config.pipeline.ablations == ()
    assert config.pipeline.record_timings is False
    assert config.eval.hits_ks == (10, 4)
    assert config.log_level == "WARNING"


def test_multihop_config_uses_http_backends() -> None:
    config = load_config(MULTIHOP_CONFIG)

    assert config.embedder.backend == "http"
    assert config.embedder.query_prefix == "query: "
    assert config.llm.backend == "http"
    assert not config.llm.endpoint_url.endswith("/v1")
    assert config.corpus.question_types


def test_missing_config_file_points_to_the_example(tmp_path: Path) -> None:
    with pytest.raises(FileNotFoundError, match="decor.toy.json"):
        load_config(tmp_path / "absent.json")


def test_invalid_json_is_config_error(tmp_path: Path) -> None:
    path = tmp_path / "broken.json"
    path.write_text("{", encoding="utf-8")

    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(path)


@pytest.mark.parametrize(
    ("section", "patch", "key_path"),
    [
        ("pipeline", {"n": 0}, "pipeline"),
        ("pipeline", {"n": "five"}, "pipeline.n"),
        ("pipeline", {"ablations": ["no_such_thing"]}, "pipeline.ablations"),
        ("pipeline", {"surprise": 1}, "pipeline.surprise"),
        ("corpus", {"overlap": 24}, "corpus.overlap"),
        ("corpus", {"format": "csv"}, "corpus.format"),
        ("bm25", {"b": 2.0}, "bm25"),
        ("embedder", {"backend": "word2vec"}, "embedder"),
        ("llm", {"backend": "scripted"}, "llm"),
        ("eval", {"hits_ks": []}, "eval.hits_ks"),
        ("eval", {"hits_variant": "weighted"}, "eval.hits_variant"),
    ],
)
def test_bad_values_name_their_key_path(section: str, patch: dict[str, Any], key_path: str) -> None:
    data = _toy_data()
    data[section] = {**data[section], **patch}

    with pytest.raises(ConfigError) as excinfo:
        config_from_dict(data, PROJECT_ROOT / "config")

    assert excinfo.value.key_path == key_path
    assert str(excinfo.value).startswith(f"{key_path}: ")


def test_unknown_section_and_log_level_are_rejected() -> None:
    data = _toy_data()
    data["metrics"] = {}
    with pytest.raises(ConfigError, match="Known sections"):
        config_from_dict(data)

    data = _toy_data()
    data["log_level"] = "LOUD"
    with pytest.raises(ConfigError) as excinfo:
        config_from_dict(data)
    assert excinfo.value.key_path == "log_level"


def test_ablations_only_combine_with_decor() -> None:
    data = _toy_data()
    data["pipeline"] = {**data["pipeline"], "method": "plain", "ablations": ["no_compression"]}

    with pytest.raises(ConfigError, match="only valid with method=decor"):
        config_from_dict(data)


def test_defaults_fill_missing_sections(tmp_path: Path) -> None:
    config = config_from_dict({}, tmp_path)

    assert config == AppConfig(paths=config.paths)
    assert config.workdir == (tmp_path / "work").resolve()
    assert config.pipeline.n == 5
    assert config.pipeline.k == 10


def test_overrides_replace_values_and_ignore_none() -> None:
    config = load_config(TOY_CONFIG)

    updated = apply_overrides(
        config,
        {
            "pipeline.n": 3,
            "pipeline.ablations": ["no_decomposition", "concat_embedding"],
            "llm.model_name": None,
            "eval.hits_variant": "macro",
        },
    )

    assert updated.pipeline.n == 3
    assert updated.pipeline.no_decomposition and updated.pipeline.concat_embedding
    assert updated.pipeline.effective_run_tag == "decor-no_decomposition-concat_embedding"
    assert updated.llm == config.llm
    assert updated.eval.hits_variant == "macro"
    assert updated.paths == config.paths


def test_override_paths_resolve_against_base_dir(tmp_path: Path) -> None:
    updated = apply_overrides(load_config(TOY_CONFIG), {"paths.workdir": "scratch"}, base_dir=tmp_path)

    assert updated.workdir == (tmp_path / "scratch").resolve()


def test_unknown_override_key_is_config_error() -> None:
    with pytest.raises(ConfigError) as excinfo:
        apply_overrides(load_config(TOY_CONFIG), {"pipeline.depth": 2})

    assert excinfo.value.key_path == "pipeline.depth"


def test_to_dict_reloads_to_the_same_config() -> None:
    config = load_config(TOY_CONFIG)

    data = config.to_dict()

    assert config_from_dict(json.loads(json.dumps(data))) == config
    assert data["pipeline"]["ablations"] == []
    assert "no_decomposition" not in data["pipeline"]
    assert data["embedder"]["dim"] == 512
