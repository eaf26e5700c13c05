from __future__ import annotations

import dataclasses
import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from corpus import CORPUS_FORMATS, DEFAULT_CHUNK_SIZE, DEFAULT_OVERLAP, MATCHERS
from embedding import EmbedderConfig
from errors import ConfigError, DecorError
from evaluation import DEFAULT_HITS_KS, DEFAULT_RANK_KS, HITS_VARIANTS
from llm import ChatClientConfig
from pipeline import ABLATIONS, PipelineConfig
from sparse_index import Bm25Params

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")
_SECTIONS = ("log_level", "paths", "corpus", "bm25", "embedder", "llm", "pipeline", "eval")
_PIPELINE_NESTED = ("embedder", "llm", "bm25")


@dataclass(frozen=True)
class PathsConfig:
    corpus: str = ""
    queries: str = ""
    workdir: str = "work"


@dataclass(frozen=True)
class CorpusOptions:
    format: str = "multihop_rag"
    chunk_size: int = DEFAULT_CHUNK_SIZE
    overlap: int = DEFAULT_OVERLAP
    matcher: str = "normalized_substring"
    question_types: tuple[str, ...] = ()
    sample_size: int | None = None
    sample_seed: int = 0

    def __post_init__(self) -> None:
        if self.format not in CORPUS_FORMATS:
            raise ConfigError("corpus.format", f"Unknown format '{self.format}'. Known formats: {list(CORPUS_FORMATS)}")
        if self.matcher not in MATCHERS:
            raise ConfigError("corpus.matcher", f"Unknown matcher '{self.matcher}'. Known matchers: {list(MATCHERS)}")
        if self.chunk_size < 0:
            raise ConfigError("corpus.chunk_size", f"must be >= 0, got {self.chunk_size}")
        if self.overlap < 0 or (self.chunk_size > 0 and self.overlap >= self.chunk_size):
            raise ConfigError("corpus.overlap", f"must be in [0, chunk_size), got {self.overlap}")
        if self.sample_size is not None and self.sample_size < 1:
            raise ConfigError("corpus.sample_size", f"must be >= 1 or null, got {self.sample_size}")


@dataclass(frozen=True)
class EvalOptions:
    hits_ks: tuple[int, ...] = DEFAULT_HITS_KS
    rank_ks: tuple[int, ...] = DEFAULT_RANK_KS
    hits_variant: str = "micro"
    per_query: bool = False

    def __post_init__(self) -> None:
        if self.hits_variant not in HITS_VARIANTS:
            raise ConfigError("eval.hits_variant", f"Unknown variant '{self.hits_variant}'. Known variants: {list(HITS_VARIANTS)}")
        for name in ("hits_ks", "rank_ks"):
            values = getattr(self, name)
            if not values or any(k < 1 for k in values):
                raise ConfigError(f"eval.{name}", f"must be a non-empty list of integers >= 1, got {list(values)}")


@dataclass(frozen=True)
class AppConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    corpus: CorpusOptions = field(default_factory=CorpusOptions)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    log_level: str = "INFO"

    @property
    def bm25(self) -> Bm25Params:
        return self.pipeline.bm25

    @property
    def embedder(self) -> EmbedderConfig:
        return self.pipeline.embedder

    @property
    def llm(self) -> ChatClientConfig:
        return self.pipeline.llm

    @property
    def workdir(self) -> Path:
        return Path(self.paths.workdir)

    def to_dict(self) -> dict[str, Any]:
        pipeline = {
            f.name: getattr(self.pipeline, f.name)
            for f in dataclasses.fields(PipelineConfig)
            if f.name not in ABLATIONS and f.name not in _PIPELINE_NESTED
        }
        pipeline["ablations"] = list(self.pipeline.ablations)
        corpus = dataclasses.asdict(self.corpus)
        corpus["question_types"] = list(self.corpus.question_types)
        evaluation = dataclasses.asdict(self.eval)
        evaluation["hits_ks"] = list(self.eval.hits_ks)
        evaluation["rank_ks"] = list(self.eval.rank_ks)
        return {
            "log_level": self.log_level,
            "paths": dataclasses.asdict(self.paths),
            "corpus": corpus,
            "bm25": dataclasses.asdict(self.bm25),
            "embedder": dataclasses.asdict(self.embedder),
            "llm": dataclasses.asdict(self.llm),
            "pipeline": pipeline,
            "eval": evaluation,
        }


# ----------------------------------------------------------------------
# Parsing
# ----------------------------------------------------------------------
def _type_ok(value: Any, default: Any) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, tuple):
        return isinstance(value, (list, tuple))
    return True


def _section_kwargs(cls: type, raw: Any, key_path: str, *, skip: tuple[str, ...] = ()) -> dict[str, Any]:
    if raw is None:
        return {}
    if not isinstance(raw, Mapping):
        raise ConfigError(key_path, "must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{key_path}.{unknown[0]}", f"unknown key. Known keys: {sorted(fields)}")

    kwargs: dict[str, Any] = {}
    for name, value in raw.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if value is not None and default is not None and default is not dataclasses.MISSING and not _type_ok(value, default):
            raise ConfigError(f"{key_path}.{name}", f"expected {type(default).__name__}, got {type(value).__name__}")
        if isinstance(value, list):
            value = tuple(value)
        if isinstance(default, float) and isinstance(value, int):
            value = float(value)
        kwargs[name] = value
    return kwargs


def _build(cls: type, kwargs: dict[str, Any], key_path: str) -> Any:
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (DecorError, TypeError, ValueError) as exc:
        raise ConfigError(key_path, str(exc)) from exc


def _resolve_path(value: str, base_dir: Path) -> str:
    if not value:
        return value
    path = Path(value).expanduser()
    if not path.is_absolute():
        path = base_dir / path
    return str(path.resolve())


def config_from_dict(data: Mapping[str, Any], base_dir: str | Path = ".") -> AppConfig:
    """Build an AppConfig from parsed JSON; relative paths resolve against ``base_dir``."""
    if not isinstance(data, Mapping):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(unknown[0], f"unknown section. Known sections: {list(_SECTIONS)}")
    base = Path(base_dir)

    log_level = data.get("log_level", "INFO")
    if not isinstance(log_level, str) or log_level.upper() not in LOG_LEVELS:
        raise ConfigError("log_level", f"must be one of {list(LOG_LEVELS)}, got {log_level!r}")

    paths_kwargs = _section_kwargs(PathsConfig, data.get("paths"), "paths")
    paths_kwargs = {name: _resolve_path(value, base) for name, value in paths_kwargs.items()}
    paths = _build(PathsConfig, paths_kwargs, "paths")
    if not paths.workdir:
        raise ConfigError("paths.workdir", "must not be empty")
    paths = dataclasses.replace(paths, workdir=_resolve_path(paths.workdir, base))

    corpus = _build(CorpusOptions, _section_kwargs(CorpusOptions, data.get("corpus"), "corpus"), "corpus")
    bm25 = _build(Bm25Params, _section_kwargs(Bm25Params, data.get("bm25"), "bm25"), "bm25")
    embedder = _build(EmbedderConfig, _section_kwargs(EmbedderConfig, data.get("embedder"), "embedder"), "embedder")

    llm_kwargs = _section_kwargs(ChatClientConfig, data.get("llm"), "llm")
    if "transcript_path" in llm_kwargs:
        llm_kwargs["transcript_path"] = _resolve_path(llm_kwargs["transcript_path"], base)
    llm = _build(ChatClientConfig, llm_kwargs, "llm")

    raw_pipeline = dict(data.get("pipeline") or {})
    ablations = raw_pipeline.pop("ablations", [])
    if not isinstance(ablations, (list, tuple)):
        raise ConfigError("pipeline.ablations", "must be a list")
    for name in ablations:
        if name not in ABLATIONS:
            raise ConfigError("pipeline.ablations", f"Unknown ablation '{name}'. Known ablations: {list(ABLATIONS)}")
    pipeline_kwargs = _section_kwargs(PipelineConfig, raw_pipeline, "pipeline", skip=ABLATIONS + _PIPELINE_NESTED)
    pipeline_kwargs.update({name: True for name in ablations})
    pipeline = _build(
        PipelineConfig,
        {**pipeline_kwargs, "embedder": embedder, "llm": llm, "bm25": bm25},
        "pipeline",
    )

    evaluation = _build(EvalOptions, _section_kwargs(EvalOptions, data.get("eval"), "eval"), "eval")

    return AppConfig(paths=paths, corpus=corpus, pipeline=pipeline, eval=evaluation, log_level=log_level.upper())


def load_config(path: str | Path) -> AppConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}. See config/decor.toy.json for an example.")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"{path} is not valid JSON ({exc.msg} at line {exc.lineno})") from exc
    return config_from_dict(data, base_dir=path.resolve().parent)


def apply_overrides(config: AppConfig, overrides: Mapping[str, Any], base_dir: str | Path = ".") -> AppConfig:
    """Apply dotted-key overrides (``pipeline.n``, ``llm.backend``); ``None`` values are ignored.

    ``pipeline.ablations`` replaces the list. Relative override paths resolve against ``base_dir``.
    """
    data = config.to_dict()
    for key_path, value in overrides.items():
        if value is None:
            continue
        parts = key_path.split(".")
        target: Any = data
        for part in parts[:-1]:
            if not isinstance(target, dict) or part not in target:
                raise ConfigError(key_path, "unknown override key")
            target = target[part]
        if not isinstance(target, dict) or (len(parts) > 1 and parts[-1] not in target):
            raise ConfigError(key_path, "unknown override key")
        target[parts[-1]] = list(value) if isinstance(value, tuple) else value
    return config_from_dict(data, base_dir=base_dir)
