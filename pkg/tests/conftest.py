from __future__ import annotations

from pathlib import Path

import pytest

from corpus import Passage
from pipeline import PipelineConfig
from planted import record_transcript

PROJECT_ROOT = Path(__file__).resolve().parents[1]
TOY_CONFIG = PROJECT_ROOT / "config" / "decor.toy.json"


@pytest.fixture(scope="session")
def planted_transcript(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """Transcript covering every chat exchange the planted-corpus tests replay."""
    path = tmp_path_factory.mktemp("planted") / "transcript.jsonl"
    record_transcript(
        path,
        [
            PipelineConfig(method="decor"),
            PipelineConfig(method="decor", no_decomposition=True),
            PipelineConfig(method="decor", document_wise_compression=True),
        ],
    )
    return path


@pytest.fixture
def small_passages() -> list[Passage]:
    texts = [
        "the cat sat on the mat",
        "dogs chase cats in the park",
        "a quiet harbor at dawn",
        "cat food prices rose sharply",
        "the mat was red",
    ]
    return [Passage(passage_id=f"p{i}", doc_id=f"d{i}", text=text, position=0) for i, text in enumerate(texts)]
