from __future__ import annotations

import json
import logging
import math
import os
import threading
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt

from corpus import Passage
from errors import (
    CorruptFile,
    DimMismatch,
    EmptyText,
    InvalidConfig,
    ProtocolError,
    TransportError,
    VersionMismatch,
    ZeroVector,
)
from hashing import FNV64_OFFSET_BASIS, fnv1a_64, text_hash
from sparse_index import ScoredHit, passage_id_tie_rank, rank_hits, tokenize

logger = logging.getLogger(__name__)

Embedding = npt.NDArray[np.float64]

EMBEDDER_BACKENDS = ("http", "mock_hashed_bow", "gemini")
VECTOR_FORMAT_VERSION = 1
API_KEY_ENV = "DECOR_API_KEY"
GEMINI_API_KEY_ENV = "GEMINI_API_KEY"

RETRY_ATTEMPTS = 3
RETRY_INITIAL_BACKOFF_SEC = 0.5

# Seeds for the three mock-encoder hash families (slot, sign, second slot).
MOCK_SEED_SLOT = FNV64_OFFSET_BASIS ^ 0x9E3779B97F4A7C15
MOCK_SEED_SIGN = FNV64_OFFSET_BASIS ^ 0xC2B2AE3D27D4EB4F
MOCK_SEED_SLOT2 = FNV64_OFFSET_BASIS ^ 0x165667B19E3779F9

UNIT_NORM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class EmbedderConfig:
    backend: str = "mock_hashed_bow"
    endpoint_url: str = ""
    model_name: str = ""
    dim: int = 256
    batch_size: int = 32
    max_concurrent: int = 4
    query_prefix: str = ""
    passage_prefix: str = ""
    timeout_sec: float = 60.0

    def __post_init__(self) -> None:
        if self.backend not in EMBEDDER_BACKENDS:
            known = ", ".join(EMBEDDER_BACKENDS)
            raise InvalidConfig(f"Unknown embedder backend '{self.backend}'. Known backends: [{known}]")
        if self.backend == "http" and not (self.endpoint_url and self.model_name):
            raise InvalidConfig("embedder backend 'http' requires endpoint_url and model_name")
        if self.backend == "gemini" and not self.model_name:
            raise InvalidConfig("embedder backend 'gemini' requires model_name")
        if self.backend == "mock_hashed_bow" and self.dim < 2:
            raise InvalidConfig(f"mock_hashed_bow requires dim >= 2, got {self.dim}")
        if self.batch_size < 1 or self.max_concurrent < 1:
            raise InvalidConfig("embedder batch_size and max_concurrent must be >= 1")

    @property
    def cache_model(self) -> str:
        if self.backend == "mock_hashed_bow":
            return f"mock_hashed_bow/{self.dim}"
        return self.model_name


# ----------------------------------------------------------------------
# Vector math
# ----------------------------------------------------------------------
@lru_cache(maxsize=1 << 18)
def _term_slots(term: str, dim: int) -> tuple[int, float, int]:
    data = term.encode("utf-8")
    slot = fnv1a_64(data, MOCK_SEED_SLOT) % dim
    sign = 1.0 if fnv1a_64(data, MOCK_SEED_SIGN) & 1 else -1.0
    slot2 = fnv1a_64(data, MOCK_SEED_SLOT2) % dim
    return slot, sign, slot2


def mock_hashed_bow(text: str, dim: int) -> Embedding:
    """Signed feature-hashed bag of words, L2-normalized; no tokens gives e_0."""
    if dim < 2:
        raise InvalidConfig(f"mock_hashed_bow requires dim >= 2, got {dim}")
    vector = np.zeros(dim, dtype=np.float64)
    for term in tokenize(text):
        slot, sign, slot2 = _term_slots(term, dim)
        vector[slot] += 1.0
        vector[slot2] += sign
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        vector[0] = 1.0
        return vector
    return vector / norm


def _as_vector(value: Any) -> Embedding:
    return np.asarray(value, dtype=np.float64).reshape(-1)


def cosine(a: Embedding, b: Embedding) -> float:
    a, b = _as_vector(a), _as_vector(b)
    if a.shape != b.shape:
        raise DimMismatch(f"cosine of vectors with dims {a.size} and {b.size}")
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVector("cosine is undefined for an all-zero vector")
    value = float(np.dot(a, b)) / (norm_a * norm_b)
    return max(-1.0, min(1.0, value))


# ----------------------------------------------------------------------
# Cache
# ----------------------------------------------------------------------
class EmbeddingCache:
    """(model, FNV-1a of text) -> vector, persisted as JSON-lines.

    Reads are lock-free on a dict snapshot; appends go through one lock.
    """

    def __init__(self, path: str | Path | None = None) -> None:
        self._path = Path(path) if path is not None else None
        self._entries: dict[tuple[str, str], Embedding] = {}
        self._lock = threading.Lock()
        if self._path is not None and self._path.exists():
            self._load()

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, model: str, text: str) -> Embedding | None:
        vector = self._entries.get((model, text_hash(text)))
        return None if vector is None else vector.copy()

    def put_many(self, model: str, items: Sequence[tuple[str, Embedding]]) -> None:
        lines: list[str] = []
        with self._lock:
            for text, vector in items:
                key = (model, text_hash(text))
                if key in self._entries:
                    continue
                stored = np.array(vector, dtype=np.float64)
                self._entries[key] = stored
                record = {"model": model, "hash": key[1], "dim": int(stored.size), "values": stored.tolist()}
                lines.append(json.dumps(record))
            if lines and self._path is not None:
                self._path.parent.mkdir(parents=True, exist_ok=True)
                with self._path.open("a", encoding="utf-8") as fh:
                    fh.write("\n".join(lines) + "\n")

    def _load(self) -> None:
        assert self._path is not None
        with self._path.open(encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    values = np.asarray(record["values"], dtype=np.float64)
                    if values.size != int(record["dim"]):
                        raise ValueError("dim disagrees with values")
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    # A torn trailing line from an interrupted append is skipped, not fatal.
                    logger.warning("Skipping unreadable embedding cache line %s:%d", self._path, line_no)
                    continue
                self._entries[(record["model"], record["hash"])] = values


# ----------------------------------------------------------------------
# Backends
# ----------------------------------------------------------------------
class _MockBackend:
    def __init__(self, config: EmbedderConfig) -> None:
        self._dim = config.dim

    def embed_batch(self, texts: Sequence[str]) -> list[Embedding]:
        return [mock_hashed_bow(text, self._dim) for text in texts]


class _OpenAIBackend:
    """OpenAI-compatible ``POST {endpoint_url}/v1/embeddings``."""

    def __init__(self, config: EmbedderConfig, client: Any | None = None) -> None:
        self._config = config
        if client is None:
            from openai import OpenAI

            client = OpenAI(
                base_url=config.endpoint_url.rstrip("/") + "/v1",
                api_key=os.getenv(API_KEY_ENV) or "EMPTY",
                timeout=config.timeout_sec,
                max_retries=0,
            )
        self._client = client

    def embed_batch(self, texts: Sequence[str]) -> list[Embedding]:
        import openai

        try:
            response = self._client.embeddings.create(model=self._config.model_name, input=list(texts))
        except openai.APIError as exc:
            raise TransportError(f"embeddings request failed: {exc}") from exc

        data = getattr(response, "data", None)
        if not isinstance(data, list) or len(data) != len(texts):
            got = len(data) if isinstance(data, list) else "no"
            raise ProtocolError(f"embeddings response carried {got} vectors for {len(texts)} inputs")

        vectors: list[Embedding | None] = [None] * len(texts)
        for item in data:
            index = getattr(item, "index", None)
            values = getattr(item, "embedding", None)
            if not isinstance(index, int) or not 0 <= index < len(texts) or vectors[index] is not None:
                raise ProtocolError(f"embeddings response has invalid or duplicate index {index!r}")
            if not values:
                raise ProtocolError(f"embeddings response item {index} has no vector")
            vectors[index] = _as_vector(values)
        return [v for v in vectors if v is not None]


class _GeminiBackend:
    def __init__(self, config: EmbedderConfig, client: Any | None = None) -> None:
        self._config = config
        if client is None:
            from google import genai

            client = genai.Client(api_key=os.getenv(GEMINI_API_KEY_ENV))
        self._client = client

    def embed_batch(self, texts: Sequence[str]) -> list[Embedding]:
        from google.genai import errors as genai_errors

        try:
            response = self._client.models.embed_content(model=self._config.model_name, contents=list(texts))
        except genai_errors.APIError as exc:
            raise TransportError(f"gemini embed_content failed: {exc}") from exc

        embeddings = getattr(response, "embeddings", None) or []
        if len(embeddings) != len(texts):
            raise ProtocolError(f"gemini returned {len(embeddings)} vectors for {len(texts)} inputs")
        vectors = []
        for i, item in enumerate(embeddings):
            values = getattr(item, "values", None)
            if not values:
                raise ProtocolError(f"gemini embedding {i} has no values")
            vectors.append(_as_vector(values))
        return vectors


class Embedder:
    """Encoder E(.) over a configured backend, with cache and bounded retries."""

    def __init__(
        self,
        config: EmbedderConfig,
        *,
        cache: EmbeddingCache | None = None,
        client: Any | None = None,
        sleep_fn: Callable[[float], None] = time.sleep,
    ) -> None:
        self.config = config
        self.cache = cache
        self._sleep = sleep_fn
        if config.backend == "mock_hashed_bow":
            self._backend: Any = _MockBackend(config)
        elif config.backend == "http":
            self._backend = _OpenAIBackend(config, client)
        else:
            self._backend = _GeminiBackend(config, client)

    def embed_query(self, text: str) -> Embedding:
        return self.embed_texts([self.config.query_prefix + text])[0]

    def embed_passages(self, texts: Sequence[str]) -> list[Embedding]:
        prefix = self.config.passage_prefix
        return self.embed_texts([prefix + text for text in texts])

    def embed_texts(self, texts: Sequence[str]) -> list[Embedding]:
        if not texts:
            raise EmptyText("embed_texts requires at least one text")
        for i, text in enumerate(texts):
            if not text.strip():
                raise EmptyText(f"text {i} is empty after trimming")

        model = self.config.cache_model
        results: list[Embedding | None] = [None] * len(texts)
        missing: dict[str, list[int]] = {}
        for i, text in enumerate(texts):
            cached = self.cache.get(model, text) if self.cache is not None else None
            if cached is not None:
                results[i] = cached
            else:
                missing.setdefault(text, []).append(i)

        if missing:
            pending = list(missing)
            size = self.config.batch_size
            batches = [pending[i : i + size] for i in range(0, len(pending), size)]
            if len(batches) == 1 or self.config.max_concurrent == 1 or isinstance(self._backend, _MockBackend):
                embedded = [self._embed_with_retry(batch) for batch in batches]
            else:
                workers = min(self.config.max_concurrent, len(batches))
                with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="embed") as pool:
                    embedded = list(pool.map(self._embed_with_retry, batches))

            fresh: list[tuple[str, Embedding]] = []
            for batch, vectors in zip(batches, embedded):
                for text, vector in zip(batch, vectors):
                    fresh.append((text, vector))
                    for i in missing[text]:
                        results[i] = vector.copy()
            if self.cache is not None:
                self.cache.put_many(model, fresh)

        vectors = [v for v in results if v is not None]
        dims = {v.size for v in vectors}
        if len(dims) != 1:
            raise ProtocolError(f"encoder returned vectors of differing dims {sorted(dims)}")
        for v in vectors:
            if not np.all(np.isfinite(v)):
                raise ProtocolError("encoder returned a non-finite vector")
        return vectors

    def _embed_with_retry(self, batch: list[str]) -> list[Embedding]:
        backoff_sec = RETRY_INITIAL_BACKOFF_SEC
        for attempt in range(1, RETRY_ATTEMPTS + 1):
            try:
                vectors = self._backend.embed_batch(batch)
            except TransportError as exc:
                if attempt == RETRY_ATTEMPTS:
                    raise TransportError(f"{exc} (gave up after {RETRY_ATTEMPTS} attempts)") from exc
                logger.warning("Embedding attempt %d/%d failed: %s", attempt, RETRY_ATTEMPTS, exc)
                self._sleep(backoff_sec)
                backoff_sec *= 2.0
                continue
            if len(vectors) != len(batch):
                raise ProtocolError(f"encoder returned {len(vectors)} vectors for {len(batch)} inputs")
            return vectors
        raise AssertionError("unreachable")


def embed_texts(config: EmbedderConfig, texts: Sequence[str], cache: EmbeddingCache | None = None) -> list[Embedding]:
    return Embedder(config, cache=cache).embed_texts(texts)


# ----------------------------------------------------------------------
# Vector index
# ----------------------------------------------------------------------
class VectorIndex:
    """Unit-normalized passage embeddings, one row per passage; exact search."""

    def __init__(self, matrix: npt.NDArray[np.float64], passage_ids: Sequence[str], model: str = "") -> None:
        if matrix.ndim != 2 or matrix.shape[0] != len(passage_ids):
            raise DimMismatch(f"matrix shape {matrix.shape} does not match {len(passage_ids)} passage ids")
        if len(set(passage_ids)) != len(passage_ids):
            raise InvalidConfig("vector index passage ids must be unique")
        norms = np.linalg.norm(matrix, axis=1)
        if norms.size and not np.all(np.abs(norms - 1.0) <= UNIT_NORM_TOLERANCE):
            raise InvalidConfig("vector index rows must be unit-normalized")
        self.matrix = matrix
        self.passage_ids = list(passage_ids)
        self.model = model
        self._tie_rank = passage_id_tie_rank(self.passage_ids)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return len(self.passage_ids)

    def search(self, e: Embedding, k: int) -> list[ScoredHit]:
        if k < 1:
            raise InvalidConfig(f"k must be >= 1, got {k}")
        query = _as_vector(e)
        if query.size != self.dim:
            raise DimMismatch(f"query dim {query.size} does not match index dim {self.dim}")
        norm = float(np.linalg.norm(query))
        if norm == 0.0 or not math.isfinite(norm):
            raise ZeroVector("dense_search query vector is all-zero or non-finite")
        scores = self.matrix @ (query / norm)
        return rank_hits(self.passage_ids, scores, self._tie_rank, np.arange(len(self.passage_ids)), k)


def build_vector_index(passages: Sequence[Passage], embedder: Embedder) -> VectorIndex:
    if not passages:
        raise InvalidConfig("build_vector_index requires at least one passage")
    vectors = embedder.embed_passages([p.text for p in passages])
    matrix = np.vstack(vectors).astype(np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    zero_rows = np.flatnonzero(norms == 0.0)
    if zero_rows.size:
        raise ZeroVector(f"encoder produced an all-zero vector for passage {passages[int(zero_rows[0])].passage_id}")
    matrix = matrix / norms[:, None]
    logger.info("Built vector index: %d passages, dim=%d", matrix.shape[0], matrix.shape[1])
    return VectorIndex(matrix, [p.passage_id for p in passages], model=embedder.config.cache_model)


def dense_search(index: VectorIndex, e: Embedding, k: int) -> list[ScoredHit]:
    return index.search(e, k)


def save_vector_index(index: VectorIndex, path: str | Path) -> None:
    """``<path>.npy`` holds the matrix; ``<path>.json`` the header and row -> passage_id map."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path.with_suffix(".npy"), index.matrix, allow_pickle=False)
    header = {
        "format_version": VECTOR_FORMAT_VERSION,
        "dim": index.dim,
        "model": index.model,
        "passage_ids": index.passage_ids,
    }
    path.with_suffix(".json").write_text(json.dumps(header, ensure_ascii=False) + "\n", encoding="utf-8")


def load_vector_index(path: str | Path) -> VectorIndex:
    path = Path(path)
    try:
        header = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"{path.with_suffix('.json')}: unreadable vector index header") from exc
    if header.get("format_version") != VECTOR_FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: vector index format_version {header.get('format_version')!r}, expected {VECTOR_FORMAT_VERSION}"
        )
    try:
        matrix = np.load(path.with_suffix(".npy"), allow_pickle=False)
    except ValueError as exc:
        raise CorruptFile(f"{path.with_suffix('.npy')}: unreadable matrix") from exc
    passage_ids = header.get("passage_ids", [])
    if matrix.ndim != 2 or matrix.shape != (len(passage_ids), header.get("dim")):
        raise CorruptFile(f"{path}: matrix shape {matrix.shape} disagrees with header")
    return VectorIndex(matrix.astype(np.float64), passage_ids, model=header.get("model", ""))
