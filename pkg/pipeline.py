from __future__ import annotations

import asyncio
import json
import logging
import threading
import time
from collections.abc import Iterator, Mapping, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from corpus import Passage, QueryRecord
from embedding import Embedder, EmbedderConfig, Embedding, VectorIndex
from errors import DecorError, InvalidConfig, QueryFailed
from llm import (
    COMPRESSION_MODES,
    HYDE_TEMPLATE,
    QUERY2DOC_TEMPLATE,
    ChatClient,
    ChatClientConfig,
    CompressedDoc,
    SubQuery,
    compress_documents,
    decompose_query,
    generate_passage,
)
from sparse_index import Bm25Index, Bm25Params, ScoredHit

logger = logging.getLogger(__name__)

METHODS = ("decor", "plain", "hyde", "query2doc")
ABLATIONS = (
    "no_decomposition",
    "no_compression",
    "document_wise_compression",
    "concat_embedding",
    "no_expansion",
)


@dataclass(frozen=True)
class PipelineConfig:
    method: str = "decor"
    n: int = 5
    k: int = 10
    no_decomposition: bool = False
    no_compression: bool = False
    document_wise_compression: bool = False
    concat_embedding: bool = False
    no_expansion: bool = False
    max_concurrent_queries: int = 4
    record_timings: bool = True
    run_tag: str = ""
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    llm: ChatClientConfig = field(default_factory=ChatClientConfig)
    bm25: Bm25Params = field(default_factory=Bm25Params)

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            known = ", ".join(METHODS)
            raise InvalidConfig(f"Unknown method '{self.method}'. Known methods: [{known}]")
        if self.n < 1 or self.k < 1:
            raise InvalidConfig(f"n and k must be >= 1, got n={self.n}, k={self.k}")
        if self.max_concurrent_queries < 1:
            raise InvalidConfig("max_concurrent_queries must be >= 1")
        if self.ablations and self.method != "decor":
            raise InvalidConfig(f"ablation flags {list(self.ablations)} are only valid with method=decor")

    @property
    def ablations(self) -> tuple[str, ...]:
        return tuple(name for name in ABLATIONS if getattr(self, name))

    @property
    def compression_mode(self) -> str:
        return COMPRESSION_MODES[1] if self.document_wise_compression else COMPRESSION_MODES[0]

    @property
    def expands(self) -> bool:
        return self.method == "decor" and not self.no_expansion

    @property
    def effective_run_tag(self) -> str:
        # plain and decor+no_expansion rank identically; only this default tag tells their run files apart
        if self.run_tag:
            return self.run_tag
        return "-".join((self.method, *self.ablations))


class RetrievalIndexes:
    """Shared read-only state for a batch: passages, both indexes, encoder, chat client.

    Counts BM25 and dense searches so flag semantics can be checked structurally.
    """

    def __init__(
        self,
        passages: Sequence[Passage],
        bm25: Bm25Index,
        vectors: VectorIndex,
        embedder: Embedder,
        chat: ChatClient,
    ) -> None:
        ids = [p.passage_id for p in passages]
        if set(ids) != set(bm25.passage_ids) or set(ids) != set(vectors.passage_ids):
            raise InvalidConfig("BM25 and vector indexes must be built over the same passage set")
        self.passages = {p.passage_id: p for p in passages}
        self.bm25 = bm25
        self.vectors = vectors
        self.embedder = embedder
        self.chat = chat
        self._lock = threading.Lock()
        self.bm25_calls = 0
        self.dense_calls = 0

    def sparse_search(self, query: str, n: int) -> list[ScoredHit]:
        with self._lock:
            self.bm25_calls += 1
        return self.bm25.search(query, n)

    def dense_search(self, e: Embedding, k: int) -> list[ScoredHit]:
        with self._lock:
            self.dense_calls += 1
        return self.vectors.search(e, k)


@dataclass
class ExpandedQuery:
    query_id: str
    original_text: str
    sub_queries: list[SubQuery]
    compressed: list[CompressedDoc | None]
    expansion_embedding: Embedding
    candidates: list[list[ScoredHit]] = field(default_factory=list)

    @property
    def skipped_ordinals(self) -> list[int]:
        return [sq.ordinal for sq, comp in zip(self.sub_queries, self.compressed) if comp is None]


@dataclass(frozen=True)
class QueryOutcome:
    query_id: str
    hits: list[ScoredHit]
    trace: dict[str, Any]


@dataclass
class RunResult:
    run_tag: str
    results: dict[str, list[ScoredHit]]
    traces: list[dict[str, Any]]
    failures: list[QueryFailed] = field(default_factory=list)


class _StageTimer:
    def __init__(self, query_id: str) -> None:
        self.query_id = query_id
        self.timing_ms: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        started = time.perf_counter()
        try:
            yield
        except DecorError as exc:
            if isinstance(exc, QueryFailed):
                raise
            raise QueryFailed(self.query_id, name, exc) from exc
        finally:
            elapsed = (time.perf_counter() - started) * 1000.0
            self.timing_ms[name] = round(self.timing_ms.get(name, 0.0) + elapsed, 3)


def expansion_embedding(query_vector: Embedding, pair_vectors: Sequence[Embedding]) -> Embedding:
    """Unweighted mean of E(q) and every E([q_sub; d_comp])."""
    stacked = np.vstack([query_vector, *pair_vectors]).astype(np.float64)
    return stacked.sum(axis=0) / stacked.shape[0]


def _pair_text(sub_query: SubQuery, compressed: CompressedDoc) -> str:
    return f"{sub_query.text} {compressed.text}"


def expand_decor(query: QueryRecord, cfg: PipelineConfig, indexes: RetrievalIndexes, timer: _StageTimer | None = None) -> ExpandedQuery:
    """Decompose, retrieve candidates per sub-query, compress, and average embeddings."""
    if cfg.method != "decor":
        raise InvalidConfig(f"expand_decor requires method=decor, got {cfg.method}")
    timer = timer or _StageTimer(query.query_id)

    with timer.stage("decompose"):
        if cfg.no_decomposition:
            sub_queries = [SubQuery(text=query.text, ordinal=1)]
        else:
            sub_queries = decompose_query(indexes.chat, query.text)

    with timer.stage("candidates"):
        candidates = [indexes.sparse_search(sq.text, cfg.n) for sq in sub_queries]

    compressed: list[CompressedDoc | None] = []
    with timer.stage("compress"):
        for sub_query, hits in zip(sub_queries, candidates):
            if not hits:
                logger.warning(
                    "Query %s: sub-query %d has no BM25 candidates and is skipped",
                    query.query_id,
                    sub_query.ordinal,
                )
                compressed.append(None)
                continue
            docs = [indexes.passages[hit.passage_id] for hit in hits]
            if cfg.no_compression:
                compressed.append(
                    CompressedDoc(
                        text=" ".join(doc.text for doc in docs),
                        sub_query_ordinal=sub_query.ordinal,
                        source_passage_ids=tuple(doc.passage_id for doc in docs),
                    )
                )
            else:
                compressed.append(compress_documents(indexes.chat, sub_query, docs, cfg.compression_mode))

    with timer.stage("embed"):
        pairs = [_pair_text(sq, comp) for sq, comp in zip(sub_queries, compressed) if comp is not None]
        if cfg.concat_embedding:
            e_exp = indexes.embedder.embed_query(" ".join([query.text, *pairs]))
        else:
            prefix = indexes.embedder.config.query_prefix
            vectors = indexes.embedder.embed_texts([prefix + text for text in (query.text, *pairs)])
            e_exp = expansion_embedding(vectors[0], vectors[1:])

    return ExpandedQuery(
        query_id=query.query_id,
        original_text=query.text,
        sub_queries=sub_queries,
        compressed=compressed,
        expansion_embedding=e_exp,
        candidates=candidates,
    )


def execute_query(query: QueryRecord, cfg: PipelineConfig, indexes: RetrievalIndexes) -> QueryOutcome:
    timer = _StageTimer(query.query_id)
    trace: dict[str, Any] = {"query_id": query.query_id, "method": cfg.method}

    if cfg.expands:
        expanded = expand_decor(query, cfg, indexes, timer)
        e = expanded.expansion_embedding
        trace.update(
            {
                "m": len(expanded.sub_queries),
                "sub_queries": [sq.text for sq in expanded.sub_queries],
                "candidates": [[hit.passage_id for hit in hits] for hits in expanded.candidates],
                "compressed": [comp.text if comp is not None else None for comp in expanded.compressed],
                "fallback_compressions": [
                    comp.sub_query_ordinal for comp in expanded.compressed if comp is not None and comp.fallback
                ],
                "skipped_sub_queries": expanded.skipped_ordinals,
            }
        )
    elif cfg.method in ("hyde", "query2doc"):
        with timer.stage("generate"):
            template = HYDE_TEMPLATE if cfg.method == "hyde" else QUERY2DOC_TEMPLATE
            passage = generate_passage(indexes.chat, template, query.text)
        trace["generated_passage"] = passage
        with timer.stage("embed"):
            if not passage:
                logger.warning("Query %s: empty generated passage; using the query embedding alone", query.query_id)
                e = indexes.embedder.embed_query(query.text)
            elif cfg.method == "hyde":
                prefix = indexes.embedder.config.query_prefix
                vectors = indexes.embedder.embed_texts([prefix + query.text, prefix + passage])
                e = (vectors[0] + vectors[1]) / 2.0
            else:
                e = indexes.embedder.embed_query(f"{query.text} {passage}")
    else:
        with timer.stage("embed"):
            e = indexes.embedder.embed_query(query.text)

    with timer.stage("search"):
        hits = indexes.dense_search(e, cfg.k)

    if cfg.record_timings:
        trace["timing_ms"] = timer.timing_ms
    return QueryOutcome(query_id=query.query_id, hits=hits, trace=trace)


def run_query(query: QueryRecord, cfg: PipelineConfig, indexes: RetrievalIndexes) -> list[ScoredHit]:
    return execute_query(query, cfg, indexes).hits


async def run_batch(queries: Sequence[QueryRecord], cfg: PipelineConfig, indexes: RetrievalIndexes) -> RunResult:
    """Run every query, at most ``max_concurrent_queries`` at once; output keeps input order."""
    if not queries:
        raise InvalidConfig("run_batch requires at least one query")

    semaphore = asyncio.Semaphore(cfg.max_concurrent_queries)

    async def _run_one(query: QueryRecord) -> QueryOutcome | QueryFailed:
        async with semaphore:
            try:
                return await asyncio.to_thread(execute_query, query, cfg, indexes)
            except QueryFailed as exc:
                logger.warning("%s", exc)
                return exc
            except DecorError as exc:
                failure = QueryFailed(query.query_id, "unknown", exc)
                logger.warning("%s", failure)
                return failure

    tasks = [asyncio.create_task(_run_one(q), name=f"decor_query:{q.query_id}") for q in queries]
    outcomes = await asyncio.gather(*tasks)

    result = RunResult(run_tag=cfg.effective_run_tag, results={}, traces=[])
    for outcome in outcomes:
        if isinstance(outcome, QueryFailed):
            result.failures.append(outcome)
            result.traces.append(
                {
                    "query_id": outcome.query_id,
                    "error": {"stage": outcome.stage, "type": type(outcome.cause).__name__, "message": str(outcome.cause)},
                }
            )
        else:
            result.results[outcome.query_id] = outcome.hits
            result.traces.append(outcome.trace)
    return result


def format_run_lines(results: Mapping[str, Sequence[ScoredHit]], run_tag: str) -> list[str]:
    return [
        f"{query_id} Q0 {hit.passage_id} {hit.rank} {hit.score:.6f} {run_tag}"
        for query_id, hits in results.items()
        for hit in hits
    ]


def write_run_file(path: str | Path, result: RunResult) -> None:
    lines = format_run_lines(result.results, result.run_tag)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def write_trace(path: str | Path, result: RunResult, effective_config: Mapping[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"effective_config": effective_config}, ensure_ascii=False, sort_keys=True) + "\n")
        for record in result.traces:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
