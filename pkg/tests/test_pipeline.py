from __future__ import annotations

import asyncio
import json
from pathlib import Path

import numpy as np
import pytest

from corpus import QueryRecord
from errors import InvalidConfig, QueryFailed, TranscriptMiss
from evaluation import hits_at_k
from llm import ChatClient, ChatClientConfig
from pipeline import (
    PipelineConfig,
    RunResult,
    expand_decor,
    expansion_embedding,
    format_run_lines,
    run_batch,
    run_query,
    write_run_file,
    write_trace,
)
from planted import (
    EXPECTED_HITS_AT_10,
    GROUPS,
    build_indexes,
    planted_qrels,
    planted_queries,
    run_scripted,
    scripted_client,
)
from sparse_index import ScoredHit


def _ranked_ids(result: RunResult) -> dict[str, list[str]]:
    return {qid: [hit.passage_id for hit in hits] for qid, hits in result.results.items()}


# ----------------------------------------------------------------------
# Config
# ----------------------------------------------------------------------
def test_config_rejects_ablations_outside_decor() -> None:
    with pytest.raises(InvalidConfig, match="only valid with method=decor"):
        PipelineConfig(method="plain", no_decomposition=True)
    with pytest.raises(InvalidConfig, match="Known methods"):
        PipelineConfig(method="bm25")
    with pytest.raises(InvalidConfig):
        PipelineConfig(n=0)


def test_default_run_tag_names_method_and_ablations() -> None:
    assert PipelineConfig().effective_run_tag == "decor"
    assert PipelineConfig(no_decomposition=True, concat_embedding=True).effective_run_tag == (
        "decor-no_decomposition-concat_embedding"
    )
    assert PipelineConfig(method="hyde", run_tag="mine").effective_run_tag == "mine"


# ----------------------------------------------------------------------
# Expansion arithmetic
# ----------------------------------------------------------------------
def test_expansion_embedding_is_the_plain_mean() -> None:
    rng = np.random.default_rng(7)
    for _ in range(1000):
        m = int(rng.integers(0, 7))
        dim = int(rng.integers(1, 513))
        query = rng.normal(size=dim)
        pairs = [rng.normal(size=dim) for _ in range(m)]

        expected = np.zeros(dim)
        for vector in [query, *pairs]:
            expected = expected + vector
        expected = expected / (m + 1)

        np.testing.assert_allclose(expansion_embedding(query, pairs), expected, rtol=0, atol=1e-9)


def test_expansion_embedding_ignores_pair_order() -> None:
    rng = np.random.default_rng(8)
    for _ in range(200):
        m = int(rng.integers(2, 7))
        query = rng.normal(size=64)
        pairs = [rng.normal(size=64) for _ in range(m)]
        shuffled = [pairs[i] for i in rng.permutation(m)]

        np.testing.assert_allclose(
            expansion_embedding(query, shuffled), expansion_embedding(query, pairs), rtol=0, atol=1e-12
        )


def test_expand_decor_averages_query_and_pair_embeddings(planted_transcript: Path) -> None:
    indexes = build_indexes(scripted_client(planted_transcript))
    group = GROUPS[0]
    query = planted_queries()[0]

    expanded = expand_decor(query, PipelineConfig(), indexes)

    assert [sq.text for sq in expanded.sub_queries] == [group.sub_query_1, group.sub_query_2]
    assert [c.text for c in expanded.compressed if c is not None] == [group.compressed_1, group.hop2_text]
    vectors = indexes.embedder.embed_texts(
        [
            query.text,
            f"{group.sub_query_1} {group.compressed_1}",
            f"{group.sub_query_2} {group.hop2_text}",
        ]
    )
    np.testing.assert_allclose(expanded.expansion_embedding, np.mean(vectors, axis=0), rtol=0, atol=1e-12)


def test_sub_query_without_candidates_is_skipped() -> None:
    class _Backend:
        def complete(self, system_prompt: str, user_prompt: str) -> str:
            if system_prompt.startswith("You are a helpful assistant that breaks down"):
                return '["which firm was founded by Ada Morrow", "zzzz qqqq"]'
            return "Ada Morrow founded the firm Velto"

    indexes = build_indexes(ChatClient(ChatClientConfig(), backend=_Backend()))

    expanded = expand_decor(planted_queries()[0], PipelineConfig(), indexes)

    assert expanded.skipped_ordinals == [2]
    assert expanded.compressed[1] is None
    expected = np.mean(
        indexes.embedder.embed_texts(
            [planted_queries()[0].text, "which firm was founded by Ada Morrow Ada Morrow founded the firm Velto"]
        ),
        axis=0,
    )
    np.testing.assert_allclose(expanded.expansion_embedding, expected, rtol=0, atol=1e-12)


# ----------------------------------------------------------------------
# End-to-end ordering on the planted corpus
# ----------------------------------------------------------------------
def test_decor_beats_plain_on_planted_two_hop_queries(planted_transcript: Path) -> None:
    qrels = planted_qrels()
    plain, _ = run_scripted(planted_transcript, PipelineConfig(method="plain"))
    decor, _ = run_scripted(planted_transcript, PipelineConfig(method="decor"))

    plain_hits = hits_at_k(_ranked_ids(plain), qrels, 10)
    decor_hits = hits_at_k(_ranked_ids(decor), qrels, 10)

    assert plain_hits == EXPECTED_HITS_AT_10["plain"]
    assert decor_hits == EXPECTED_HITS_AT_10["decor"]
    assert decor_hits > plain_hits
    for group in GROUPS:
        ranked = _ranked_ids(plain)[group.query_id]
        assert ranked[0] == group.hop1_id
        assert group.hop2_id not in ranked


# ----------------------------------------------------------------------
# Ablation flags, checked structurally
# ----------------------------------------------------------------------
def test_no_decomposition_gives_single_sub_query(planted_transcript: Path) -> None:
    result, _ = run_scripted(planted_transcript, PipelineConfig(no_decomposition=True))

    assert all(trace["m"] == 1 for trace in result.traces)
    assert [trace["sub_queries"] for trace in result.traces] == [[q.text] for q in planted_queries()]


def test_concatenated_compression_makes_one_call_per_sub_query(planted_transcript: Path) -> None:
    result, indexes = run_scripted(planted_transcript, PipelineConfig())

    decomposition_calls = len(result.traces)
    compression_calls = sum(trace["m"] - len(trace["skipped_sub_queries"]) for trace in result.traces)
    assert indexes.chat.calls == decomposition_calls + compression_calls
    assert indexes.bm25_calls == sum(trace["m"] for trace in result.traces)


def test_document_wise_compression_calls_once_per_candidate(planted_transcript: Path) -> None:
    result, indexes = run_scripted(planted_transcript, PipelineConfig(document_wise_compression=True))

    candidates = sum(len(ids) for trace in result.traces for ids in trace["candidates"])
    assert indexes.chat.calls == len(result.traces) + candidates


def test_no_compression_only_decomposes(planted_transcript: Path) -> None:
    result, indexes = run_scripted(planted_transcript, PipelineConfig(no_compression=True))

    assert indexes.chat.calls == len(result.traces)
    for trace in result.traces:
        assert all(text is not None for text in trace["compressed"])


def test_no_expansion_matches_plain_exactly(planted_transcript: Path) -> None:
    plain, _ = run_scripted(planted_transcript, PipelineConfig(method="plain", run_tag="same"))
    ablated, indexes = run_scripted(planted_transcript, PipelineConfig(no_expansion=True, run_tag="same"))

    assert indexes.chat.calls == 0
    assert indexes.bm25_calls == 0
    assert format_run_lines(ablated.results, ablated.run_tag) == format_run_lines(plain.results, plain.run_tag)


def test_no_expansion_and_plain_differ_only_in_default_tag(planted_transcript: Path) -> None:
    plain, _ = run_scripted(planted_transcript, PipelineConfig(method="plain"))
    ablated, _ = run_scripted(planted_transcript, PipelineConfig(no_expansion=True))

    assert (plain.run_tag, ablated.run_tag) == ("plain", "decor-no_expansion")
    plain_lines = format_run_lines(plain.results, plain.run_tag)
    ablated_lines = format_run_lines(ablated.results, ablated.run_tag)
    assert plain_lines
    assert [line.rsplit(" ", 1)[0] for line in ablated_lines] == [line.rsplit(" ", 1)[0] for line in plain_lines]


def test_concat_embedding_embeds_one_joined_text(planted_transcript: Path) -> None:
    indexes = build_indexes(scripted_client(planted_transcript))
    group = GROUPS[1]
    query = planted_queries()[1]

    expanded = expand_decor(query, PipelineConfig(concat_embedding=True), indexes)

    joined = f"{query.text} {group.sub_query_1} {group.compressed_1} {group.sub_query_2} {group.hop2_text}"
    np.testing.assert_array_equal(expanded.expansion_embedding, indexes.embedder.embed_query(joined))


# ----------------------------------------------------------------------
# Baselines
# ----------------------------------------------------------------------
def test_hyde_averages_query_and_generated_passage() -> None:
    indexes = build_indexes(ChatClient(ChatClientConfig(backend="heuristic")))
    query = planted_queries()[2]

    hits = run_query(query, PipelineConfig(method="hyde", k=50), indexes)

    # the heuristic backend echoes the query, so the average equals E(q)
    plain = run_query(query, PipelineConfig(method="plain", k=50), indexes)
    assert [h.passage_id for h in hits] == [h.passage_id for h in plain]
    assert indexes.chat.calls == 1


def test_query2doc_appends_generated_passage() -> None:
    class _Backend:
        def complete(self, system_prompt: str, user_prompt: str) -> str:
            return GROUPS[2].hop2_text

    indexes = build_indexes(ChatClient(ChatClientConfig(), backend=_Backend()))
    group = GROUPS[2]

    hits = run_query(planted_queries()[2], PipelineConfig(method="query2doc"), indexes)

    assert group.hop2_id in [h.passage_id for h in hits[:3]]


# ----------------------------------------------------------------------
# Batch behavior and output files
# ----------------------------------------------------------------------
def test_run_batch_keeps_input_order_and_records_failures(planted_transcript: Path) -> None:
    queries = planted_queries()
    unknown = QueryRecord(query_id="zz-unscripted", text="a question nobody recorded")
    batch = [queries[3], unknown, queries[0]]
    indexes = build_indexes(scripted_client(planted_transcript))

    result = asyncio.run(run_batch(batch, PipelineConfig(max_concurrent_queries=2), indexes))

    assert list(result.results) == [queries[3].query_id, queries[0].query_id]
    assert [trace["query_id"] for trace in result.traces] == [queries[3].query_id, "zz-unscripted", queries[0].query_id]
    assert len(result.failures) == 1
    failure = result.failures[0]
    assert isinstance(failure, QueryFailed)
    assert failure.stage == "decompose"
    assert isinstance(failure.cause, TranscriptMiss)
    assert result.traces[1]["error"]["type"] == "TranscriptMiss"


def test_run_batch_requires_queries(planted_transcript: Path) -> None:
    indexes = build_indexes(scripted_client(planted_transcript))

    with pytest.raises(InvalidConfig):
        asyncio.run(run_batch([], PipelineConfig(), indexes))


def test_run_file_and_trace_format(tmp_path: Path, planted_transcript: Path) -> None:
    result, _ = run_scripted(planted_transcript, PipelineConfig(record_timings=False, k=3))
    write_run_file(tmp_path / "decor.run", result)
    write_trace(tmp_path / "decor.trace.jsonl", result, {"pipeline": {"method": "decor"}})

    lines = (tmp_path / "decor.run").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 3 * len(GROUPS)
    first = lines[0].split(" ")
    assert first[0] == GROUPS[0].query_id
    assert first[1] == "Q0"
    assert first[3] == "1"
    assert len(first[4].split(".")[1]) == 6
    assert first[5] == "decor"

    trace_lines = (tmp_path / "decor.trace.jsonl").read_text(encoding="utf-8").splitlines()
    assert json.loads(trace_lines[0]) == {"effective_config": {"pipeline": {"method": "decor"}}}
    assert len(trace_lines) == 1 + len(GROUPS)
    assert "timing_ms" not in json.loads(trace_lines[1])


def test_timings_are_recorded_by_default(planted_transcript: Path) -> None:
    result, _ = run_scripted(planted_transcript, PipelineConfig())

    timing = result.traces[0]["timing_ms"]
    assert set(timing) == {"decompose", "candidates", "compress", "embed", "search"}


def test_format_run_lines() -> None:
    lines = format_run_lines({"q1": [ScoredHit("p#0", 0.5, 1), ScoredHit("p#1", 0.25, 2)]}, "tag")

    assert lines == ["q1 Q0 p#0 1 0.500000 tag", "q1 Q0 p#1 2 0.250000 tag"]
