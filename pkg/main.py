from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from config import LOG_LEVELS, AppConfig, apply_overrides, load_config
from corpus import (
    CORPUS_FORMATS,
    HEADER_FILE,
    QRELS_FILE,
    QUERIES_FILE,
    UNMATCHED_FILE,
    build_qrels,
    chunk_corpus,
    filter_queries,
    ingest_corpus,
    ingest_queries,
    load_corpus_store,
    load_queries,
    sample_queries,
    save_corpus_store,
    save_qrels,
    save_queries,
    save_unmatched_report,
)
from embedding import EMBEDDER_BACKENDS, Embedder, EmbeddingCache, build_vector_index, load_vector_index, save_vector_index
from errors import DecorError, InvalidConfig, MissingArtifact
from evaluation import HITS_VARIANTS, compare, evaluate, read_report, write_report
from llm import CHAT_BACKENDS, ChatClient
from pipeline import ABLATIONS, METHODS, RetrievalIndexes, run_batch, write_run_file, write_trace
from sparse_index import build_index, load_index, save_index

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = "config/decor.toy.json"


class Workdir:
    """Artifact layout under ``paths.workdir``."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)

    @property
    def corpus_dir(self) -> Path:
        return self.root / "corpus"

    @property
    def queries(self) -> Path:
        return self.corpus_dir / QUERIES_FILE

    @property
    def qrels(self) -> Path:
        return self.corpus_dir / QRELS_FILE

    @property
    def unmatched(self) -> Path:
        return self.corpus_dir / UNMATCHED_FILE

    @property
    def bm25(self) -> Path:
        return self.root / "index" / "bm25.idx"

    @property
    def vectors(self) -> Path:
        return self.root / "index" / "vectors"

    @property
    def embedding_cache(self) -> Path:
        return self.root / "index" / "embeddings.cache.jsonl"

    def run_file(self, run_tag: str) -> Path:
        return self.root / "runs" / f"{run_tag}.run"

    def trace_file(self, run_tag: str) -> Path:
        return self.root / "runs" / f"{run_tag}.trace.jsonl"

    def report_file(self, run_tag: str) -> Path:
        return self.root / "reports" / f"{run_tag}.json"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, hint)
    return path


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------
def cmd_ingest(config: AppConfig) -> int:
    work = Workdir(config.paths.workdir)
    opts = config.corpus
    corpus_path = _require(Path(config.paths.corpus), "Set paths.corpus or pass --corpus.")
    queries_path = _require(Path(config.paths.queries), "Set paths.queries or pass --queries.")

    documents = ingest_corpus(corpus_path, opts.format)
    queries = ingest_queries(queries_path, opts.format)
    queries = filter_queries(queries, opts.question_types)
    queries = sample_queries(queries, opts.sample_size, opts.sample_seed)
    passages = chunk_corpus(documents, opts.chunk_size, opts.overlap)
    qrels, unmatched = build_qrels(queries, passages, opts.matcher)

    save_corpus_store(work.corpus_dir, passages, chunk_size=opts.chunk_size, overlap=opts.overlap, num_docs=len(documents))
    save_queries(work.queries, queries)
    save_qrels(work.qrels, qrels)
    save_unmatched_report(work.unmatched, unmatched)
    print(
        f"[ingest] docs={len(documents)} passages={len(passages)} queries={len(queries)} "
        f"unmatched_facts={len(unmatched)} -> {work.corpus_dir}"
    )
    return 0


def _load_passages(work: Workdir) -> list[Any]:
    _require(work.corpus_dir / HEADER_FILE, "Run the ingest command first.")
    _, passages = load_corpus_store(work.corpus_dir)
    return passages


def _build_embedder(config: AppConfig, work: Workdir) -> Embedder:
    return Embedder(config.embedder, cache=EmbeddingCache(work.embedding_cache))


def cmd_index(config: AppConfig) -> int:
    work = Workdir(config.paths.workdir)
    passages = _load_passages(work)

    bm25 = build_index(passages, config.bm25)
    save_index(bm25, work.bm25)
    print(f"[index] bm25 N={bm25.N} terms={len(bm25.vocabulary)} -> {work.bm25}")

    vectors = build_vector_index(passages, _build_embedder(config, work))
    save_vector_index(vectors, work.vectors)
    print(f"[index] vectors model={vectors.model} dim={vectors.dim} -> {work.vectors}.npy")
    return 0


def cmd_run(config: AppConfig) -> int:
    work = Workdir(config.paths.workdir)
    passages = _load_passages(work)
    queries = load_queries(_require(work.queries, "Run the ingest command first."))
    bm25 = load_index(_require(work.bm25, "Run the index command first."))
    _require(work.vectors.with_suffix(".npy"), "Run the index command first.")
    vectors = load_vector_index(work.vectors)

    embedder = _build_embedder(config, work)
    if vectors.model != config.embedder.cache_model:
        raise InvalidConfig(
            f"vector index was built with '{vectors.model}' but embedder is '{config.embedder.cache_model}'. "
            "Re-run the index command."
        )
    chat = ChatClient(config.llm)
    indexes = RetrievalIndexes(passages, bm25, vectors, embedder, chat)

    cfg = config.pipeline
    result = asyncio.run(run_batch(queries, cfg, indexes))

    run_path = work.run_file(result.run_tag)
    write_run_file(run_path, result)
    write_trace(work.trace_file(result.run_tag), result, config.to_dict())
    print(
        f"[run] tag={result.run_tag} queries={len(queries)} failures={len(result.failures)} "
        f"chat_calls={chat.calls} bm25_calls={indexes.bm25_calls} -> {run_path}"
    )
    return 1 if result.failures and not result.results else 0


def cmd_eval(config: AppConfig, run: str | None = None, qrels: str | None = None) -> int:
    work = Workdir(config.paths.workdir)
    run_path = Path(run) if run else work.run_file(config.pipeline.effective_run_tag)
    qrels_path = Path(qrels) if qrels else work.qrels
    _require(run_path, "Run the run command first or pass --run.")
    _require(qrels_path, "Run the ingest command first or pass --qrels.")

    opts = config.eval
    report = evaluate(
        run_path,
        qrels_path,
        opts.hits_ks,
        rank_ks=opts.rank_ks,
        hits_variant=opts.hits_variant,
        per_query=opts.per_query,
    )
    report_path = work.report_file(report.run_tag)
    write_report(report_path, report)
    print(compare([report]).text, end="")
    print(
        f"[eval] queries={report.num_queries} gold={report.num_gold} missing={report.num_missing} "
        f"variant={report.hits_variant} -> {report_path}"
    )
    return 0


def cmd_compare(reports: Sequence[str], csv_path: str | None = None) -> int:
    loaded = [read_report(_require(Path(path), "Run the eval command first.")) for path in reports]
    table = compare(loaded)
    print(table.text, end="")
    if csv_path:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        Path(csv_path).write_text(table.csv, encoding="utf-8")
        print(f"[compare] csv -> {csv_path}")
    return 0


# ----------------------------------------------------------------------
# Argument handling
# ----------------------------------------------------------------------
def _parse_args(argv: Sequence[str] | None = None) -> Any:
    parser = argparse.ArgumentParser(description="DeCoR multi-hop retrieval: ingest, index, run, evaluate")
    parser.add_argument("--config", default=DEFAULT_CONFIG, help="Path to the JSON config file")
    parser.add_argument("--workdir", default=None, help="Artifact directory (paths.workdir)")
    parser.add_argument("--log-level", choices=LOG_LEVELS, default=None, help="Logging level (log_level)")
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", help="Ingest corpus and queries, chunk passages, build qrels")
    ingest.add_argument("--corpus", default=None, help="Corpus JSON file (paths.corpus)")
    ingest.add_argument("--queries", default=None, help="Queries JSON file (paths.queries)")
    ingest.add_argument("--format", choices=CORPUS_FORMATS, default=None, help="Input format (corpus.format)")
    ingest.add_argument("--chunk-size", type=int, default=None, help="Words per passage, 0 = whole document (corpus.chunk_size)")
    ingest.add_argument("--overlap", type=int, default=None, help="Words shared by adjacent passages (corpus.overlap)")
    ingest.add_argument(
        "--question-type",
        action="append",
        default=None,
        help="Keep only this question type; repeatable (corpus.question_types)",
    )
    ingest.add_argument("--sample", type=int, default=None, help="Random query subset size (corpus.sample_size)")
    ingest.add_argument("--seed", type=int, default=None, help="Seed for --sample (corpus.sample_seed)")

    sub.add_parser("index", help="Build the BM25 and vector indexes over the ingested passages")

    run = sub.add_parser("run", help="Retrieve for every ingested query and write a TREC run file plus trace")
    run.add_argument("--method", choices=METHODS, default=None, help="Retrieval method (pipeline.method)")
    run.add_argument(
        "--ablation",
        action="append",
        choices=ABLATIONS,
        default=None,
        help="DeCoR ablation flag; repeatable (pipeline.ablations)",
    )
    run.add_argument("--run-tag", default=None, help="Run tag, also the output file stem (pipeline.run_tag)")
    run.add_argument("--n", type=int, default=None, help="BM25 candidates per sub-query (pipeline.n)")
    run.add_argument("--k", type=int, default=None, help="Passages returned per query (pipeline.k)")
    run.add_argument(
        "--max-concurrent-queries",
        type=int,
        default=None,
        help="Queries in flight at once (pipeline.max_concurrent_queries)",
    )
    run.add_argument(
        "--no-timings",
        dest="record_timings",
        action="store_const",
        const=False,
        default=None,
        help="Omit per-stage timings from the trace (pipeline.record_timings=false)",
    )
    run.add_argument("--llm-backend", choices=CHAT_BACKENDS, default=None, help="Chat backend (llm.backend)")
    run.add_argument("--llm-model", default=None, help="Chat model name (llm.model_name)")
    run.add_argument("--llm-endpoint", default=None, help="OpenAI-compatible base URL (llm.endpoint_url)")
    run.add_argument("--transcript", default=None, help="Transcript JSONL for scripted/record mode (llm.transcript_path)")
    run.add_argument(
        "--record",
        action="store_const",
        const=True,
        default=None,
        help="Append live chat responses to the transcript (llm.record)",
    )
    run.add_argument("--embed-backend", choices=EMBEDDER_BACKENDS, default=None, help="Embedder backend (embedder.backend)")
    run.add_argument("--embed-model", default=None, help="Embedding model name (embedder.model_name)")
    run.add_argument("--embed-endpoint", default=None, help="OpenAI-compatible base URL (embedder.endpoint_url)")

    ev = sub.add_parser("eval", help="Score a run file against qrels and write a metric report")
    ev.add_argument("--run", default=None, help="Run file; defaults to runs/<run tag>.run in the workdir")
    ev.add_argument("--qrels", default=None, help="Qrels file; defaults to corpus/qrels.txt in the workdir")
    ev.add_argument(
        "--per-query",
        action="store_const",
        const=True,
        default=None,
        help="Include a per-query breakdown in the report (eval.per_query)",
    )
    ev.add_argument("--hits-variant", choices=HITS_VARIANTS, default=None, help="Hits@k averaging (eval.hits_variant)")

    cmp = sub.add_parser("compare", help="Render metric reports side by side, best value per column marked")
    cmp.add_argument("reports", nargs="+", help="Metric report JSON files")
    cmp.add_argument("--csv", default=None, help="Also write the table as CSV to this path")

    return parser.parse_args(argv)


def _overrides(args: Any) -> dict[str, Any]:
    overrides: dict[str, Any] = {
        "paths.workdir": args.workdir,
        "log_level": args.log_level,
    }
    if args.command == "ingest":
        overrides.update(
            {
                "paths.corpus": args.corpus,
                "paths.queries": args.queries,
                "corpus.format": args.format,
                "corpus.chunk_size": args.chunk_size,
                "corpus.overlap": args.overlap,
                "corpus.question_types": args.question_type,
                "corpus.sample_size": args.sample,
                "corpus.sample_seed": args.seed,
            }
        )
    elif args.command == "run":
        ablations = args.ablation
        if ablations is None and args.method is not None and args.method != "decor":
            ablations = []
        overrides.update(
            {
                "pipeline.method": args.method,
                "pipeline.ablations": ablations,
                "pipeline.run_tag": args.run_tag,
                "pipeline.n": args.n,
                "pipeline.k": args.k,
                "pipeline.max_concurrent_queries": args.max_concurrent_queries,
                "pipeline.record_timings": args.record_timings,
                "llm.backend": args.llm_backend,
                "llm.model_name": args.llm_model,
                "llm.endpoint_url": args.llm_endpoint,
                "llm.transcript_path": args.transcript,
                "llm.record": args.record,
                "embedder.backend": args.embed_backend,
                "embedder.model_name": args.embed_model,
                "embedder.endpoint_url": args.embed_endpoint,
            }
        )
    elif args.command == "eval":
        overrides.update({"eval.per_query": args.per_query, "eval.hits_variant": args.hits_variant})
    return overrides


def main(argv: Sequence[str] | None = None) -> int:
    args = _parse_args(argv)
    try:
        if args.command == "compare":
            logging.basicConfig(level=args.log_level or "INFO", format="%(levelname)s %(name)s: %(message)s")
            return cmd_compare(args.reports, args.csv)

        config = apply_overrides(load_config(args.config), _overrides(args), base_dir=Path.cwd())
        logging.basicConfig(level=config.log_level, format="%(levelname)s %(name)s: %(message)s")
        logger.debug("effective config: %s", config.to_dict())

        if args.command == "ingest":
            return cmd_ingest(config)
        if args.command == "index":
            return cmd_index(config)
        if args.command == "run":
            return cmd_run(config)
        return cmd_eval(config, run=args.run, qrels=args.qrels)
    except (DecorError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
