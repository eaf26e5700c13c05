from __future__ import annotations

import json
import logging
import random
import re
import unicodedata
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from errors import InvalidConfig, MalformedInput

logger = logging.getLogger(__name__)

CORPUS_FORMATS = ("multihop_rag", "generic_json")
MATCHERS = ("normalized_substring", "exact")
STORE_FORMAT_VERSION = 1

DEFAULT_CHUNK_SIZE = 256
DEFAULT_OVERLAP = 32

# Field names understood per format; everything else lands in ``extra``.
_DOC_ID_FIELDS = ("doc_id", "id")
_BODY_FIELDS = {
    "multihop_rag": ("body",),
    "generic_json": ("body", "text", "contents"),
}
_DOC_KNOWN_FIELDS = frozenset({"doc_id", "id", "title", "body", "text", "contents", "source", "published_at", "category"})
_QUERY_TEXT_FIELDS = ("query", "text", "question")
_QUERY_KNOWN_FIELDS = frozenset({"query_id", "id", "query", "text", "question", "question_type", "evidence_list"})

_WHITESPACE_RE = re.compile(r"\s+")


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    body: str
    source: str = ""
    published_at: str = ""
    category: str = ""
    extra: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Passage:
    passage_id: str
    doc_id: str
    text: str
    position: int


@dataclass(frozen=True)
class EvidenceFact:
    fact: str
    source_title: str = ""


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    text: str
    question_type: str = ""
    gold_evidence: tuple[EvidenceFact, ...] = ()
    extra: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class UnmatchedFact:
    query_id: str
    fact_index: int
    fact: str
    source_title: str


@dataclass
class UnmatchedReport:
    facts: list[UnmatchedFact] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.facts)

    def to_dict(self) -> dict[str, Any]:
        return {
            "num_unmatched": len(self.facts),
            "facts": [
                {
                    "query_id": item.query_id,
                    "fact_index": item.fact_index,
                    "fact": item.fact,
                    "source_title": item.source_title,
                }
                for item in self.facts
            ],
        }


Qrels = dict[str, set[str]]


# ----------------------------------------------------------------------
# Ingestion
# ----------------------------------------------------------------------
def _read_json_array(path: str | Path) -> list[Any]:
    path = Path(path)
    try:
        raw_text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"Cannot read input file {path}: {exc}") from exc

    try:
        raw = json.loads(raw_text)
    except json.JSONDecodeError as exc:
        raise MalformedInput(f"{path} is not valid JSON: {exc}") from exc

    if not isinstance(raw, list):
        raise MalformedInput(f"{path} must contain a JSON array of objects, got {type(raw).__name__}")
    return raw


def _check_format(fmt: str) -> None:
    if fmt not in CORPUS_FORMATS:
        known = ", ".join(CORPUS_FORMATS)
        raise InvalidConfig(f"Unknown corpus format '{fmt}'. Known formats: [{known}]")


def _as_str(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    return json.dumps(value, ensure_ascii=False, sort_keys=True)


def _ordinal_id(prefix: str, index: int, total: int, min_width: int) -> str:
    width = max(min_width, len(str(max(total - 1, 0))))
    return f"{prefix}{index:0{width}d}"


def ingest_corpus(path: str | Path, format: str = "multihop_rag") -> list[Document]:
    """Load a JSON array of article objects into Documents.

    ``doc_id`` comes from a ``doc_id``/``id`` field when present, otherwise a
    zero-padded ordinal (``d000``, ``d001``, ...). Unknown fields are kept in
    ``extra`` as strings.
    """
    _check_format(format)
    raw = _read_json_array(path)

    documents: list[Document] = []
    seen: set[str] = set()
    for index, item in enumerate(raw):
        if not isinstance(item, dict):
            raise MalformedInput(f"Element {index} of {path} must be an object")

        body = ""
        for key in _BODY_FIELDS[format]:
            if key in item:
                body = _as_str(item[key])
                break
        title = _as_str(item.get("title"))
        if not _WHITESPACE_RE.sub("", body):
            raise MalformedInput(f"Element {index} of {path} is missing a non-empty body (title={title!r})")

        doc_id = next((_as_str(item[key]) for key in _DOC_ID_FIELDS if key in item), "")
        if not doc_id:
            doc_id = _ordinal_id("d", index, len(raw), 3)
        if _WHITESPACE_RE.search(doc_id):
            raise MalformedInput(f"Element {index} of {path} has a doc_id containing whitespace: {doc_id!r}")
        if doc_id in seen:
            raise MalformedInput(f"Element {index} of {path} repeats doc_id {doc_id!r}")
        seen.add(doc_id)

        extra = {key: _as_str(value) for key, value in item.items() if key not in _DOC_KNOWN_FIELDS}
        documents.append(
            Document(
                doc_id=doc_id,
                title=title,
                body=body.strip(),
                source=_as_str(item.get("source")),
                published_at=_as_str(item.get("published_at")),
                category=_as_str(item.get("category")),
                extra=extra,
            )
        )

    logger.info("Ingested %d documents from %s", len(documents), path)
    return documents


def dump_documents(documents: Iterable[Document], path: str | Path) -> None:
    """Write Documents back as a MultiHop-RAG-shaped array (ids kept explicitly)."""
    payload = []
    for doc in documents:
        item: dict[str, Any] = {
            "doc_id": doc.doc_id,
            "title": doc.title,
            "body": doc.body,
            "source": doc.source,
            "published_at": doc.published_at,
            "category": doc.category,
        }
        item.update(doc.extra)
        payload.append(item)
    Path(path).write_text(json.dumps(payload, ensure_ascii=False, indent=2), encoding="utf-8")


def _parse_evidence(raw: Any, *, index: int, path: str | Path) -> tuple[EvidenceFact, ...]:
    if raw is None:
        return ()
    if not isinstance(raw, list):
        raise MalformedInput(f"Element {index} of {path}: evidence_list must be an array")

    facts: list[EvidenceFact] = []
    for item in raw:
        if isinstance(item, str):
            fact, title = item, ""
        elif isinstance(item, dict):
            fact, title = _as_str(item.get("fact")), _as_str(item.get("title"))
        else:
            raise MalformedInput(f"Element {index} of {path}: evidence entries must be objects or strings")
        if not fact.strip():
            raise MalformedInput(f"Element {index} of {path}: evidence fact must be non-empty")
        facts.append(EvidenceFact(fact=fact, source_title=title))
    return tuple(facts)


def ingest_queries(path: str | Path, format: str = "multihop_rag") -> list[QueryRecord]:
    """Load the query file (``query``, ``question_type``, ``evidence_list``)."""
    _check_format(format)
    raw = _read_json_array(path)

    queries: list[QueryRecord] = []
    seen: set[str] = set()
    for index, item in enumerate(raw):
        if not isinstance(item, dict):
            raise MalformedInput(f"Element {index} of {path} must be an object")

        text = next((_as_str(item[key]) for key in _QUERY_TEXT_FIELDS if key in item), "").strip()
        if not text:
            raise MalformedInput(f"Element {index} of {path} is missing a non-empty query text")

        query_id = _as_str(item.get("query_id", item.get("id", "")))
        if not query_id:
            query_id = _ordinal_id("q", index, len(raw), 4)
        if _WHITESPACE_RE.search(query_id):
            raise MalformedInput(f"Element {index} of {path} has a query_id containing whitespace: {query_id!r}")
        if query_id in seen:
            raise MalformedInput(f"Element {index} of {path} repeats query_id {query_id!r}")
        seen.add(query_id)

        queries.append(
            QueryRecord(
                query_id=query_id,
                text=text,
                question_type=_as_str(item.get("question_type")),
                gold_evidence=_parse_evidence(item.get("evidence_list"), index=index, path=path),
                extra={key: _as_str(value) for key, value in item.items() if key not in _QUERY_KNOWN_FIELDS},
            )
        )

    logger.info("Ingested %d queries from %s", len(queries), path)
    return queries


def filter_queries(queries: Sequence[QueryRecord], question_types: Iterable[str]) -> list[QueryRecord]:
    wanted = set(question_types)
    if not wanted:
        return list(queries)
    return [q for q in queries if q.question_type in wanted]


def sample_queries(queries: Sequence[QueryRecord], size: int | None, seed: int = 0) -> list[QueryRecord]:
    """Seeded random subset of ``size`` queries, kept in input order."""
    if size is None or size >= len(queries):
        return list(queries)
    if size < 1:
        raise InvalidConfig(f"sample size must be >= 1, got {size}")
    picked = set(random.Random(seed).sample(range(len(queries)), size))
    return [q for i, q in enumerate(queries) if i in picked]


# ----------------------------------------------------------------------
# Chunking
# ----------------------------------------------------------------------
def chunk_document(doc: Document, chunk_size: int = DEFAULT_CHUNK_SIZE, overlap: int = DEFAULT_OVERLAP) -> list[Passage]:
    """Split ``doc.body`` into whitespace-word windows.

    Windows hold ``chunk_size`` words with stride ``chunk_size - overlap``; the
    final partial window is kept. ``chunk_size=0`` returns the whole document
    as a single passage.
    """
    if chunk_size < 0 or overlap < 0:
        raise InvalidConfig(f"chunk_size and overlap must be >= 0, got chunk_size={chunk_size}, overlap={overlap}")

    words = doc.body.split()
    if not words:
        return []

    if chunk_size == 0:
        return [Passage(passage_id=f"{doc.doc_id}#0", doc_id=doc.doc_id, text=" ".join(words), position=0)]

    if overlap >= chunk_size:
        raise InvalidConfig(f"overlap must be < chunk_size, got overlap={overlap}, chunk_size={chunk_size}")

    stride = chunk_size - overlap
    passages: list[Passage] = []
    start = 0
    while True:
        window = words[start : start + chunk_size]
        position = len(passages)
        passages.append(
            Passage(
                passage_id=f"{doc.doc_id}#{position}",
                doc_id=doc.doc_id,
                text=" ".join(window),
                position=position,
            )
        )
        if start + chunk_size >= len(words):
            break
        start += stride
    return passages


def chunk_corpus(
    documents: Iterable[Document],
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_OVERLAP,
) -> list[Passage]:
    passages: list[Passage] = []
    for doc in documents:
        passages.extend(chunk_document(doc, chunk_size, overlap))
    return passages


# ----------------------------------------------------------------------
# Gold relevance
# ----------------------------------------------------------------------
def normalize_for_match(text: str) -> str:
    """Lowercase, drop punctuation characters, collapse whitespace."""
    lowered = text.lower()
    stripped = "".join(ch for ch in lowered if not unicodedata.category(ch).startswith("P"))
    return _WHITESPACE_RE.sub(" ", stripped).strip()


def build_qrels(
    queries: Sequence[QueryRecord],
    passages: Sequence[Passage],
    matcher: str = "normalized_substring",
) -> tuple[Qrels, UnmatchedReport]:
    """Align evidence facts to passages by substring containment.

    Every query appears in the result, possibly with an empty set. Facts that
    match no passage are listed in the UnmatchedReport.
    """
    if matcher not in MATCHERS:
        known = ", ".join(MATCHERS)
        raise InvalidConfig(f"Unknown matcher '{matcher}'. Known matchers: [{known}]")
    if not passages:
        raise InvalidConfig("build_qrels requires at least one passage")

    prepare = normalize_for_match if matcher == "normalized_substring" else (lambda s: s)

    # A fact contained in a passage is also contained in its whole document,
    # so documents are screened first and only their passages scanned.
    grouped: dict[str, list[Passage]] = {}
    for passage in passages:
        grouped.setdefault(passage.doc_id, []).append(passage)

    by_doc: dict[str, list[tuple[str, str]]] = {}
    doc_texts: dict[str, str] = {}
    for doc_id, doc_passages in grouped.items():
        doc_passages.sort(key=lambda p: p.position)
        by_doc[doc_id] = [(p.passage_id, prepare(p.text)) for p in doc_passages]
        doc_texts[doc_id] = prepare(" ".join(p.text for p in doc_passages))

    qrels: Qrels = {}
    report = UnmatchedReport()
    for query in queries:
        gold: set[str] = set()
        for fact_index, evidence in enumerate(query.gold_evidence):
            needle = prepare(evidence.fact)
            matched = False
            if needle:
                for doc_id, doc_passages in by_doc.items():
                    if needle not in doc_texts[doc_id]:
                        continue
                    for passage_id, passage_text in doc_passages:
                        if needle in passage_text:
                            gold.add(passage_id)
                            matched = True
            if not matched:
                report.facts.append(
                    UnmatchedFact(
                        query_id=query.query_id,
                        fact_index=fact_index,
                        fact=evidence.fact,
                        source_title=evidence.source_title,
                    )
                )
        qrels[query.query_id] = gold

    if report.facts:
        logger.warning("%d evidence facts matched no passage", len(report.facts))
    return qrels, report


# ----------------------------------------------------------------------
# Stores
# ----------------------------------------------------------------------
PASSAGES_FILE = "passages.jsonl"
HEADER_FILE = "header.json"
QUERIES_FILE = "queries.jsonl"
QRELS_FILE = "qrels.txt"
UNMATCHED_FILE = "unmatched.json"


def save_corpus_store(
    directory: str | Path,
    passages: Sequence[Passage],
    *,
    chunk_size: int,
    overlap: int,
    num_docs: int,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with (directory / PASSAGES_FILE).open("w", encoding="utf-8") as fh:
        for passage in passages:
            record = {
                "passage_id": passage.passage_id,
                "doc_id": passage.doc_id,
                "position": passage.position,
                "text": passage.text,
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    header = {
        "format_version": STORE_FORMAT_VERSION,
        "chunk_size": chunk_size,
        "overlap": overlap,
        "num_docs": num_docs,
        "num_passages": len(passages),
    }
    (directory / HEADER_FILE).write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    return directory


def load_corpus_store(directory: str | Path) -> tuple[dict[str, Any], list[Passage]]:
    directory = Path(directory)
    try:
        header = json.loads((directory / HEADER_FILE).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedInput(f"{directory / HEADER_FILE}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(header, dict):
        raise MalformedInput(f"{directory / HEADER_FILE}: expected a JSON object")
    if header.get("format_version") != STORE_FORMAT_VERSION:
        raise MalformedInput(
            f"{directory / HEADER_FILE}: unsupported format_version {header.get('format_version')!r}"
        )

    passages: list[Passage] = []
    with (directory / PASSAGES_FILE).open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                passages.append(
                    Passage(
                        passage_id=record["passage_id"],
                        doc_id=record["doc_id"],
                        text=record["text"],
                        position=int(record["position"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise MalformedInput(f"{directory / PASSAGES_FILE}:{line_no}: bad passage record") from exc

    if len(passages) != header.get("num_passages"):
        raise MalformedInput(
            f"{directory}: header says {header.get('num_passages')} passages, found {len(passages)}"
        )
    return header, passages


def save_queries(path: str | Path, queries: Iterable[QueryRecord]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for query in queries:
            record = {
                "query_id": query.query_id,
                "text": query.text,
                "question_type": query.question_type,
                "evidence_list": [{"fact": e.fact, "title": e.source_title} for e in query.gold_evidence],
                "extra": query.extra,
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_queries(path: str | Path) -> list[QueryRecord]:
    path = Path(path)
    queries: list[QueryRecord] = []
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                queries.append(
                    QueryRecord(
                        query_id=record["query_id"],
                        text=record["text"],
                        question_type=record.get("question_type", ""),
                        gold_evidence=tuple(
                            EvidenceFact(fact=e["fact"], source_title=e.get("title", ""))
                            for e in record.get("evidence_list", [])
                        ),
                        extra=dict(record.get("extra", {})),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
                raise MalformedInput(f"{path}:{line_no}: bad query record ({type(exc).__name__})") from exc
    return queries


def save_qrels(path: str | Path, qrels: Mapping[str, set[str]]) -> None:
    """``query_id passage_id`` lines; a judged query with no gold is a bare ``query_id`` line."""
    lines: list[str] = []
    for query_id, gold in qrels.items():
        if not gold:
            lines.append(query_id)
            continue
        lines.extend(f"{query_id} {passage_id}" for passage_id in sorted(gold))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def save_unmatched_report(path: str | Path, report: UnmatchedReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
