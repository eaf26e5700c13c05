from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from corpus import Passage
from errors import CorruptFile, EmptyCorpus, InvalidConfig, VersionMismatch
from hashing import Fnv1a64

logger = logging.getLogger(__name__)

INDEX_FORMAT_VERSION = 1

_TOKEN_SPLIT_RE = re.compile(r"[\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything but Unicode letters and digits. No stemming, no stopwords."""
    return [token for token in _TOKEN_SPLIT_RE.split(text.lower()) if token]


def idf(num_docs: int, df: int) -> float:
    """Lucene-style idf with +1 inside the log; never negative."""
    return math.log(1.0 + (num_docs - df + 0.5) / (df + 0.5))


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self) -> None:
        if not self.k1 > 0:
            raise InvalidConfig(f"bm25 k1 must be > 0, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise InvalidConfig(f"bm25 b must be in [0, 1], got {self.b}")


@dataclass(frozen=True)
class ScoredHit:
    passage_id: str
    score: float
    rank: int


def rank_hits(passage_ids: Sequence[str], scores: np.ndarray, tie_rank: np.ndarray, rows: np.ndarray, limit: int) -> list[ScoredHit]:
    """Order ``rows`` by score descending, ties by ascending passage_id, and keep ``limit``."""
    if rows.size == 0:
        return []
    order = np.lexsort((tie_rank[rows], -scores[rows]))[:limit]
    return [
        ScoredHit(passage_id=passage_ids[row], score=float(scores[row]), rank=rank)
        for rank, row in enumerate(rows[order].tolist(), start=1)
    ]


def passage_id_tie_rank(passage_ids: Sequence[str]) -> np.ndarray:
    """Position of each passage_id in ascending-id order, for deterministic tie-breaks."""
    tie_rank = np.empty(len(passage_ids), dtype=np.int64)
    for position, row in enumerate(sorted(range(len(passage_ids)), key=passage_ids.__getitem__)):
        tie_rank[row] = position
    return tie_rank


class Bm25Index:
    """Immutable inverted index; postings are (ordinal, tf) numpy pairs sorted by ordinal."""

    def __init__(
        self,
        *,
        vocabulary: dict[str, int],
        postings: list[tuple[np.ndarray, np.ndarray]],
        doc_len: np.ndarray,
        avg_len: float,
        params: Bm25Params,
        passage_ids: Sequence[str],
    ) -> None:
        self.vocabulary = vocabulary
        self.postings = postings
        self.doc_len = doc_len
        self.avg_len = avg_len
        self.params = params
        self.passage_ids = list(passage_ids)
        self.ordinal_of = {passage_id: ordinal for ordinal, passage_id in enumerate(self.passage_ids)}

        k1, b = params.k1, params.b
        denominator = avg_len if avg_len > 0 else 1.0
        self._length_norm = k1 * (1 - b + b * doc_len.astype(np.float64) / denominator)
        self._tie_rank = passage_id_tie_rank(self.passage_ids)

    @property
    def N(self) -> int:  # noqa: N802 - conventional BM25 name
        return len(self.passage_ids)

    def df(self, term: str) -> int:
        term_id = self.vocabulary.get(term)
        return 0 if term_id is None else int(self.postings[term_id][0].size)

    def term_count(self, term: str) -> int:
        term_id = self.vocabulary.get(term)
        return 0 if term_id is None else int(self.postings[term_id][1].sum())

    def score_all(self, query: str) -> np.ndarray:
        k1 = self.params.k1
        scores = np.zeros(self.N, dtype=np.float64)
        for term in dict.fromkeys(tokenize(query)):
            term_id = self.vocabulary.get(term)
            if term_id is None:
                continue
            ordinals, tfs = self.postings[term_id]
            term_idf = idf(self.N, int(ordinals.size))
            scores[ordinals] += term_idf * (tfs * (k1 + 1)) / (tfs + self._length_norm[ordinals])
        return scores

    def search(self, query: str, n: int) -> list[ScoredHit]:
        if n < 1:
            raise InvalidConfig(f"n must be >= 1, got {n}")
        scores = self.score_all(query)
        return rank_hits(self.passage_ids, scores, self._tie_rank, np.flatnonzero(scores > 0), n)


def build_index(passages: Sequence[Passage], params: Bm25Params | None = None) -> Bm25Index:
    if not passages:
        raise EmptyCorpus("build_index requires at least one passage")
    params = params or Bm25Params()

    vocabulary: dict[str, int] = {}
    ordinal_lists: list[list[int]] = []
    tf_lists: list[list[int]] = []
    doc_len = np.zeros(len(passages), dtype=np.int64)

    for ordinal, passage in enumerate(passages):
        tokens = tokenize(passage.text)
        doc_len[ordinal] = len(tokens)
        for term, tf in Counter(tokens).items():
            term_id = vocabulary.get(term)
            if term_id is None:
                term_id = len(vocabulary)
                vocabulary[term] = term_id
                ordinal_lists.append([])
                tf_lists.append([])
            ordinal_lists[term_id].append(ordinal)
            tf_lists[term_id].append(tf)

    postings = [
        (np.asarray(ords, dtype=np.int64), np.asarray(tfs, dtype=np.float64))
        for ords, tfs in zip(ordinal_lists, tf_lists)
    ]
    avg_len = int(doc_len.sum()) / len(passages)
    logger.info("Built BM25 index: N=%d, terms=%d, avg_len=%.2f", len(passages), len(vocabulary), avg_len)
    return Bm25Index(
        vocabulary=vocabulary,
        postings=postings,
        doc_len=doc_len,
        avg_len=avg_len,
        params=params,
        passage_ids=[p.passage_id for p in passages],
    )


def bm25_search(index: Bm25Index, query: str, n: int) -> list[ScoredHit]:
    return index.search(query, n)


# ----------------------------------------------------------------------
# Persistence
# ----------------------------------------------------------------------
def save_index(index: Bm25Index, path: str | Path) -> None:
    """Header line, then one line per passage, then one line per term.

    The checksum is FNV-1a 64 over every byte after the header line.
    """
    body_lines: list[bytes] = []
    for ordinal, passage_id in enumerate(index.passage_ids):
        record = {"ordinal": ordinal, "passage_id": passage_id, "len": int(index.doc_len[ordinal])}
        body_lines.append((json.dumps(record, ensure_ascii=False) + "\n").encode("utf-8"))
    for term, term_id in index.vocabulary.items():
        ordinals, tfs = index.postings[term_id]
        pairs = [[o, int(t)] for o, t in zip(ordinals.tolist(), tfs.tolist())]
        record = {"term": term, "postings": pairs}
        body_lines.append((json.dumps(record, ensure_ascii=False, separators=(",", ":")) + "\n").encode("utf-8"))

    checksum = Fnv1a64()
    for line in body_lines:
        checksum.update(line)

    header = {
        "format_version": INDEX_FORMAT_VERSION,
        "k1": index.params.k1,
        "b": index.params.b,
        "N": index.N,
        "avg_len": index.avg_len,
        "num_terms": len(index.vocabulary),
        "checksum": checksum.hexdigest(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("utf-8"))
        for line in body_lines:
            fh.write(line)


def load_index(path: str | Path) -> Bm25Index:
    path = Path(path)
    data = path.read_bytes()

    header_end = data.find(b"\n")
    if header_end < 0:
        raise CorruptFile(f"{path}: missing index header line")
    try:
        header = json.loads(data[:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable index header") from exc
    if not isinstance(header, dict):
        raise CorruptFile(f"{path}: index header must be an object")

    version = header.get("format_version")
    if version != INDEX_FORMAT_VERSION:
        raise VersionMismatch(f"{path}: index format_version {version!r}, expected {INDEX_FORMAT_VERSION}")

    body = data[header_end + 1 :]
    checksum = Fnv1a64()
    checksum.update(body)
    if checksum.hexdigest() != header.get("checksum"):
        raise CorruptFile(f"{path}: checksum mismatch (file truncated or modified)")

    try:
        num_docs = int(header["N"])
        num_terms = int(header["num_terms"])
        lines = body.decode("utf-8").splitlines()
        if len(lines) != num_docs + num_terms:
            raise CorruptFile(f"{path}: expected {num_docs + num_terms} body lines, found {len(lines)}")

        passage_ids: list[str] = []
        doc_len = np.zeros(num_docs, dtype=np.int64)
        for ordinal, line in enumerate(lines[:num_docs]):
            record = json.loads(line)
            if record["ordinal"] != ordinal:
                raise CorruptFile(f"{path}: passage table out of order at ordinal {ordinal}")
            passage_ids.append(record["passage_id"])
            doc_len[ordinal] = int(record["len"])

        vocabulary: dict[str, int] = {}
        postings: list[tuple[np.ndarray, np.ndarray]] = []
        for line in lines[num_docs:]:
            record = json.loads(line)
            pairs = np.asarray(record["postings"], dtype=np.int64).reshape(-1, 2)
            vocabulary[record["term"]] = len(postings)
            postings.append((pairs[:, 0].copy(), pairs[:, 1].astype(np.float64)))

        params = Bm25Params(k1=float(header["k1"]), b=float(header["b"]))
        avg_len = float(header["avg_len"])
    except CorruptFile:
        raise
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: malformed index body") from exc

    return Bm25Index(
        vocabulary=vocabulary,
        postings=postings,
        doc_len=doc_len,
        avg_len=avg_len,
        params=params,
        passage_ids=passage_ids,
    )
