from __future__ import annotations

import math
import random
from collections import Counter
from pathlib import Path

import pytest

from corpus import Passage
from errors import CorruptFile, EmptyCorpus, InvalidConfig, VersionMismatch
from sparse_index import Bm25Params, build_index, bm25_search, idf, load_index, save_index, tokenize

VOCAB = [f"t{i}" for i in range(30)]


def _passages(texts: list[str]) -> list[Passage]:
    return [Passage(passage_id=f"p{i:03d}", doc_id=f"d{i}", text=text, position=0) for i, text in enumerate(texts)]


def _exhaustive_scores(passages: list[Passage], query: str, k1: float = 1.2, b: float = 0.75) -> dict[str, float]:
    """Textbook BM25 evaluated term by term, passage by passage."""
    docs = [tokenize(p.text) for p in passages]
    n = len(docs)
    avg = sum(len(d) for d in docs) / n
    scores: dict[str, float] = {}
    for passage, tokens in zip(passages, docs):
        counts = Counter(tokens)
        total = 0.0
        for term in dict.fromkeys(tokenize(query)):
            tf = counts.get(term, 0)
            if tf == 0:
                continue
            df = sum(1 for d in docs if term in d)
            term_idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
            norm = k1 * (1 - b + b * len(tokens) / avg)
            total += term_idf * (tf * (k1 + 1)) / (tf + norm)
        scores[passage.passage_id] = total
    return scores


def _oracle_ranking(scores: dict[str, float], n: int) -> list[str]:
    positive = [(pid, s) for pid, s in scores.items() if s > 0]
    return [pid for pid, _ in sorted(positive, key=lambda item: (-item[1], item[0]))][:n]


@pytest.mark.parametrize(
    ("text", "expected"),
    [
        ("Hello, World!", ["hello", "world"]),
        ("e5-base-v2 model", ["e5", "base", "v2", "model"]),
        ("  ", []),
        ("Café au lait", ["café", "au", "lait"]),
        ("Zürich café São Paulo", ["zürich", "café", "são", "paulo"]),
        ("snake_case token", ["snake", "case", "token"]),
    ],
)
def test_tokenize(text: str, expected: list[str]) -> None:
    assert tokenize(text) == expected


def test_idf_is_positive_even_for_common_terms() -> None:
    assert idf(10, 10) > 0
    assert idf(10, 1) > idf(10, 5)


def test_idf_rare_term_in_three_passages() -> None:
    assert idf(3, 1) == pytest.approx(0.98083, abs=1e-5)


def test_build_counts_document_frequencies() -> None:
    index = build_index(_passages(["cat sat", "dog ran", "cat ran"]))

    assert index.N == 3
    assert (index.df("cat"), index.df("ran"), index.df("sat"), index.df("dog")) == (2, 2, 1, 1)
    assert index.df("bird") == 0
    assert index.avg_len == 2
    assert index.doc_len.tolist() == [2, 2, 2]


def test_single_passage_average_is_its_length() -> None:
    index = build_index(_passages(["one two three four"]))

    assert index.N == 1
    assert index.avg_len == 4


def test_postings_agree_with_independent_counts() -> None:
    rng = random.Random(7)
    texts = [" ".join(rng.choice(VOCAB) for _ in range(rng.randint(0, 15))) for _ in range(100)]

    index = build_index(_passages(texts))

    counts = Counter(word for text in texts for word in text.split())
    assert set(index.vocabulary) == set(counts)
    for term, count in counts.items():
        assert index.term_count(term) == count
        assert index.df(term) == sum(1 for text in texts if term in text.split())
    for ordinals, tfs in index.postings:
        assert (ordinals[1:] > ordinals[:-1]).all()
        assert (tfs >= 1).all()
    assert index.avg_len == pytest.approx(sum(len(text.split()) for text in texts) / 100, abs=1e-9)


def test_results_ignore_input_passage_order() -> None:
    rng = random.Random(11)
    for _ in range(20):
        # few terms and short passages so most scores tie
        texts = [" ".join(rng.choice(VOCAB[:4]) for _ in range(rng.randint(1, 3))) for _ in range(40)]
        passages = _passages(texts)
        shuffled = list(passages)
        rng.shuffle(shuffled)
        query = " ".join(rng.sample(VOCAB[:4], rng.randint(1, 2)))

        assert bm25_search(build_index(shuffled), query, 15) == bm25_search(build_index(passages), query, 15)


def test_extra_query_term_occurrence_never_lowers_score() -> None:
    rng = random.Random(23)
    for _ in range(100):
        texts = [" ".join(rng.choice(VOCAB[:8]) for _ in range(rng.randint(1, 10))) for _ in range(rng.randint(1, 30))]
        row = rng.randrange(len(texts))
        term = rng.choice(VOCAB[:8])
        before = build_index(_passages(texts)).score_all(term)[row]

        texts[row] = f"{texts[row]} {term}"
        after = build_index(_passages(texts)).score_all(term)[row]

        assert after >= before - 1e-12


def test_bm25_matches_exhaustive_scorer_on_random_corpora() -> None:
    rng = random.Random(20240501)
    for _ in range(50):
        size = rng.randint(1, 200)
        texts = [" ".join(rng.choice(VOCAB) for _ in range(rng.randint(1, 12))) for _ in range(size)]
        passages = _passages(texts)
        index = build_index(passages)
        query = " ".join(rng.choice(VOCAB) for _ in range(rng.randint(1, 5)))
        n = rng.randint(1, 20)

        expected = _exhaustive_scores(passages, query)
        hits = bm25_search(index, query, n)

        assert [h.passage_id for h in hits] == _oracle_ranking(expected, n)
        for hit in hits:
            assert hit.score == pytest.approx(expected[hit.passage_id], abs=1e-9)
        assert [h.rank for h in hits] == list(range(1, len(hits) + 1))


def test_worked_example_single_term() -> None:
    index = build_index(_passages(["cat", "dog", "cat cat"]))

    hits = bm25_search(index, "cat", 3)

    assert [h.passage_id for h in hits] == ["p002", "p000"]
    assert hits[0].score > hits[1].score > 0


def test_ties_break_by_ascending_passage_id() -> None:
    passages = [
        Passage("zeta", "d0", "apple pie", 0),
        Passage("alpha", "d1", "apple pie", 0),
        Passage("mid", "d2", "apple pie", 0),
    ]

    hits = bm25_search(build_index(passages), "apple", 3)

    assert [h.passage_id for h in hits] == ["alpha", "mid", "zeta"]


def test_no_shared_terms_returns_empty(small_passages: list[Passage]) -> None:
    assert bm25_search(build_index(small_passages), "zebra", 5) == []


def test_repeated_query_terms_count_once(small_passages: list[Passage]) -> None:
    index = build_index(small_passages)

    assert bm25_search(index, "cat cat cat", 5) == bm25_search(index, "cat", 5)


def test_n_larger_than_corpus_returns_all_positive(small_passages: list[Passage]) -> None:
    hits = bm25_search(build_index(small_passages), "the", 100)

    assert {h.passage_id for h in hits} == {"p0", "p1", "p4"}


def test_empty_corpus_and_bad_params() -> None:
    with pytest.raises(EmptyCorpus):
        build_index([])
    with pytest.raises(InvalidConfig):
        Bm25Params(k1=0.0)
    with pytest.raises(InvalidConfig):
        Bm25Params(b=1.5)


def test_single_empty_passage_gives_empty_results() -> None:
    index = build_index(_passages(["..."]))

    assert index.avg_len == 0
    assert bm25_search(index, "anything", 5) == []


def test_save_load_reproduces_scores_bit_for_bit(tmp_path: Path, small_passages: list[Passage]) -> None:
    index = build_index(small_passages, Bm25Params(k1=0.9, b=0.4))
    save_index(index, tmp_path / "bm25.idx")

    loaded = load_index(tmp_path / "bm25.idx")

    for query in ("cat", "the mat", "harbor dawn", "prices rose"):
        assert bm25_search(loaded, query, 5) == bm25_search(index, query, 5)
    assert loaded.params == Bm25Params(k1=0.9, b=0.4)
    assert loaded.df("the") == index.df("the") == 3


def test_load_detects_truncation(tmp_path: Path, small_passages: list[Passage]) -> None:
    path = tmp_path / "bm25.idx"
    save_index(build_index(small_passages), path)
    path.write_bytes(path.read_bytes()[:-10])

    with pytest.raises(CorruptFile):
        load_index(path)


def test_load_checks_version_before_checksum(tmp_path: Path, small_passages: list[Passage]) -> None:
    path = tmp_path / "bm25.idx"
    save_index(build_index(small_passages), path)
    data = path.read_bytes().replace(b'"format_version": 1', b'"format_version": 99', 1)
    path.write_bytes(data[:-5])

    with pytest.raises(VersionMismatch):
        load_index(path)
