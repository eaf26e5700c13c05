from __future__ import annotations

import csv
import io
import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from errors import InvalidConfig, MalformedInput, MalformedRunFile, UnknownQuery

logger = logging.getLogger(__name__)

HITS_VARIANTS = ("micro", "macro")
DEFAULT_HITS_KS = (10, 4)
DEFAULT_RANK_KS = (10,)

Run = dict[str, list[str]]
Qrels = dict[str, set[str]]

METRIC_DEFINITIONS = {
    "hits_micro": "gold pairs found in the query's top-k / total gold pairs (evidence-level recall)",
    "hits_macro": "fraction of queries with at least one gold passage in the top-k",
    "map": "mean over queries of sum(precision@i for gold hits at rank i <= k) / min(|gold|, k)",
    "mrr": "mean over queries of 1/rank of the first gold passage within top-k, else 0",
    "averaging": "over qrels queries with at least one gold passage; a query absent from the run scores 0",
}


# ----------------------------------------------------------------------
# Readers
# ----------------------------------------------------------------------
def read_run_file(path: str | Path) -> tuple[Run, str]:
    """Parse a TREC run file into ``{query_id: [passage_id by rank]}`` plus its run tag."""
    path = Path(path)
    run: Run = {}
    run_tag = ""
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        columns = line.split()
        if len(columns) != 6:
            raise MalformedRunFile(f"{path}:{line_no}: expected 6 columns, found {len(columns)}")
        query_id, _, passage_id, rank_text, score_text, tag = columns
        try:
            rank = int(rank_text)
            float(score_text)
        except ValueError as exc:
            raise MalformedRunFile(f"{path}:{line_no}: rank/score not numeric") from exc
        ranking = run.setdefault(query_id, [])
        if rank != len(ranking) + 1:
            raise MalformedRunFile(
                f"{path}:{line_no}: query {query_id} rank {rank} after rank {len(ranking)} (ranks must be 1, 2, 3, ...)"
            )
        ranking.append(passage_id)
        run_tag = run_tag or tag
    return run, run_tag


def read_qrels(path: str | Path) -> Qrels:
    """``query_id passage_id`` lines; a bare ``query_id`` line marks a query with no gold passages."""
    path = Path(path)
    qrels: Qrels = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        columns = line.split()
        if not columns:
            continue
        if len(columns) == 1:
            qrels.setdefault(columns[0], set())
        elif len(columns) == 2:
            qrels.setdefault(columns[0], set()).add(columns[1])
        else:
            raise MalformedInput(f"{path}:{line_no}: expected 'query_id passage_id', found {len(columns)} columns")
    return qrels


# ----------------------------------------------------------------------
# Metrics
# ----------------------------------------------------------------------
def _check_k(k: int) -> None:
    if k < 1:
        raise InvalidConfig(f"k must be >= 1, got {k}")


def _judged(run: Mapping[str, Sequence[str]], qrels: Mapping[str, set[str]]) -> list[tuple[list[str], set[str]]]:
    unknown = [query_id for query_id in run if query_id not in qrels]
    if unknown:
        raise UnknownQuery(f"run has {len(unknown)} queries missing from qrels, e.g. {unknown[0]}")
    # a gold query the run never answered (failed or dropped) ranks nothing and scores 0
    return [(list(run.get(query_id, ())), gold) for query_id, gold in qrels.items() if gold]


def missing_queries(run: Mapping[str, Sequence[str]], qrels: Mapping[str, set[str]]) -> list[str]:
    """Qrels queries with gold passages that have no ranking in the run."""
    return [query_id for query_id, gold in qrels.items() if gold and query_id not in run]


def _average_precision(ranking: Sequence[str], gold: set[str], k: int) -> float:
    hits = 0
    total = 0.0
    for rank, passage_id in enumerate(ranking[:k], start=1):
        if passage_id in gold:
            hits += 1
            total += hits / rank
    return total / min(len(gold), k)


def _reciprocal_rank(ranking: Sequence[str], gold: set[str], k: int) -> float:
    for rank, passage_id in enumerate(ranking[:k], start=1):
        if passage_id in gold:
            return 1.0 / rank
    return 0.0


def hits_at_k(run: Mapping[str, Sequence[str]], qrels: Mapping[str, set[str]], k: int, variant: str = "micro") -> float:
    _check_k(k)
    if variant not in HITS_VARIANTS:
        raise InvalidConfig(f"Unknown hits variant '{variant}'. Known variants: {list(HITS_VARIANTS)}")
    judged = _judged(run, qrels)
    if not judged:
        return 0.0
    if variant == "macro":
        return sum(1.0 for ranking, gold in judged if gold.intersection(ranking[:k])) / len(judged)
    found = sum(len(gold.intersection(ranking[:k])) for ranking, gold in judged)
    return found / sum(len(gold) for _, gold in judged)


def map_at_k(run: Mapping[str, Sequence[str]], qrels: Mapping[str, set[str]], k: int) -> float:
    _check_k(k)
    judged = _judged(run, qrels)
    if not judged:
        return 0.0
    return sum(_average_precision(ranking, gold, k) for ranking, gold in judged) / len(judged)


def mrr_at_k(run: Mapping[str, Sequence[str]], qrels: Mapping[str, set[str]], k: int) -> float:
    _check_k(k)
    judged = _judged(run, qrels)
    if not judged:
        return 0.0
    return sum(_reciprocal_rank(ranking, gold, k) for ranking, gold in judged) / len(judged)


def hits_label(k: int, variant: str) -> str:
    return f"hits@{k}" if variant == "micro" else f"hits@{k}({variant})"


# ----------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------
@dataclass
class MetricReport:
    run_tag: str
    metrics: dict[str, float]
    num_queries: int
    num_gold: int
    hits_variant: str = "micro"
    definitions: dict[str, str] = field(default_factory=dict)
    per_query: dict[str, dict[str, float]] | None = None
    num_missing: int = 0

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "run_tag": self.run_tag,
            "metrics": self.metrics,
            "num_queries": self.num_queries,
            "num_gold": self.num_gold,
            "num_missing": self.num_missing,
            "hits_variant": self.hits_variant,
            "definitions": self.definitions,
        }
        if self.per_query is not None:
            data["per_query"] = self.per_query
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> MetricReport:
        try:
            return cls(
                run_tag=str(data["run_tag"]),
                metrics={str(k): float(v) for k, v in data["metrics"].items()},
                num_queries=int(data["num_queries"]),
                num_gold=int(data["num_gold"]),
                hits_variant=str(data.get("hits_variant", "micro")),
                definitions=dict(data.get("definitions", {})),
                per_query=data.get("per_query"),
                num_missing=int(data.get("num_missing", 0)),
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise MalformedInput(f"not a metric report: {exc}") from exc


def evaluate_run(
    run: Mapping[str, Sequence[str]],
    qrels: Mapping[str, set[str]],
    *,
    run_tag: str = "",
    hits_ks: Sequence[int] = DEFAULT_HITS_KS,
    rank_ks: Sequence[int] = DEFAULT_RANK_KS,
    hits_variant: str = "micro",
    per_query: bool = False,
) -> MetricReport:
    judged = _judged(run, qrels)
    metrics: dict[str, float] = {}
    for k in hits_ks:
        metrics[hits_label(k, hits_variant)] = hits_at_k(run, qrels, k, hits_variant)
    for k in rank_ks:
        metrics[f"map@{k}"] = map_at_k(run, qrels, k)
    for k in rank_ks:
        metrics[f"mrr@{k}"] = mrr_at_k(run, qrels, k)

    definitions = {
        "hits": METRIC_DEFINITIONS[f"hits_{hits_variant}"],
        "map": METRIC_DEFINITIONS["map"],
        "mrr": METRIC_DEFINITIONS["mrr"],
        "averaging": METRIC_DEFINITIONS["averaging"],
    }

    breakdown: dict[str, dict[str, float]] | None = None
    if per_query:
        breakdown = {}
        for query_id, gold in qrels.items():
            if not gold:
                continue
            ranking = list(run.get(query_id, ()))
            row: dict[str, float] = {}
            for k in hits_ks:
                found = len(gold.intersection(ranking[:k]))
                row[hits_label(k, hits_variant)] = found / len(gold) if hits_variant == "micro" else float(found > 0)
            for k in rank_ks:
                row[f"map@{k}"] = _average_precision(ranking, gold, k)
                row[f"mrr@{k}"] = _reciprocal_rank(ranking, gold, k)
            breakdown[query_id] = row

    no_gold = sum(1 for query_id in run if not qrels[query_id])
    if no_gold:
        logger.info("%d run queries have no gold passages and are excluded from averages", no_gold)
    missing = missing_queries(run, qrels)
    if missing:
        logger.warning(
            "%d judged queries are missing from run %r and score 0, e.g. %s", len(missing), run_tag, missing[0]
        )

    return MetricReport(
        run_tag=run_tag,
        metrics=metrics,
        num_queries=len(judged),
        num_gold=sum(len(gold) for _, gold in judged),
        hits_variant=hits_variant,
        definitions=definitions,
        per_query=breakdown,
        num_missing=len(missing),
    )


def evaluate(
    run_path: str | Path,
    qrels: Mapping[str, set[str]] | str | Path,
    ks: Sequence[int] = DEFAULT_HITS_KS,
    *,
    rank_ks: Sequence[int] = DEFAULT_RANK_KS,
    hits_variant: str = "micro",
    per_query: bool = False,
) -> MetricReport:
    run, run_tag = read_run_file(run_path)
    if not isinstance(qrels, Mapping):
        qrels = read_qrels(qrels)
    return evaluate_run(
        run,
        qrels,
        run_tag=run_tag or Path(run_path).stem,
        hits_ks=ks,
        rank_ks=rank_ks,
        hits_variant=hits_variant,
        per_query=per_query,
    )


def write_report(path: str | Path, report: MetricReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_report(path: str | Path) -> MetricReport:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedInput(f"{path}: invalid JSON ({exc.msg})") from exc
    return MetricReport.from_dict(data)


# ----------------------------------------------------------------------
# Comparison tables
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class ComparisonTable:
    text: str
    csv: str


def compare(reports: Sequence[MetricReport]) -> ComparisonTable:
    """Render reports side by side, values x100 with 2 decimals; ``*`` marks each column's best."""
    if not reports:
        raise InvalidConfig("compare requires at least one report")

    columns: list[str] = []
    for report in reports:
        for name in report.metrics:
            if name not in columns:
                columns.append(name)

    best = {
        name: max(report.metrics[name] for report in reports if name in report.metrics)
        for name in columns
    }

    def cell(report: MetricReport, name: str) -> str:
        if name not in report.metrics:
            return "-"
        value = report.metrics[name]
        mark = "*" if value == best[name] else ""
        return f"{value * 100:.2f}{mark}"

    header = ["run", *columns]
    rows = [[report.run_tag, *(cell(report, name) for name in columns)] for report in reports]
    widths = [max(len(row[i]) for row in [header, *rows]) for i in range(len(header))]
    lines = [
        "  ".join(value.ljust(widths[i]) if i == 0 else value.rjust(widths[i]) for i, value in enumerate(row)).rstrip()
        for row in [header, *rows]
    ]

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for report in reports:
        writer.writerow(
            [report.run_tag, *(f"{report.metrics[name] * 100:.2f}" if name in report.metrics else "" for name in columns)]
        )

    return ComparisonTable(text="\n".join(lines) + "\n", csv=buffer.getvalue())
