"""Score extracted rules against ground truth and tally value validity.

Rules match on the (descriptor identity, rule kind, canonical rule) triple:
constraint expressions are canonicalized, example sets compared order-
insensitively, numbers compared by value. Whole rules either match or they
do not; there is no partial credit. Value-validity accounting follows the
two-tier scheme (syntactically valid / semantically valid) with judgments
recorded per value in a CSV, and reports both a macro (per-service) and a
micro (per-value) average, which differ whenever services contribute
different numbers of judged values.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from . import constraint_dsl
from .rule_extractor import (
    Examples,
    ExtractedRule,
    OperationalConstraint,
    ParameterConstraint,
    TypeFormat,
    rule_from_json,
    rule_to_json,
)

logger = logging.getLogger(__name__)


class DatasetError(Exception):
    """A ground-truth or judgment file violates its schema."""


# ---------------------------------------------------------------------------
# Canonical signatures and ground truth
# ---------------------------------------------------------------------------

def _norm_number(value):
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, (int, float)):
        return float(value)
    return value


def _value_sort_key(value):
    return (type(value).__name__, repr(value))


def rule_service(rule: ExtractedRule) -> str:
    if isinstance(rule, OperationalConstraint):
        return rule.scope.service
    return rule.target.service


def rule_signature(rule: ExtractedRule) -> tuple:
    """Canonical identity of a rule, the unit of TP matching."""
    if isinstance(rule, OperationalConstraint):
        return ("operational", rule.scope.service, rule.scope.path,
                rule.scope.method, constraint_dsl.canonical_text(rule.expr))
    base = (rule.kind, rule.target.service, rule.target.path,
            rule.target.method, rule.target.name)
    if isinstance(rule, ParameterConstraint):
        return base + (_norm_number(rule.min), _norm_number(rule.max),
                       _norm_number(rule.default))
    if isinstance(rule, TypeFormat):
        return base + (rule.type, rule.items, rule.format, rule.collection_format)
    if isinstance(rule, Examples):
        values = tuple(sorted((_norm_number(v) for v in rule.values),
                              key=_value_sort_key))
        return base + (rule.exhaustive, values)
    raise TypeError(f"not an extracted rule: {rule!r}")


@dataclass(frozen=True)
class GroundTruthEntry:
    service: str
    rule: ExtractedRule


def load_ground_truth(path: str | Path) -> list[GroundTruthEntry]:
    """JSONL ground truth, one entry per line: {"service": ..., "rule": {...}}.

    A flat record (rule fields at top level, as written by rule_to_json) is
    accepted too. The file must be non-empty.
    """
    entries: list[GroundTruthEntry] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                if "rule" in record:
                    service = record.get("service", "")
                    rule_data = dict(record["rule"])
                    rule_data.setdefault("service", service)
                else:
                    rule_data = record
                    service = record.get("service", "")
                rule = rule_from_json(rule_data)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError,
                    constraint_dsl.DslError) as exc:
                raise DatasetError(
                    f"{path}: bad ground-truth entry at line {lineno}: {exc}") from exc
            entries.append(GroundTruthEntry(service or rule_service(rule), rule))
    if not entries:
        raise DatasetError(f"{path}: ground truth is empty")
    return entries


def write_ground_truth(path: str | Path, entries: Iterable[GroundTruthEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            record = {"service": entry.service, "rule": rule_to_json(entry.rule)}
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Counts and metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalCounts:
    tp: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    def __add__(self, other: "EvalCounts") -> "EvalCounts":
        return EvalCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class EvalMetrics:
    precision: float | None
    recall: float | None
    f1: float | None


def compare_rules(extracted: Sequence[ExtractedRule],
                  truth: Sequence[GroundTruthEntry]) -> EvalCounts:
    """TP/FP/FN under canonical-signature equality.

    Each ground-truth entry matches at most one extracted rule; extracted
    duplicates are collapsed before counting. Duplicate ground-truth entries
    are a dataset error.
    """
    truth_signatures: set[tuple] = set()
    for entry in truth:
        signature = rule_signature(entry.rule)
        if signature in truth_signatures:
            raise DatasetError(f"duplicate ground-truth entry: {signature}")
        truth_signatures.add(signature)
    extracted_signatures = {rule_signature(rule) for rule in extracted}
    tp = len(extracted_signatures & truth_signatures)
    return EvalCounts(
        tp=tp,
        fp=len(extracted_signatures) - tp,
        fn=len(truth_signatures) - tp,
    )


def compute_metrics(counts: EvalCounts) -> EvalMetrics:
    """Precision/recall/F1 ratios; None encodes undefined, never a crash."""
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else None
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else None
    f1 = None
    if precision is not None and recall is not None and precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    return EvalMetrics(precision, recall, f1)


def percent(ratio: float | None) -> int | None:
    """Nearest-integer percent, halves rounded up (display convention)."""
    if ratio is None:
        return None
    return int(math.floor(ratio * 100 + 0.5))


def percent_text(ratio: float | None) -> str:
    value = percent(ratio)
    return "N/A" if value is None else f"{value}%"


# ---------------------------------------------------------------------------
# Per-service evaluation report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ServiceEval:
    service: str
    truth_size: int
    counts: EvalCounts
    metrics: EvalMetrics


@dataclass(frozen=True)
class EvalReport:
    services: tuple[ServiceEval, ...]
    total: ServiceEval

    def to_json(self) -> dict:
        def row(entry: ServiceEval) -> dict:
            return {
                "rules_in_ground_truth": entry.truth_size,
                "tp": entry.counts.tp, "fp": entry.counts.fp, "fn": entry.counts.fn,
                "precision": entry.metrics.precision,
                "recall": entry.metrics.recall,
                "f1": entry.metrics.f1,
                "precision_pct": percent(entry.metrics.precision),
                "recall_pct": percent(entry.metrics.recall),
                "f1_pct": percent(entry.metrics.f1),
            }
        return {"services": {e.service: row(e) for e in self.services},
                "total": row(self.total)}

    def to_markdown(self) -> str:
        lines = [
            "| Service | Rules in Ground Truth | TP | FP | FN | Precision | Recall | F1 |",
            "|---|---|---|---|---|---|---|---|",
        ]
        for entry in list(self.services) + [self.total]:
            metrics = entry.metrics
            lines.append(
                f"| {entry.service} | {entry.truth_size} | {entry.counts.tp} | "
                f"{entry.counts.fp} | {entry.counts.fn} | "
                f"{percent_text(metrics.precision)} | {percent_text(metrics.recall)} | "
                f"{percent_text(metrics.f1)} |")
        return "\n".join(lines)


def evaluate(extracted: Sequence[ExtractedRule],
             truth: Sequence[GroundTruthEntry]) -> EvalReport:
    """Per-service counts/metrics plus an aggregate Total row."""
    by_service_truth: dict[str, list[GroundTruthEntry]] = {}
    for entry in truth:
        by_service_truth.setdefault(entry.service, []).append(entry)
    by_service_extracted: dict[str, list[ExtractedRule]] = {}
    for rule in extracted:
        by_service_extracted.setdefault(rule_service(rule), []).append(rule)

    services = sorted(set(by_service_truth) | set(by_service_extracted))
    rows: list[ServiceEval] = []
    total_counts = EvalCounts(0, 0, 0)
    for service in services:
        counts = compare_rules(by_service_extracted.get(service, ()),
                               by_service_truth.get(service, ()))
        total_counts = total_counts + counts
        rows.append(ServiceEval(service, len(by_service_truth.get(service, ())),
                                counts, compute_metrics(counts)))
    total = ServiceEval("Total", sum(r.truth_size for r in rows), total_counts,
                        compute_metrics(total_counts))
    return EvalReport(tuple(rows), total)


# ---------------------------------------------------------------------------
# Value sampling and validity accounting
# ---------------------------------------------------------------------------

def sample_values(values: Sequence, n: int = 10, seed: int = 0) -> list:
    """At most ``n`` values for judging: all of them (order preserved) when the
    pool is small, otherwise a uniform seed-deterministic sample without
    replacement."""
    if n <= 0:
        raise ValueError("n must be positive")
    pool = list(values)
    if len(pool) <= n:
        return pool
    return random.Random(seed).sample(pool, n)


@dataclass(frozen=True)
class ValueJudgment:
    service: str
    path: str
    method: str
    parameter: str
    value: str
    syntactic_valid: bool
    semantic_valid: bool
    judge: str = ""

    def __post_init__(self):
        if self.semantic_valid and not self.syntactic_valid:
            raise ValueError(
                "a semantically valid value must also be syntactically valid")


_TRUTHY = {"1", "true", "yes", "y"}
_FALSY = {"0", "false", "no", "n", ""}


def _parse_bool(raw: str, column: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in _TRUTHY:
        return True
    if lowered in _FALSY:
        return False
    raise ValueError(f"column {column!r} has non-boolean value {raw!r}")


JUDGMENT_COLUMNS = ("service", "path", "method", "parameter", "value",
                    "syntactic", "semantic", "judge")


def load_judgments_csv(path: str | Path) -> list[ValueJudgment]:
    judgments: list[ValueJudgment] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in JUDGMENT_COLUMNS[:7] if c not in (reader.fieldnames or ())]
        if missing:
            raise DatasetError(f"{path}: missing judgment columns: {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                judgments.append(ValueJudgment(
                    service=row["service"],
                    path=row["path"],
                    method=row["method"],
                    parameter=row["parameter"],
                    value=row["value"],
                    syntactic_valid=_parse_bool(row["syntactic"], "syntactic"),
                    semantic_valid=_parse_bool(row["semantic"], "semantic"),
                    judge=row.get("judge", "") or "",
                ))
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}: bad judgment at line {lineno}: {exc}") \
                    from exc
    return judgments


@dataclass(frozen=True)
class ServiceAccuracy:
    service: str
    judged: int
    semantic_valid: int
    syntactic_valid: int

    @property
    def accuracy(self) -> float:
        """Semantically-valid fraction as a percentage, 2-decimal precision."""
        return round(100.0 * self.semantic_valid / self.judged, 2)

    @property
    def syntactic_accuracy(self) -> float:
        return round(100.0 * self.syntactic_valid / self.judged, 2)


@dataclass(frozen=True)
class AccuracyReport:
    services: tuple[ServiceAccuracy, ...]
    macro_average: float  # mean of per-service accuracies (equal service weight)
    micro_average: float  # over all judged values (equal value weight)

    def to_json(self) -> dict:
        return {
            "services": {
                s.service: {"judged": s.judged, "semantic_valid": s.semantic_valid,
                            "syntactic_valid": s.syntactic_valid,
                            "accuracy_pct": s.accuracy,
                            "syntactic_accuracy_pct": s.syntactic_accuracy}
                for s in self.services},
            "macro_average_pct": self.macro_average,
            "micro_average_pct": self.micro_average,
        }

    def to_markdown(self) -> str:
        lines = ["| Service | Judged | Accuracy |", "|---|---|---|"]
        for s in self.services:
            lines.append(f"| {s.service} | {s.judged} | {s.accuracy:.2f}% |")
        lines.append("")
        lines.append(f"Macro average (each service weighted equally): "
                     f"{self.macro_average:.2f}%")
        lines.append(f"Micro average (each judged value weighted equally): "
                     f"{self.micro_average:.2f}%")
        lines.append(
            "The two averages differ whenever services contribute different "
            "numbers of judged values; a single reported \"average\" may follow "
            "either convention, so both are given here.")
        return "\n".join(lines)


def accuracy_report(judgments: Sequence[ValueJudgment]) -> AccuracyReport:
    """Per-service semantic-validity accuracy plus macro and micro averages.

    The macro average is the arithmetic mean of the per-service accuracies as
    emitted (2-decimal percent); the micro average weights every judged value
    equally. Services with zero judgments are excluded with a warning.
    """
    grouped: dict[str, list[ValueJudgment]] = {}
    for judgment in judgments:
        grouped.setdefault(judgment.service, []).append(judgment)
    rows: list[ServiceAccuracy] = []
    for service in sorted(grouped):
        group = grouped[service]
        if not group:
            logger.warning("service %r has no judgments; excluded", service)
            continue
        rows.append(ServiceAccuracy(
            service=service,
            judged=len(group),
            semantic_valid=sum(1 for j in group if j.semantic_valid),
            syntactic_valid=sum(1 for j in group if j.syntactic_valid),
        ))
    if not rows:
        raise DatasetError("no judgments to report on")
    macro = round(sum(row.accuracy for row in rows) / len(rows), 2)
    total = sum(row.judged for row in rows)
    valid = sum(row.semantic_valid for row in rows)
    micro = round(100.0 * valid / total, 2)
    return AccuracyReport(tuple(rows), macro, micro)
