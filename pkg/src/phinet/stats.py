"""Accuracy, confusion matrices and McNemar's paired test."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class Accuracy:
    correct: int
    total: int

    @property
    def fraction(self) -> float:
        return self.correct / self.total

    @property
    def errors(self) -> int:
        return self.total - self.correct

    @property
    def percent(self) -> str:
        return format_percent(self.fraction)


def format_percent(fraction: float) -> str:
    """Two-decimal percentage, e.g. 0.992665 -> '99.27%'."""
    return f"{100 * fraction:.2f}%"


def accuracy(predictions, labels) -> Accuracy:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    if p.size == 0:
        raise ValueError("accuracy of an empty set")
    return Accuracy(int(np.sum(p == y)), int(p.size))


def mean_accuracy(percents: Sequence[float]) -> str:
    """Mean of already-rounded percentage accuracies, formatted like the inputs."""
    if not percents:
        raise ValueError("no accuracies to average")
    return f"{sum(percents) / len(percents):.2f}%"


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    classes: List[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def correct(self) -> int:
        return int(np.trace(self.counts))

    @property
    def accuracy(self) -> float:
        return self.correct / self.total

    def per_class_accuracy(self) -> dict:
        rows = self.counts.sum(axis=1)
        return {c: (float(self.counts[i, i] / rows[i]) if rows[i] else None) for i, c in enumerate(self.classes)}


def confusion_matrix(predictions, labels, k: int, classes: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise ValueError("length mismatch")
    if p.size and (p.min() < 0 or y.min() < 0 or p.max() >= k or y.max() >= k):
        raise ValueError(f"class index out of range [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (y, p), 1)
    names = list(classes) if classes is not None else [str(i) for i in range(k)]
    return ConfusionMatrix(counts, names)


# ---------------------------------------------------------------- McNemar


@dataclass(frozen=True)
class McNemarResult:
    b: int
    c: int
    statistic: float
    p_chi2: float
    p_exact: float

    def to_dict(self) -> dict:
        return {"b": self.b, "c": self.c, "statistic": self.statistic, "p_chi2": self.p_chi2, "p_exact": self.p_exact}


def chi2_sf_1df(x: float) -> float:
    """Survival function of the 1-df chi-square distribution: erfc(sqrt(x/2))."""
    if x <= 0:
        return 1.0
    return math.erfc(math.sqrt(x / 2))


def exact_binomial_p(b: int, c: int) -> float:
    """Two-sided exact p: min(1, 2 P(X <= min(b, c))), X ~ Binomial(b + c, 1/2)."""
    n = b + c
    if n == 0:
        return 1.0
    tail = sum(math.comb(n, i) for i in range(min(b, c) + 1))
    return float(min(Fraction(1), Fraction(2 * tail, 2 ** n)))


def mcnemar_test(correct_a, correct_b) -> McNemarResult:
    """Paired comparison from per-item correctness of methods A and B.

    b counts items A got wrong and B got right; c the reverse.
    """
    a = np.asarray(correct_a, dtype=bool)
    bb = np.asarray(correct_b, dtype=bool)
    if a.shape != bb.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {bb.shape}")
    if a.size == 0:
        raise ValueError("mcnemar_test needs at least one item")
    b = int(np.sum(~a & bb))
    c = int(np.sum(a & ~bb))
    return mcnemar_from_counts(b, c)


def mcnemar_from_counts(b: int, c: int) -> McNemarResult:
    if b < 0 or c < 0:
        raise ValueError("discordant counts must be non-negative")
    stat = (abs(b - c) - 1) ** 2 / (b + c) if b + c > 0 else 0.0
    return McNemarResult(b, c, float(stat), chi2_sf_1df(stat), exact_binomial_p(b, c))


# ---------------------------------------------------------------- reports


def evaluation_report(predictions, labels, classes: Sequence[str]) -> dict:
    acc = accuracy(predictions, labels)
    cm = confusion_matrix(predictions, labels, len(classes), classes)
    return {
        "accuracy": acc.fraction,
        "correct": acc.correct,
        "total": acc.total,
        "errors": acc.errors,
        "confusion": cm.counts.tolist(),
        "per_class_accuracy": cm.per_class_accuracy(),
        "classes": list(classes),
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True)


def format_table(reports: dict) -> str:
    """Aligned text table with rows Accuracy / # Correct Predictions / # Errors, one column per method."""
    names = list(reports)
    rows = [
        ("Accuracy", [format_percent(r["accuracy"]) for r in reports.values()]),
        ("# Correct Predictions", [f"{r['correct']}/{r['total']}" for r in reports.values()]),
        ("# Errors", [f"{r['errors']}/{r['total']}" for r in reports.values()]),
    ]
    label_w = max(len(r[0]) for r in rows)
    col_w = [max(len(n), *(len(r[1][i]) for r in rows)) for i, n in enumerate(names)]
    lines = [" " * label_w + " | " + " | ".join(n.rjust(w) for n, w in zip(names, col_w))]
    lines.append("-" * len(lines[0]))
    for label, cells in rows:
        lines.append(label.ljust(label_w) + " | " + " | ".join(c.rjust(w) for c, w in zip(cells, col_w)))
    return "\n".join(lines)
