"""
Metrics: confusion matrices, accuracy/recall, and identification FAR/FRR.

Identification scoring is per query. An unregistered query that matches any
identity is a false accept; a registered query left unmatched is a false
reject; a registered query matched to somebody else is a misidentification,
reported separately and counted against accuracy but not in FAR/FRR.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .backends import Embedding, GAZE_REGION_NAMES, mock_embedding
from .identity import DEFAULT_THRESHOLDS, IdentityDB, enroll, identify


class MetricError(ValueError):
    """Metric undefined for the given input (e.g. an empty denominator)."""


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions; classes are 1-based."""

    counts: np.ndarray
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        n = self.counts.shape[0]
        if self.counts.shape != (n, n):
            raise MetricError("confusion matrix must be square")
        if not self.class_names:
            self.class_names = tuple(str(i) for i in range(1, n + 1))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(pairs: Iterable[tuple[int, int]], n_classes: int = 9, class_names=()) -> ConfusionMatrix:
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    for truth, pred in pairs:
        if not (1 <= truth <= n_classes and 1 <= pred <= n_classes):
            raise MetricError(f"class pair ({truth}, {pred}) outside 1..{n_classes}")
        counts[truth - 1, pred - 1] += 1
    return ConfusionMatrix(counts, tuple(class_names))


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise MetricError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm.counts)) / cm.total


def recall(cm: ConfusionMatrix, positive_class: int) -> float:
    row = cm.counts[positive_class - 1]
    if row.sum() == 0:
        raise MetricError(f"class {positive_class} has no ground-truth samples")
    return float(row[positive_class - 1]) / float(row.sum())


def per_class_recall(cm: ConfusionMatrix) -> list[float | None]:
    return [recall(cm, c) if cm.counts[c - 1].sum() else None for c in range(1, cm.n_classes + 1)]


def gaze_confusion(pairs, n_classes: int = 9) -> ConfusionMatrix:
    names = tuple(GAZE_REGION_NAMES.get(i, str(i)) for i in range(1, n_classes + 1))
    return confusion(pairs, n_classes, names)


def confusion_csv(cm: ConfusionMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["truth\\pred", *cm.class_names])
    for name, row in zip(cm.class_names, cm.counts):
        w.writerow([name, *(int(v) for v in row)])
    return buf.getvalue()


def confusion_table(cm: ConfusionMatrix) -> str:
    width = max(6, *(len(n) for n in cm.class_names))
    lines = [" " * width + " " + " ".join(f"{n[:width]:>{width}}" for n in cm.class_names)]
    for name, row in zip(cm.class_names, cm.counts):
        lines.append(f"{name:>{width}} " + " ".join(f"{int(v):>{width}}" for v in row))
    return "\n".join(lines)


# --------------------------------------------------------------------------
# identification


@dataclass
class IdTrialSet:
    db: IdentityDB
    registered: list[tuple[str, list[Embedding]]]
    unregistered: list[tuple[str, list[Embedding]]]

    def __post_init__(self):
        names = {r.name for r in self.db}
        missing = [label for label, _ in self.registered if label not in names]
        if missing:
            raise MetricError(f"registered labels absent from database: {missing}")
        present = [label for label, _ in self.unregistered if label in names]
        if present:
            raise MetricError(f"unregistered labels present in database: {present}")

    @property
    def n_registered_queries(self) -> int:
        return sum(len(q) for _, q in self.registered)

    @property
    def n_unregistered_queries(self) -> int:
        return sum(len(q) for _, q in self.unregistered)


@dataclass
class IdMetrics:
    accuracy: float
    far: float
    frr: float
    misid_rate: float
    false_accepts: int
    false_rejects: int
    misidentifications: int
    correct: int
    registered_queries: int
    unregistered_queries: int
    thresholds: dict = field(default_factory=dict)


def evaluate_identification(trials: IdTrialSet, rgb_threshold: float = DEFAULT_THRESHOLDS["rgb"],
                            ir_threshold: float = DEFAULT_THRESHOLDS["ir"]) -> IdMetrics:
    n_reg, n_unreg = trials.n_registered_queries, trials.n_unregistered_queries
    if n_reg == 0 or n_unreg == 0:
        raise MetricError("need at least one registered and one unregistered query")
    thresholds = {"rgb": rgb_threshold, "ir": ir_threshold}
    name_of = {r.id: r.name for r in trials.db}

    fa = fr = mis = correct = 0
    for label, queries in trials.registered:
        for q in queries:
            res = identify(trials.db, q, thresholds[q.modality])
            if not res.matched:
                fr += 1
            elif name_of[res.id] == label:
                correct += 1
            else:
                mis += 1
    for _, queries in trials.unregistered:
        for q in queries:
            if identify(trials.db, q, thresholds[q.modality]).matched:
                fa += 1
            else:
                correct += 1
    return IdMetrics(
        accuracy=correct / (n_reg + n_unreg),
        far=fa / n_unreg,
        frr=fr / n_reg,
        misid_rate=mis / n_reg,
        false_accepts=fa,
        false_rejects=fr,
        misidentifications=mis,
        correct=correct,
        registered_queries=n_reg,
        unregistered_queries=n_unreg,
        thresholds=thresholds,
    )


@dataclass(frozen=True)
class SweepPoint:
    threshold: float
    far: float
    frr: float
    misid_rate: float
    accuracy: float


def sweep_threshold(trials: IdTrialSet, modality: str, thresholds: Sequence[float]) -> list[SweepPoint]:
    """Evaluate at each threshold for ``modality``; the other modality keeps its default."""
    thresholds = list(thresholds)
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise MetricError("thresholds must be sorted ascending")
    points = []
    for t in thresholds:
        kw = {"rgb_threshold": t} if modality == "rgb" else {"ir_threshold": t}
        m = evaluate_identification(trials, **kw)
        points.append(SweepPoint(t, m.far, m.frr, m.misid_rate, m.accuracy))
    return points


def metrics_csv(points: Iterable[SweepPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "far", "frr", "misid", "accuracy"])
    for p in points:
        w.writerow([repr(p.threshold), repr(p.far), repr(p.frr), repr(p.misid_rate), repr(p.accuracy)])
    return buf.getvalue()


def metrics_table(points: Iterable[SweepPoint]) -> str:
    lines = [f"{'threshold':>9} {'FAR':>8} {'FRR':>8} {'misid':>8} {'acc':>8}"]
    for p in points:
        lines.append(
            f"{p.threshold:>9.4f} {p.far:>8.2%} {p.frr:>8.2%} {p.misid_rate:>8.2%} {p.accuracy:>8.2%}"
        )
    return "\n".join(lines)


def synthetic_trials(n_registered: int = 15, n_unregistered: int = 10, queries: int = 20,
                     enroll_captures: int = 3, dim: int = 128, noise: float = 0.05,
                     modality: str = "rgb", seed: int = 0) -> IdTrialSet:
    """Mock-embedding trial set shaped like a registered/unregistered identification test.

    Identity seeds are ``seed + i`` for registered people and
    ``seed + 10_000 + j`` for unregistered ones. Enrollment uses noise
    samples ``0..enroll_captures-1``; queries use samples from 1000 upward.
    """
    db = IdentityDB(dim)
    registered, unregistered = [], []
    for i in range(n_registered):
        s = seed + i
        label = f"person-{s}"
        captures = [mock_embedding(s, dim, noise, k, modality) for k in range(enroll_captures)]
        enroll(db, label, captures, min_rgb_captures=0)
        registered.append((label, [mock_embedding(s, dim, noise, 1000 + k, modality) for k in range(queries)]))
    for j in range(n_unregistered):
        s = seed + 10_000 + j
        unregistered.append(
            (f"person-{s}", [mock_embedding(s, dim, noise, 1000 + k, modality) for k in range(queries)])
        )
    return IdTrialSet(db, registered, unregistered)


# trial-file format: "<registered|unregistered> <label> <modality> v1 ... vD" per line


def parse_trials(text: str, db: IdentityDB) -> IdTrialSet:
    groups: dict[str, dict[str, list[Embedding]]] = {"registered": {}, "unregistered": {}}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 4 or parts[0] not in groups:
            raise MetricError(f"line {lineno}: expected '<registered|unregistered> <label> <modality> <values...>'")
        try:
            emb = Embedding(np.array([float(v) for v in parts[3:]]), parts[2])
        except ValueError as exc:
            raise MetricError(f"line {lineno}: {exc}") from None
        groups[parts[0]].setdefault(parts[1], []).append(emb)
    return IdTrialSet(db, list(groups["registered"].items()), list(groups["unregistered"].items()))
