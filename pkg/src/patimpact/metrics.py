"""Three-class evaluation: confusion matrices, one-vs-rest metrics, folds.

Degenerate denominators never raise; they produce flagged conventional
values: precision/recall 0, MCC 0, DOR +inf when only the numerator is
positive and NaN when both products vanish.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import HORIZONS, Horizon, ImpactClass

log = logging.getLogger(__name__)

CLASS_ORDER = (ImpactClass.MT, ImpactClass.VT, ImpactClass.BT)


@dataclass(frozen=True)
class ConfusionMatrix3:
    """counts[actual][predicted] over classes ordered MT, VT, BT."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.counts, dtype=np.int64)
        if c.shape != (3, 3) or (c < 0).any():
            raise ValueError("confusion matrix must be 3x3 with non-negative counts")
        object.__setattr__(self, "counts", c)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def one_vs_rest(self, cls: ImpactClass) -> tuple[int, int, int, int]:
        """(TP, FP, FN, TN) for the class against the other two."""
        i = int(cls)
        tp = int(self.counts[i, i])
        fp = int(self.counts[:, i].sum()) - tp
        fn = int(self.counts[i, :].sum()) - tp
        tn = self.n - tp - fp - fn
        return tp, fp, fn, tn


def confusion_matrix(
    pairs: Iterable[tuple[ImpactClass, ImpactClass]]
) -> ConfusionMatrix3:
    """Tally (actual, predicted) pairs; input order is irrelevant."""
    counts = np.zeros((3, 3), dtype=np.int64)
    empty = True
    for actual, predicted in pairs:
        counts[int(actual), int(predicted)] += 1
        empty = False
    if empty:
        raise ValueError("cannot build a confusion matrix from no pairs")
    return ConfusionMatrix3(counts=counts)


@dataclass(frozen=True)
class ClassMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    mcc: float
    dor: float  # may be +inf; NaN when undefined
    flags: frozenset[str] = frozenset()

    def as_dict(self) -> dict[str, float]:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "mcc": self.mcc,
            "dor": self.dor,
        }


def _safe_div(num: float, den: float, flags: set[str], flag: str) -> float:
    if den == 0:
        flags.add(flag)
        return 0.0
    return num / den


def binary_metrics(tp: int, fp: int, fn: int, tn: int) -> ClassMetrics:
    """One-vs-rest metrics from the four binary counts."""
    n = tp + fp + fn + tn
    if n < 1:
        raise ValueError("metrics need at least one instance")
    flags: set[str] = set()
    accuracy = (tp + tn) / n
    precision = _safe_div(tp, tp + fp, flags, "precision_undefined")
    recall = _safe_div(tp, tp + fn, flags, "recall_undefined")
    f1 = _safe_div(2 * tp, 2 * tp + fp + fn, flags, "f1_undefined")

    mcc_den_sq = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if mcc_den_sq == 0:
        flags.add("mcc_undefined")
        mcc = 0.0
    else:
        mcc = (tp * tn - fp * fn) / math.sqrt(mcc_den_sq)

    pos = tp * tn
    neg = fp * fn
    if neg == 0 and pos > 0:
        flags.add("dor_infinite")
        dor = math.inf
    elif neg == 0 and pos == 0:
        flags.add("dor_undefined")
        dor = math.nan
    else:
        dor = pos / neg

    return ClassMetrics(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        mcc=mcc,
        dor=dor,
        flags=frozenset(flags),
    )


def class_metrics(
    cm: ConfusionMatrix3, cls: ImpactClass, haldane: bool = False
) -> ClassMetrics:
    """Metrics for one class in one-vs-rest reduction.

    ``haldane`` adds 0.5 to every binary cell (smoothing for DOR with empty
    cells); off by default.
    """
    tp, fp, fn, tn = cm.one_vs_rest(cls)
    if haldane:
        counts = np.array([tp, fp, fn, tn], dtype=np.float64) + 0.5
        n = counts.sum()
        tp_, fp_, fn_, tn_ = counts
        precision = tp_ / (tp_ + fp_)
        recall = tp_ / (tp_ + fn_)
        return ClassMetrics(
            accuracy=(tp_ + tn_) / n,
            precision=precision,
            recall=recall,
            f1=2 * tp_ / (2 * tp_ + fp_ + fn_),
            mcc=(tp_ * tn_ - fp_ * fn_)
            / math.sqrt((tp_ + fp_) * (tp_ + fn_) * (tn_ + fp_) * (tn_ + fn_)),
            dor=(tp_ * tn_) / (fp_ * fn_),
            flags=frozenset({"haldane"}),
        )
    return binary_metrics(tp, fp, fn, tn)


def macro_dor(dors: Sequence[float]) -> tuple[float, frozenset[str]]:
    """Average diagnostic odds ratios: any infinite value makes the macro
    infinite (flagged); undefined (NaN) values are skipped (flagged)."""
    flags: set[str] = set()
    finite = []
    for d in dors:
        if math.isnan(d):
            flags.add("dor_undefined_skipped")
        elif math.isinf(d):
            flags.add("dor_infinite")
        else:
            finite.append(d)
    if "dor_infinite" in flags:
        return math.inf, frozenset(flags)
    if not finite:
        flags.add("dor_undefined")
        return math.nan, frozenset(flags)
    return sum(finite) / len(finite), frozenset(flags)


def multiclass_mcc(cm: ConfusionMatrix3) -> tuple[float, frozenset[str]]:
    """Gorodkin's multi-class correlation; 0 (flagged) when degenerate."""
    c = cm.counts.astype(np.float64)
    n = c.sum()
    trace = np.trace(c)
    row = c.sum(axis=1)
    col = c.sum(axis=0)
    num = trace * n - float(row @ col)
    den_sq = (n * n - float(row @ row)) * (n * n - float(col @ col))
    if den_sq <= 0:
        return 0.0, frozenset({"mcc_undefined"})
    return float(num / math.sqrt(den_sq)), frozenset()


@dataclass(frozen=True)
class OverallMetrics:
    """Macro-averaged one-vs-rest metrics plus the two whole-matrix scores."""

    macro: ClassMetrics
    micro_accuracy: float
    multiclass_mcc: float
    flags: frozenset[str] = frozenset()


def overall_metrics(cm: ConfusionMatrix3) -> OverallMetrics:
    per_class = [class_metrics(cm, cls) for cls in CLASS_ORDER]
    dor, dor_flags = macro_dor([m.dor for m in per_class])
    macro = ClassMetrics(
        accuracy=sum(m.accuracy for m in per_class) / 3,
        precision=sum(m.precision for m in per_class) / 3,
        recall=sum(m.recall for m in per_class) / 3,
        f1=sum(m.f1 for m in per_class) / 3,
        mcc=sum(m.mcc for m in per_class) / 3,
        dor=dor,
        flags=dor_flags,
    )
    mmcc, mmcc_flags = multiclass_mcc(cm)
    return OverallMetrics(
        macro=macro,
        micro_accuracy=float(np.trace(cm.counts) / cm.n),
        multiclass_mcc=mmcc,
        flags=frozenset(mmcc_flags | dor_flags),
    )


# --------------------------------------------------------------------------
# stratified folds
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldAssignment:
    """Fold index per instance (positional), plus the stratification labels."""

    fold_of: np.ndarray
    labels: tuple[ImpactClass, ...]
    k: int

    def fold_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == fold)

    def splits(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(train_idx, test_idx) per fold."""
        out = []
        for f in range(self.k):
            test = self.fold_indices(f)
            train = np.flatnonzero(self.fold_of != f)
            out.append((train, test))
        return out


def stratified_kfold(
    labels: Sequence[ImpactClass], k: int, seed: int
) -> FoldAssignment:
    """Round-robin fold assignment within each class after a seeded shuffle.

    Rotating the starting fold between classes keeps total fold sizes within
    one instance of each other while per-class counts stay within one of the
    ideal proportion. If the rarest class has fewer than k members, k is
    downgraded to that count (with a warning).
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    labels = tuple(labels)
    if not labels:
        raise ValueError("no labels to fold")
    class_members: dict[ImpactClass, list[int]] = {}
    for idx, lab in enumerate(labels):
        class_members.setdefault(lab, []).append(idx)
    min_count = min(len(m) for m in class_members.values())
    if min_count < k:
        if min_count < 2:
            raise ValueError(
                f"rarest class has {min_count} member(s); stratified folding impossible"
            )
        log.warning("downgrading k from %d to %d (rarest class size)", k, min_count)
        k = min_count

    rng = np.random.default_rng(seed)
    fold_of = np.full(len(labels), -1, dtype=np.int64)
    offset = 0
    for cls in CLASS_ORDER:
        members = class_members.get(cls)
        if not members:
            continue
        order = rng.permutation(len(members))
        for j, pos in enumerate(order):
            fold_of[members[pos]] = (offset + j) % k
        offset = (offset + len(members)) % k
    return FoldAssignment(fold_of=fold_of, labels=labels, k=k)


# --------------------------------------------------------------------------
# model comparison
# --------------------------------------------------------------------------

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "mcc", "dor")


@dataclass(frozen=True)
class ComparisonCell:
    metric: str
    cls: str
    value: float
    delta: float  # challenger minus reference


def compare_models(
    reference_cm: dict[Horizon, ConfusionMatrix3],
    challenger_cm: dict[Horizon, ConfusionMatrix3],
) -> dict[Horizon, list[ComparisonCell]]:
    """Per-horizon challenger metrics with deltas against the reference.

    Matches the usual ablation-table layout: each cell holds the challenger
    value and (challenger - reference) in parentheses.
    """
    if set(reference_cm) != set(challenger_cm):
        raise ValueError("mismatched horizons between models")
    out: dict[Horizon, list[ComparisonCell]] = {}
    for horizon in reference_cm:
        ref_cm = reference_cm[horizon]
        cha_cm = challenger_cm[horizon]
        cells = []
        for cls in CLASS_ORDER:
            ref = class_metrics(ref_cm, cls).as_dict()
            cha = class_metrics(cha_cm, cls).as_dict()
            for metric in METRIC_NAMES:
                cells.append(
                    ComparisonCell(
                        metric=metric,
                        cls=cls.name,
                        value=cha[metric],
                        delta=cha[metric] - ref[metric],
                    )
                )
        ref_all = overall_metrics(ref_cm)
        cha_all = overall_metrics(cha_cm)
        for metric in METRIC_NAMES:
            cells.append(
                ComparisonCell(
                    metric=metric,
                    cls="overall",
                    value=getattr(cha_all.macro, metric),
                    delta=getattr(cha_all.macro, metric) - getattr(ref_all.macro, metric),
                )
            )
        out[horizon] = cells
    return out


# --------------------------------------------------------------------------
# report export
# --------------------------------------------------------------------------

def metrics_rows(
    per_horizon: dict[Horizon, ConfusionMatrix3]
) -> list[tuple[str, str, str, float]]:
    """Flatten to (horizon, class, metric, value) rows for CSV/JSON export."""
    rows: list[tuple[str, str, str, float]] = []
    for horizon in HORIZONS:
        if horizon not in per_horizon:
            continue
        cm = per_horizon[horizon]
        for cls in CLASS_ORDER:
            for metric, value in class_metrics(cm, cls).as_dict().items():
                rows.append((horizon.key, cls.name, metric, value))
        om = overall_metrics(cm)
        for metric, value in om.macro.as_dict().items():
            rows.append((horizon.key, "overall_macro", metric, value))
        rows.append((horizon.key, "overall_micro", "accuracy", om.micro_accuracy))
        rows.append((horizon.key, "overall_multiclass", "mcc", om.multiclass_mcc))
    return rows


def export_metrics_csv(path, per_horizon: dict[Horizon, ConfusionMatrix3]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["horizon", "class", "metric", "value"])
        for row in metrics_rows(per_horizon):
            writer.writerow([row[0], row[1], row[2], repr(float(row[3]))])


def export_metrics_json(path, per_horizon: dict[Horizon, ConfusionMatrix3]) -> None:
    """Same rows as the CSV, as horizon -> class -> metric -> value."""
    tree: dict[str, dict[str, dict[str, float]]] = {}
    for horizon, cls, metric, value in metrics_rows(per_horizon):
        tree.setdefault(horizon, {}).setdefault(cls, {})[metric] = float(value)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(tree, fh, indent=2, sort_keys=True)
        fh.write("\n")


def export_comparison_csv(
    path, comparison: dict[Horizon, list[ComparisonCell]]
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["horizon", "class", "metric", "value", "delta_vs_reference"])
        for horizon in HORIZONS:
            if horizon not in comparison:
                continue
            for cell in comparison[horizon]:
                writer.writerow(
                    [
                        horizon.key,
                        cell.cls,
                        cell.metric,
                        repr(float(cell.value)),
                        repr(float(cell.delta)),
                    ]
                )


def confusion_from_predictions(
    actual: Sequence[ImpactClass], predicted: Sequence[ImpactClass]
) -> ConfusionMatrix3:
    if len(actual) != len(predicted):
        raise ValueError("actual/predicted length mismatch")
    return confusion_matrix(zip(actual, predicted))
