"""Post-hoc validation: ordered-trend tests and topic-level impact scores.

The Jonckheere–Terpstra statistic sums pairwise Mann–Whitney counts (ties
count 0.5) over class-ordered groups MT < VT < BT. Significance comes from
the tie-corrected normal approximation or a seeded permutation of group
membership. Topic impact scores are class-weighted averages per
(topic, grant-year) cell.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .corpus import Corpus, ImpactClass

CLASS_ORDERED = (ImpactClass.MT, ImpactClass.VT, ImpactClass.BT)

VALUE_INDICATORS = ("maintenance_years", "transfer_count", "family_size")

DEFAULT_TOPIC_WEIGHTS: dict[ImpactClass, float] = {
    ImpactClass.BT: 10.0,
    ImpactClass.VT: 5.0,
    ImpactClass.MT: 1.0,
}


@dataclass(frozen=True)
class OrderedGroups:
    """Observations split by ordered class, lowest first."""

    groups: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        arrays = tuple(np.asarray(g, dtype=np.float64).reshape(-1) for g in self.groups)
        if len(arrays) < 2:
            raise ValueError("need at least 2 groups")
        for i, g in enumerate(arrays):
            if g.size == 0:
                raise ValueError(f"group {i} is empty")
        object.__setattr__(self, "groups", arrays)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(g.size for g in self.groups)

    def pooled(self) -> np.ndarray:
        return np.concatenate(self.groups)


@dataclass(frozen=True)
class JTResult:
    jt_statistic: float
    mean_h0: float
    variance_h0: float
    z: float
    p_value: float
    method: str  # "normal_approx" | "permutation"
    alternative: str = "increasing"
    n_permutations: Optional[int] = None


def _pair_count(lower: np.ndarray, upper: np.ndarray) -> float:
    """#(a < b) + 0.5 #(a == b) over a in lower, b in upper."""
    lower_sorted = np.sort(lower)
    strictly_less = np.searchsorted(lower_sorted, upper, side="left")
    less_or_equal = np.searchsorted(lower_sorted, upper, side="right")
    return float(strictly_less.sum()) + 0.5 * float((less_or_equal - strictly_less).sum())


def jt_statistic(groups: Sequence[np.ndarray]) -> float:
    total = 0.0
    for i in range(len(groups)):
        for j in range(i + 1, len(groups)):
            total += _pair_count(np.asarray(groups[i]), np.asarray(groups[j]))
    return total


def _null_moments(sizes: Sequence[int], pooled: np.ndarray) -> tuple[float, float]:
    """Mean and tie-corrected variance of the statistic under no trend."""
    n_total = sum(sizes)
    mean = (n_total**2 - sum(s**2 for s in sizes)) / 4.0
    _, tie_counts = np.unique(pooled, return_counts=True)
    t = tie_counts.astype(np.float64)
    n = float(n_total)
    sizes_f = np.array(sizes, dtype=np.float64)
    a = (
        n * (n - 1) * (2 * n + 5)
        - float(np.sum(sizes_f * (sizes_f - 1) * (2 * sizes_f + 5)))
        - float(np.sum(t * (t - 1) * (2 * t + 5)))
    )
    b = float(np.sum(sizes_f * (sizes_f - 1) * (sizes_f - 2))) * float(
        np.sum(t * (t - 1) * (t - 2))
    )
    c = float(np.sum(sizes_f * (sizes_f - 1))) * float(np.sum(t * (t - 1)))
    variance = a / 72.0
    if n > 2:
        variance += b / (36.0 * n * (n - 1) * (n - 2))
    variance += c / (8.0 * n * (n - 1))
    return mean, variance


def _upper_tail_p(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def jonckheere_terpstra(
    groups: OrderedGroups,
    method: str = "normal_approx",
    seed: int = 0,
    n_permutations: int = 10_000,
) -> JTResult:
    """One-sided (increasing) ordered-trend test across the groups.

    Permutation mode reassigns pooled observations to same-sized groups and
    uses p = (1 + #{JT_perm >= JT_obs}) / (1 + n_permutations).
    """
    observed = jt_statistic(groups.groups)
    pooled = groups.pooled()
    mean, variance = _null_moments(groups.sizes, pooled)

    if method == "normal_approx":
        if variance <= 0:
            raise ValueError(
                "degenerate null variance (all observations tied); use permutation"
            )
        z = (observed - mean) / math.sqrt(variance)
        return JTResult(
            jt_statistic=observed,
            mean_h0=mean,
            variance_h0=variance,
            z=z,
            p_value=_upper_tail_p(z),
            method="normal_approx",
        )
    if method != "permutation":
        raise ValueError(f"unknown method {method!r}")

    rng = np.random.default_rng(seed)
    sizes = groups.sizes
    bounds = np.cumsum(sizes)[:-1]
    at_least = 0
    for _ in range(n_permutations):
        shuffled = rng.permutation(pooled)
        perm_groups = np.split(shuffled, bounds)
        if jt_statistic(perm_groups) >= observed:
            at_least += 1
    p = (1 + at_least) / (1 + n_permutations)
    z = (observed - mean) / math.sqrt(variance) if variance > 0 else 0.0
    return JTResult(
        jt_statistic=observed,
        mean_h0=mean,
        variance_h0=variance,
        z=z,
        p_value=p,
        method="permutation",
        n_permutations=n_permutations,
    )


# --------------------------------------------------------------------------
# value-indicator validation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class IndicatorValidation:
    indicator: str
    result: JTResult
    n_excluded: int
    group_sizes: tuple[int, ...]


def validate_value_indicators(
    corpus: Corpus,
    classes: Mapping[str, ImpactClass],
    method: str = "normal_approx",
    seed: int = 0,
    n_permutations: int = 10_000,
) -> dict[str, IndicatorValidation]:
    """Trend test for each post-hoc value indicator, groups ordered MT<VT<BT.

    Patents without post-hoc fields are excluded (counted, never imputed).
    Raises if any class group ends up empty.
    """
    if not classes:
        raise ValueError("no classified patents to validate")
    out: dict[str, IndicatorValidation] = {}
    for indicator in VALUE_INDICATORS:
        values: dict[ImpactClass, list[float]] = {c: [] for c in CLASS_ORDERED}
        excluded = 0
        for pid, cls in classes.items():
            rec = corpus.get(pid)
            if rec.post_hoc is None:
                excluded += 1
                continue
            values[cls].append(float(getattr(rec.post_hoc, indicator)))
        empty = [c.name for c in CLASS_ORDERED if not values[c]]
        if empty:
            raise ValueError(
                f"{indicator}: empty class group(s) {empty} after {excluded} exclusion(s)"
            )
        groups = OrderedGroups(tuple(np.array(values[c]) for c in CLASS_ORDERED))
        result = jonckheere_terpstra(
            groups, method=method, seed=seed, n_permutations=n_permutations
        )
        out[indicator] = IndicatorValidation(
            indicator=indicator,
            result=result,
            n_excluded=excluded,
            group_sizes=groups.sizes,
        )
    return out


def export_validation_csv(
    path, per_horizon: Mapping[str, Mapping[str, IndicatorValidation]]
) -> None:
    """CSV rows: horizon, indicator, jt_statistic, z, p_value, method, n_excluded."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["horizon", "indicator", "jt_statistic", "z", "p_value", "method", "n_excluded"]
        )
        for horizon_key, validations in per_horizon.items():
            for indicator in VALUE_INDICATORS:
                if indicator not in validations:
                    continue
                v = validations[indicator]
                writer.writerow(
                    [
                        horizon_key,
                        indicator,
                        repr(v.result.jt_statistic),
                        repr(v.result.z),
                        repr(v.result.p_value),
                        v.result.method,
                        v.n_excluded,
                    ]
                )


# --------------------------------------------------------------------------
# topic impact scores
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TopicScoreTable:
    """score and patent count per (topic, grant year) cell."""

    scores: dict[tuple[str, int], float]
    counts: dict[tuple[str, int], int]

    def topics(self) -> list[str]:
        return sorted({t for t, _ in self.scores})

    def years(self) -> list[int]:
        return sorted({y for _, y in self.scores})


def topic_impact_scores(
    corpus: Corpus,
    classes: Mapping[str, ImpactClass],
    weights: Optional[Mapping[ImpactClass, float]] = None,
) -> TopicScoreTable:
    """Mean class weight over each topic's patents granted in each year.

    With default weights (BT 10, VT 5, MT 1) a cell of all-moderate patents
    scores exactly 1 and scores are bounded by [1, 10].
    """
    weights = dict(DEFAULT_TOPIC_WEIGHTS if weights is None else weights)
    totals: dict[tuple[str, int], float] = {}
    counts: dict[tuple[str, int], int] = {}
    for pid, cls in classes.items():
        rec = corpus.get(pid)
        if rec.topic_label is None:
            continue
        key = (rec.topic_label, rec.grant_date.year)
        totals[key] = totals.get(key, 0.0) + weights[cls]
        counts[key] = counts.get(key, 0) + 1
    if not counts:
        raise ValueError("no patents with topic labels among the classified set")
    scores = {key: totals[key] / counts[key] for key in totals}
    return TopicScoreTable(scores=scores, counts=counts)


def export_topic_scores_csv(path, table: TopicScoreTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["topic", "year", "n_patents", "score"])
        for topic, year in sorted(table.scores):
            writer.writerow(
                [topic, year, table.counts[(topic, year)], repr(table.scores[(topic, year)])]
            )


def export_topic_scores_json(path, table: TopicScoreTable) -> None:
    """Pivot: topic -> year -> score."""
    pivot: dict[str, dict[str, float]] = {}
    for (topic, year), score in sorted(table.scores.items()):
        pivot.setdefault(topic, {})[str(year)] = score
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(pivot, fh, indent=2, sort_keys=True)
        fh.write("\n")
