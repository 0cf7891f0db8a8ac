"""Shapley attributions for trained models.

Attributions use the interventional (marginal-expectation) value function:
v(S) is the model output averaged over background rows with the dims in S
replaced by the explained instance's values. Exact enumeration is available
up to 20 groups and serves as the oracle for the permutation-sampling
estimator used on the full indicator set. Both estimators telescope, so the
attributions plus the base value reproduce the model output exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .corpus import Horizon, ImpactClass
from .indicators import FEATURE_NAMES, N_FEATURES
from .mtl import MtlModel, predict_proba
from .seeding import derive_seed

MAX_EXACT_GROUPS = 20


@dataclass(frozen=True)
class AttributionTarget:
    """Which probability is being explained: class `impact_class` of one task."""

    horizon: Horizon
    impact_class: ImpactClass = ImpactClass.BT


@dataclass(frozen=True)
class BackgroundSet:
    """Reference rows the interventional value function marginalizes over."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] == 0:
            raise ValueError("background must be a non-empty 2-D matrix")
        object.__setattr__(self, "matrix", m)

    @property
    def n_dims(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def sample(cls, X: np.ndarray, size: int = 100, seed: int = 0) -> "BackgroundSet":
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] <= size:
            return cls(matrix=X.copy())
        rng = np.random.default_rng(seed)
        idx = rng.choice(X.shape[0], size=size, replace=False)
        return cls(matrix=X[np.sort(idx)])


@dataclass(frozen=True)
class FeatureGrouping:
    """Named partition of the input dims; attribution is per group."""

    names: tuple[str, ...]
    members: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if len(self.names) != len(self.members):
            raise ValueError("names/members length mismatch")
        seen: set[int] = set()
        for dims in self.members:
            if not dims:
                raise ValueError("empty group")
            overlap = seen & set(dims)
            if overlap:
                raise ValueError(f"dims {sorted(overlap)} appear in multiple groups")
            seen.update(dims)
        object.__setattr__(self, "_covered", frozenset(seen))

    @property
    def n_groups(self) -> int:
        return len(self.names)

    def covers(self, n_dims: int) -> bool:
        return getattr(self, "_covered") == set(range(n_dims))

    @classmethod
    def singletons(cls, names: Sequence[str]) -> "FeatureGrouping":
        return cls(names=tuple(names), members=tuple((i,) for i in range(len(names))))


def default_grouping() -> FeatureGrouping:
    """Scalar indicators stay singleton; each section-frequency block
    (TE_4_A..H, PK_3_A..H) collapses to one named group. 30 groups."""
    names: list[str] = []
    members: list[tuple[int, ...]] = []
    te4 = tuple(i for i, n in enumerate(FEATURE_NAMES) if n.startswith("TE_4_"))
    pk3 = tuple(i for i, n in enumerate(FEATURE_NAMES) if n.startswith("PK_3_"))
    for i, name in enumerate(FEATURE_NAMES):
        if name.startswith("TE_4_"):
            if name == "TE_4_A":
                names.append("TE_4")
                members.append(te4)
        elif name.startswith("PK_3_"):
            if name == "PK_3_A":
                names.append("PK_3")
                members.append(pk3)
        else:
            names.append(name)
            members.append((i,))
    return FeatureGrouping(names=tuple(names), members=tuple(members))


@dataclass(frozen=True)
class AttributionRow:
    """Per-group attributions of one instance toward the target output."""

    instance_id: str
    phi: np.ndarray
    base_value: float
    model_output: float
    group_values: np.ndarray
    std_err: Optional[np.ndarray] = None

    def efficiency_gap(self) -> float:
        return abs(float(self.phi.sum()) + self.base_value - self.model_output)


ModelLike = Union[MtlModel, Callable[[np.ndarray], np.ndarray]]


def _value_fn(model: ModelLike, target: Optional[AttributionTarget]) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(model, MtlModel):
        if target is None:
            raise ValueError("an attribution target is required for trained models")
        return lambda X: predict_proba(model, X, target.horizon)[:, int(target.impact_class)]
    return lambda X: np.asarray(model(X), dtype=np.float64).reshape(-1)


def _group_values(instance: np.ndarray, grouping: FeatureGrouping,
                  display_values: Optional[np.ndarray]) -> np.ndarray:
    source = instance if display_values is None else np.asarray(display_values, dtype=np.float64)
    return np.array([float(source[list(dims)].sum()) for dims in grouping.members])


def shapley_exact(
    model: ModelLike,
    instance: np.ndarray,
    background: BackgroundSet,
    target: Optional[AttributionTarget] = None,
    grouping: Optional[FeatureGrouping] = None,
    instance_id: str = "",
    display_values: Optional[np.ndarray] = None,
) -> AttributionRow:
    """Exact Shapley values by full subset enumeration (<= 20 groups)."""
    instance = np.asarray(instance, dtype=np.float64).reshape(-1)
    if grouping is None:
        grouping = default_grouping() if instance.size == N_FEATURES else FeatureGrouping.singletons(
            [f"x{i}" for i in range(instance.size)]
        )
    g = grouping.n_groups
    if g > MAX_EXACT_GROUPS:
        raise ValueError(f"{g} groups exceeds the exact enumeration bound {MAX_EXACT_GROUPS}")
    f = _value_fn(model, target)
    bg = background.matrix

    # one value-function evaluation per coalition, cached by bitmask
    values = np.empty(1 << g)
    for mask in range(1 << g):
        composite = bg.copy()
        for gi in range(g):
            if mask >> gi & 1:
                dims = list(grouping.members[gi])
                composite[:, dims] = instance[dims]
        values[mask] = float(f(composite).mean())

    fact = [math.factorial(i) for i in range(g + 1)]
    weight_by_size = [fact[s] * fact[g - s - 1] / fact[g] for s in range(g)]
    phi = np.zeros(g)
    for gi in range(g):
        bit = 1 << gi
        for mask in range(1 << g):
            if mask & bit:
                continue
            s = bin(mask).count("1")
            phi[gi] += weight_by_size[s] * (values[mask | bit] - values[mask])

    return AttributionRow(
        instance_id=instance_id,
        phi=phi,
        base_value=float(values[0]),
        model_output=float(values[(1 << g) - 1]),
        group_values=_group_values(instance, grouping, display_values),
    )


def shapley_sampled(
    model: ModelLike,
    instance: np.ndarray,
    background: BackgroundSet,
    target: Optional[AttributionTarget] = None,
    grouping: Optional[FeatureGrouping] = None,
    n_permutations: int = 200,
    seed: int = 0,
    instance_id: str = "",
    display_values: Optional[np.ndarray] = None,
) -> AttributionRow:
    """Permutation-sampling Shapley estimate with Monte-Carlo standard errors.

    Each sampled permutation contributes one marginal-contribution sample per
    group; the estimator is unbiased and deterministic per seed.
    """
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    instance = np.asarray(instance, dtype=np.float64).reshape(-1)
    if grouping is None:
        grouping = default_grouping() if instance.size == N_FEATURES else FeatureGrouping.singletons(
            [f"x{i}" for i in range(instance.size)]
        )
    g = grouping.n_groups
    f = _value_fn(model, target)
    bg = background.matrix
    m = bg.shape[0]
    rng = np.random.default_rng(seed)

    base_value = float(f(bg).mean())
    samples = np.empty((n_permutations, g))
    model_output = base_value
    for p in range(n_permutations):
        order = rng.permutation(g)
        # coalition states after each join, evaluated in one batched call
        composites = np.empty((g, m, bg.shape[1]))
        composite = bg.copy()
        for step, gi in enumerate(order):
            dims = list(grouping.members[gi])
            composite[:, dims] = instance[dims]
            composites[step] = composite
        step_values = f(composites.reshape(g * m, -1)).reshape(g, m).mean(axis=1)
        prev = base_value
        for step, gi in enumerate(order):
            samples[p, gi] = step_values[step] - prev
            prev = step_values[step]
        model_output = float(step_values[-1])

    phi = samples.mean(axis=0)
    if n_permutations > 1:
        std_err = samples.std(axis=0, ddof=1) / math.sqrt(n_permutations)
    else:
        std_err = np.zeros(g)
    return AttributionRow(
        instance_id=instance_id,
        phi=phi,
        base_value=base_value,
        model_output=model_output,
        group_values=_group_values(instance, grouping, display_values),
        std_err=std_err,
    )


def attribute_instances(
    model: ModelLike,
    instances: Mapping[str, np.ndarray],
    background: BackgroundSet,
    target: Optional[AttributionTarget] = None,
    grouping: Optional[FeatureGrouping] = None,
    n_permutations: int = 200,
    seed: int = 0,
    display_values: Optional[Mapping[str, np.ndarray]] = None,
) -> list[AttributionRow]:
    """Sampled attribution per instance; each instance gets an independent
    sub-seed derived from (seed, instance id), so results are order-free."""
    rows = []
    for pid in instances:
        rows.append(
            shapley_sampled(
                model,
                instances[pid],
                background,
                target=target,
                grouping=grouping,
                n_permutations=n_permutations,
                seed=derive_seed(seed, "shapley", pid),
                instance_id=pid,
                display_values=None if display_values is None else display_values.get(pid),
            )
        )
    return rows


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------

def global_importance(
    rows: Sequence[AttributionRow], grouping: FeatureGrouping
) -> list[tuple[str, float]]:
    """Groups ranked by mean |phi| (descending; ties alphabetically)."""
    if not rows:
        raise ValueError("no attribution rows")
    mean_abs = np.mean([np.abs(r.phi) for r in rows], axis=0)
    ranked = sorted(zip(grouping.names, mean_abs), key=lambda kv: (-kv[1], kv[0]))
    return [(name, float(v)) for name, v in ranked]


def group_summary(
    rows: Sequence[AttributionRow],
    grouping: FeatureGrouping,
    instance_labels: Optional[Mapping[str, str]] = None,
    label_filter: Optional[str] = None,
    top_k: int = 10,
) -> tuple[list[tuple[str, float]], list[dict]]:
    """Summary-plot dataset: per-instance (feature value, phi) pairs for the
    top-k groups among rows whose label matches the filter.

    Returns (importance ranking of the filtered rows, record dicts). An empty
    filter result yields empty outputs rather than an error.
    """
    if label_filter is not None:
        if instance_labels is None:
            raise ValueError("label_filter requires instance_labels")
        rows = [r for r in rows if instance_labels.get(r.instance_id) == label_filter]
    if not rows:
        return [], []
    ranking = global_importance(rows, grouping)[:top_k]
    index = {name: grouping.names.index(name) for name, _ in ranking}
    records = []
    for row in rows:
        for name, _ in ranking:
            gi = index[name]
            records.append(
                {
                    "instance_id": row.instance_id,
                    "group": name,
                    "feature_value": float(row.group_values[gi]),
                    "phi": float(row.phi[gi]),
                }
            )
    return ranking, records


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------

def export_group_summary_csv(path, records: Sequence[Mapping]) -> None:
    """Summary-plot dataset rows; header only when the filter matched nothing."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance_id", "group", "feature_value", "phi"])
        for rec in records:
            writer.writerow(
                [
                    rec["instance_id"],
                    rec["group"],
                    repr(float(rec["feature_value"])),
                    repr(float(rec["phi"])),
                ]
            )


def export_attributions_csv(
    path,
    rows: Sequence[AttributionRow],
    grouping: FeatureGrouping,
    target: AttributionTarget,
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "instance_id", "group", "feature_value", "phi", "std_err",
                "base_value", "model_output", "horizon", "class",
            ]
        )
        for row in rows:
            for gi, name in enumerate(grouping.names):
                stderr = "" if row.std_err is None else repr(float(row.std_err[gi]))
                writer.writerow(
                    [
                        row.instance_id,
                        name,
                        repr(float(row.group_values[gi])),
                        repr(float(row.phi[gi])),
                        stderr,
                        repr(row.base_value),
                        repr(row.model_output),
                        target.horizon.key,
                        target.impact_class.name,
                    ]
                )


def _color_for_rank(rank: float) -> str:
    lo = (62, 102, 225)
    hi = (225, 62, 90)
    rgb = tuple(int(round(a + (b - a) * rank)) for a, b in zip(lo, hi))
    return f"rgb({rgb[0]},{rgb[1]},{rgb[2]})"


def render_beeswarm_svg(
    path,
    rows: Sequence[AttributionRow],
    grouping: FeatureGrouping,
    top_k: int = 10,
    title: str = "",
) -> None:
    """Minimal deterministic SVG summary plot.

    One horizontal band per top-ranked group; each marker is one instance,
    x-position by phi, colour by the instance's feature value rank within
    the group (blue low, red high).
    """
    ranking = global_importance(rows, grouping)[: top_k]
    if not ranking:
        raise ValueError("nothing to plot")
    names = [name for name, _ in ranking]
    idx = [grouping.names.index(name) for name in names]
    phis = np.array([[float(r.phi[i]) for i in idx] for r in rows])
    vals = np.array([[float(r.group_values[i]) for i in idx] for r in rows])

    width, row_h, left, right, top = 720, 26, 170, 30, 34
    height = top + row_h * len(names) + 30
    span = max(1e-12, float(np.abs(phis).max()))

    def x_of(phi: float) -> float:
        return left + (phi / span * 0.5 + 0.5) * (width - left - right)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<text x="{left}" y="16" font-size="13">{title}</text>',
        f'<line x1="{x_of(0):.1f}" y1="{top - 8}" x2="{x_of(0):.1f}" y2="{height - 26}" '
        'stroke="#999" stroke-dasharray="3,3"/>',
        f'<text x="{x_of(0):.1f}" y="{height - 10}" text-anchor="middle" fill="#555">0</text>',
        f'<text x="{width - right}" y="{height - 10}" text-anchor="end" fill="#555">'
        f'phi (max |phi| = {span:.4g})</text>',
    ]
    for r_i, name in enumerate(names):
        cy = top + row_h * r_i + row_h / 2
        parts.append(
            f'<text x="{left - 8}" y="{cy + 4:.1f}" text-anchor="end">{name}</text>'
        )
        column = vals[:, r_i]
        order = column.argsort(kind="stable").argsort(kind="stable")
        denom = max(1, len(column) - 1)
        for inst_i, row in enumerate(rows):
            # deterministic per-marker vertical jitter
            jitter = (derive_seed(0, "jitter", row.instance_id, name) % 1000) / 1000.0
            y = cy + (jitter - 0.5) * (row_h - 10)
            color = _color_for_rank(order[inst_i] / denom)
            parts.append(
                f'<circle cx="{x_of(phis[inst_i, r_i]):.2f}" cy="{y:.2f}" r="3" '
                f'fill="{color}" fill-opacity="0.75"/>'
            )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
