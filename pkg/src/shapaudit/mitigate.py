"""Calibrated post-processing that withholds predictions for part of one group.

The lower-cost group's predictions are replaced by its base rate for a fraction
``alpha`` of its members, which raises its weighted FP/FN cost to match the
other group. Members are chosen either uniformly at random or by the
attribution quadrant rule in :func:`find_individuals`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
from scipy.special import expit, logit

METHODS = ("random", "quadrant")
DISTANCE_KINDS = ("shap_only", "non_protected")
TABLE_METRICS = ("accuracy", "fp_cost", "fn_cost", "base_rate", "avg_score")


class InfeasibleError(ValueError):
    """The target cost cannot be reached by mixing with the base rate."""


@dataclass(frozen=True)
class CostSpec:
    w_fp: float = 1.0
    w_fn: float = 1.0

    def __post_init__(self):
        if self.w_fp < 0 or self.w_fn < 0 or self.w_fp + self.w_fn <= 0:
            raise ValueError("cost weights must be non-negative and not both zero")

    def of(self, c_fp: float, c_fn: float) -> float:
        return self.w_fp * c_fp + self.w_fn * c_fn

    def of_base_rate(self, mu: float) -> float:
        # predicting mu everywhere costs mu on negatives and 1 - mu on positives
        return self.of(mu, 1.0 - mu)


@dataclass(frozen=True)
class GroupStats:
    group: Any
    n: int
    base_rate: float
    c_fp: float
    c_fn: float
    accuracy: float
    avg_score: float

    def cost(self, cost: CostSpec) -> float:
        return cost.of(self.c_fp, self.c_fn)

    def metric(self, name: str) -> float:
        return {"accuracy": self.accuracy, "fp_cost": self.c_fp, "fn_cost": self.c_fn,
                "base_rate": self.base_rate, "avg_score": self.avg_score}[name]

    def to_dict(self) -> dict[str, Any]:
        return {"group": self.group, "n": self.n, "base_rate": self.base_rate, "fp_cost": self.c_fp,
                "fn_cost": self.c_fn, "accuracy": self.accuracy, "avg_score": self.avg_score}


def group_stats(scores, labels, groups, group_values: Sequence[Any]) -> dict[Any, GroupStats]:
    """Generalized (soft) error costs per group.

    ``c_fp`` is the mean score over true negatives and ``c_fn`` the mean of
    ``1 - score`` over true positives; accuracy thresholds at 0.5.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    g = np.asarray(groups)
    out = {}
    for t in group_values:
        m = g == t
        ys, ss = y[m], s[m]
        if not ((ys == 0).any() and (ys == 1).any()):
            raise ValueError(f"group {t!r} needs both outcomes present")
        out[t] = GroupStats(
            group=t,
            n=int(m.sum()),
            base_rate=float(ys.mean()),
            c_fp=float(ss[ys == 0].mean()),
            c_fn=float((1.0 - ss[ys == 1]).mean()),
            accuracy=float(np.mean((ss >= 0.5) == (ys == 1))),
            avg_score=float(ss.mean()),
        )
    return out


def mixing_alpha(cost_h: float, cost_mu: float, target: float, tol: float = 1e-12) -> float:
    """Solve ``(1 - a) * cost_h + a * cost_mu = target`` for ``a`` in [0, 1]."""
    if abs(target - cost_h) <= tol:
        return 0.0
    if cost_mu == cost_h:
        raise InfeasibleError(f"target cost {target:.6g} unreachable: classifier and base-rate costs "
                              f"both {cost_h:.6g}")
    a = (target - cost_h) / (cost_mu - cost_h)
    if a < -tol or a > 1 + tol:
        raise InfeasibleError(f"target cost {target:.6g} outside [{min(cost_h, cost_mu):.6g}, "
                              f"{max(cost_h, cost_mu):.6g}] (classifier cost {cost_h:.6g}, "
                              f"base-rate cost {cost_mu:.6g})")
    return float(min(1.0, max(0.0, a)))


def compute_alpha(low: GroupStats, target: float, cost: CostSpec) -> float:
    return mixing_alpha(low.cost(cost), cost.of_base_rate(low.base_rate), target)


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def n_selected(alpha: float, n_t: int) -> int:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return min(n_t, round_half_away(alpha * n_t))


def random_select(group_rows, alpha: float, seed: int) -> np.ndarray:
    """Uniform random subset of ``round(alpha * n_t)`` rows, returned sorted."""
    rows = np.asarray(group_rows, dtype=np.int64)
    n = n_selected(alpha, len(rows))
    picked = np.random.default_rng(seed).choice(rows, size=n, replace=False)
    return np.sort(picked)


@dataclass(frozen=True)
class QuadrantPoint:
    row: int
    shap: float
    pred: float
    quadrant: int
    distance: float


def quadrants(shap, pred, mu_t: float) -> np.ndarray:
    """Quadrant 1..4 of each point about the origin ``(0, mu_t)``.

    A zero attribution counts as negative and a prediction equal to the base
    rate counts as below it, so boundary points never land in quadrant 1.
    """
    positive = np.asarray(shap, dtype=np.float64) > 0
    high = np.asarray(pred, dtype=np.float64) > mu_t
    return np.select([positive & high, ~positive & high, ~positive & ~high], [1, 2, 3], default=4)


def quadrant_partition(shap, pred, mu_t: float) -> dict[int, np.ndarray]:
    q = quadrants(shap, pred, mu_t)
    return {k: np.flatnonzero(q == k) for k in (1, 2, 3, 4)}


def protected_contribution_in_pred_space(shap, pred, objective: str = "squared") -> np.ndarray:
    """Map a raw-space attribution to its effect on the prediction.

    For a logistic model this is ``sigmoid(raw) - sigmoid(raw - shap)`` with
    ``raw = logit(pred)``; for an identity link it is ``shap`` itself.
    """
    shap = np.asarray(shap, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if objective == "squared":
        return shap.copy()
    if objective == "logistic":
        raw = logit(np.clip(pred, 1e-12, 1 - 1e-12))
        return pred - expit(raw - shap)
    raise ValueError(f"unknown objective {objective!r}")


def distance(shap, pred, mu_t: float, kind: str = "shap_only", objective: str = "squared") -> np.ndarray:
    """Selection distance of each point from the quadrant origin."""
    shap = np.asarray(shap, dtype=np.float64)
    if kind == "shap_only":
        return np.abs(shap)
    if kind == "non_protected":
        pred = np.asarray(pred, dtype=np.float64)
        return np.abs((pred - mu_t) - protected_contribution_in_pred_space(shap, pred, objective))
    raise ValueError(f"unknown distance kind {kind!r}; expected one of {DISTANCE_KINDS}")


def quadrant_points(shap, pred, mu_t: float, kind: str = "shap_only", objective: str = "squared",
                    rows: Sequence[int] | None = None) -> list[QuadrantPoint]:
    q = quadrants(shap, pred, mu_t)
    d = distance(shap, pred, mu_t, kind, objective)
    rows = range(len(q)) if rows is None else rows
    return [QuadrantPoint(int(r), float(s), float(p), int(k), float(x))
            for r, s, p, k, x in zip(rows, np.asarray(shap), np.asarray(pred), q, d)]


def find_individuals(shap, pred, alpha: float, mu_t: float, kind: str = "shap_only",
                     objective: str = "squared", rows: Sequence[int] | None = None) -> np.ndarray:
    """Choose ``round(alpha * n_t)`` group members whose predictions go to the base rate.

    Largest-distance points of quadrants 1 and 3 are taken first; any remainder
    comes from the smallest-distance points of quadrants 2 and 4. Ties go to the
    lower row index. Returns the selected row indices in selection order.
    """
    shap = np.asarray(shap, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if shap.shape != pred.shape:
        raise ValueError("shap and pred must have the same length")
    rows = np.arange(len(shap)) if rows is None else np.asarray(rows, dtype=np.int64)
    n = n_selected(alpha, len(shap))
    q = quadrants(shap, pred, mu_t)
    d = distance(shap, pred, mu_t, kind, objective)

    affected = np.flatnonzero((q == 1) | (q == 3))
    first = affected[np.lexsort((rows[affected], -d[affected]))][:n]
    rest = np.flatnonzero((q == 2) | (q == 4))
    second = rest[np.lexsort((rows[rest], d[rest]))][: n - len(first)]
    return rows[np.concatenate([first, second])]


def apply_mitigation(scores, selected, mu_t: float, group_mask=None) -> np.ndarray:
    """Copy of ``scores`` with the selected rows set to ``mu_t``."""
    out = np.array(scores, dtype=np.float64, copy=True)
    sel = np.asarray(selected, dtype=np.int64)
    if sel.size and (sel.min() < 0 or sel.max() >= len(out)):
        raise IndexError("selected index out of range")
    if group_mask is not None and sel.size and not np.asarray(group_mask)[sel].all():
        raise IndexError("selected index outside the modified group")
    out[sel] = mu_t
    return out


@dataclass(frozen=True)
class MitigationResult:
    method: str
    modified_group: Any
    modified_indices: np.ndarray
    alpha: float
    target_cost: float
    new_scores: np.ndarray
    before: dict[Any, GroupStats]
    after: dict[Any, GroupStats]
    cost: CostSpec

    def cost_gap(self, which: str = "after") -> float:
        stats = list((self.after if which == "after" else self.before).values())
        return abs(stats[0].cost(self.cost) - stats[1].cost(self.cost))

    def to_dict(self, group_label=str) -> dict[str, Any]:
        def stats(d):
            return {group_label(k): {**v.to_dict(), "group": group_label(k), "weighted_cost": v.cost(self.cost)}
                    for k, v in d.items()}
        return {
            "method": self.method,
            "alpha": self.alpha,
            "modified_group": group_label(self.modified_group),
            "n_modified": int(len(self.modified_indices)),
            "modified_indices": [int(i) for i in self.modified_indices],
            "target_cost": self.target_cost,
            "cost_weights": {"w_fp": self.cost.w_fp, "w_fn": self.cost.w_fn},
            "per_group_stats_before": stats(self.before),
            "per_group_stats_after": stats(self.after),
            "cost_gap_before": self.cost_gap("before"),
            "cost_gap_after": self.cost_gap("after"),
        }


@dataclass(frozen=True)
class MitigationPlan:
    """Which group to modify, at what rate, against which target cost."""

    modified_group: Any
    alpha: float
    target_cost: float
    before: dict[Any, GroupStats]


def plan_mitigation(scores, labels, groups, group_values: Sequence[Any], cost: CostSpec) -> MitigationPlan:
    if len(group_values) != 2:
        raise ValueError(f"mitigation needs exactly two groups, got {len(group_values)}")
    before = group_stats(scores, labels, groups, group_values)
    low, high = sorted(before.values(), key=lambda st: (st.cost(cost), group_values.index(st.group)))
    target = high.cost(cost)
    return MitigationPlan(low.group, compute_alpha(low, target, cost), target, before)


def mitigate(scores, labels, groups, group_values: Sequence[Any], protected_shap, method: str = "quadrant",
             cost: CostSpec | None = None, seed: int = 0, kind: str = "shap_only",
             objective: str = "squared", plan: MitigationPlan | None = None) -> MitigationResult:
    """Run one post-processing variant end to end.

    ``protected_shap`` is the protected attribute's raw-space attribution for
    every row; only the modified group's entries are used.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    cost = cost or CostSpec()
    scores = np.asarray(scores, dtype=np.float64)
    groups = np.asarray(groups)
    plan = plan or plan_mitigation(scores, labels, groups, group_values, cost)
    t = plan.modified_group
    mask = groups == t
    members = np.flatnonzero(mask)
    mu_t = plan.before[t].base_rate
    if method == "random":
        selected = random_select(members, plan.alpha, seed)
    else:
        shap = np.asarray(protected_shap, dtype=np.float64)
        selected = np.sort(find_individuals(shap[members], scores[members], plan.alpha, mu_t, kind,
                                            objective, rows=members))
    new_scores = apply_mitigation(scores, selected, mu_t, mask)
    after = group_stats(new_scores, labels, groups, group_values)
    return MitigationResult(method, t, selected, plan.alpha, plan.target_cost, new_scores,
                            plan.before, after, cost)


def mitigation_report(before: dict[Any, GroupStats], after_random: dict[Any, GroupStats],
                      after_quadrant: dict[Any, GroupStats], cost: CostSpec, group_label=str) -> dict[str, Any]:
    """Side-by-side metrics table: five metric rows x groups x three variants, plus cost gaps."""
    variants = {"before": before, "random": after_random, "quadrant": after_quadrant}
    groups = list(before)
    rows = {m: {v: {group_label(g): st[g].metric(m) for g in groups} for v, st in variants.items()}
            for m in TABLE_METRICS}
    gaps = {v: abs(st[groups[0]].cost(cost) - st[groups[1]].cost(cost)) for v, st in variants.items()}
    return {"variants": list(variants), "groups": [group_label(g) for g in groups], "metrics": list(TABLE_METRICS),
            "rows": rows, "weighted_cost": {v: {group_label(g): st[g].cost(cost) for g in groups}
                                            for v, st in variants.items()},
            "cost_gap": gaps}
