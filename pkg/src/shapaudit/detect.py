"""Group-fairness criteria measured on the protected attribute's attributions."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .data import Dataset, ProtectedSpec, permute_protected
from .model import GBDTParams, GradientBoostedModel, train_gbdt
from .shapley import ShapMatrix, ValueFunctionConfig, tree_shap

CRITERIA = ("demographic_parity", "equality_of_opportunity", "equalized_odds")
DISTANCES = ("wasserstein1", "kl")


class SliceError(ValueError):
    """A group x outcome slice needed by a criterion is empty."""


class BaselineError(RuntimeError):
    pass


@dataclass(frozen=True)
class GroupSlice:
    group: Any
    outcome: int | None  # None means any outcome
    phi_values: np.ndarray

    @property
    def count(self) -> int:
        return len(self.phi_values)


def wasserstein1(u, v) -> float:
    """W1 between two empirical distributions: the area between their CDFs."""
    u = np.sort(np.asarray(u, dtype=np.float64).ravel())
    v = np.sort(np.asarray(v, dtype=np.float64).ravel())
    if u.size == 0 or v.size == 0:
        raise ValueError("wasserstein1 needs two non-empty samples")
    pooled = np.sort(np.concatenate([u, v]))
    widths = np.diff(pooled)
    cdf_u = np.searchsorted(u, pooled[:-1], side="right") / u.size
    cdf_v = np.searchsorted(v, pooled[:-1], side="right") / v.size
    return float(np.sum(np.abs(cdf_u - cdf_v) * widths))


def kl_divergence(u, v, n_bins: int = 50, epsilon: float | None = None) -> float:
    """KL(P_u || P_v) between smoothed histograms on a shared grid over the pooled range.

    ``epsilon`` is added to every bin's probability before renormalising; by
    default it is ``1 / (n_bins * (len(u) + len(v)))``.
    """
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.size == 0 or v.size == 0:
        raise ValueError("kl_divergence needs two non-empty samples")
    if epsilon is None:
        epsilon = 1.0 / (n_bins * (u.size + v.size))
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    lo, hi = min(u.min(), v.min()), max(u.max(), v.max())
    if lo == hi:
        return 0.0
    edges = np.linspace(lo, hi, n_bins + 1)
    p = np.histogram(u, edges)[0] / u.size + epsilon
    q = np.histogram(v, edges)[0] / v.size + epsilon
    p /= p.sum()
    q /= q.sum()
    return float(max(0.0, np.sum(p * np.log(p / q))))


def sample_distance(u, v, kind: str = "wasserstein1", kl_bins: int = 50) -> float:
    if kind == "wasserstein1":
        return wasserstein1(u, v)
    if kind == "kl":
        return kl_divergence(u, v, kl_bins)
    raise ValueError(f"unknown distance {kind!r}; expected one of {DISTANCES}")


def _protected_phi(s: ShapMatrix, data: Dataset, spec: ProtectedSpec) -> np.ndarray:
    if s.feature_names is not None:
        return s.column(spec.column)
    return s.phi[:, data.column_index(spec.column)]


def group_slices(s: ShapMatrix, data: Dataset, spec: ProtectedSpec, outcome: int | None) -> list[GroupSlice]:
    if s.n_rows != data.n_rows:
        raise ValueError(f"ShapMatrix has {s.n_rows} rows, dataset {data.n_rows}")
    phi = _protected_phi(s, data, spec)
    a = data.column(spec.column)
    keep = np.ones(data.n_rows, dtype=bool) if outcome is None else data.label == outcome
    return [GroupSlice(g, outcome, phi[keep & (a == g)]) for g in spec.groups]


def _pairwise(slices: list[GroupSlice], data: Dataset, spec: ProtectedSpec, kind: str, kl_bins: int) -> float:
    for sl in slices:
        if sl.count == 0:
            raise SliceError(f"no rows with {spec.column}={data.decode(spec.column, sl.group)} "
                             f"and outcome Y={sl.outcome}")
    # more than two groups: report the largest pairwise distance
    return max(sample_distance(a.phi_values, b.phi_values, kind, kl_bins)
               for a, b in itertools.combinations(slices, 2))


def demographic_parity_score(s: ShapMatrix, spec: ProtectedSpec, data: Dataset | None = None) -> float:
    """Mean absolute attribution of the protected attribute over all rows."""
    phi = s.column(spec.column) if data is None else _protected_phi(s, data, spec)
    return float(np.mean(np.abs(phi)))


def equality_of_opportunity_score(s: ShapMatrix, data: Dataset, spec: ProtectedSpec,
                                  distance_kind: str = "wasserstein1", kl_bins: int = 50) -> float:
    slices = group_slices(s, data, spec, spec.favorable_outcome)
    return _pairwise(slices, data, spec, distance_kind, kl_bins)


def equalized_odds_score(s: ShapMatrix, data: Dataset, spec: ProtectedSpec,
                         distance_kind: str = "wasserstein1", kl_bins: int = 50) -> tuple[float, float]:
    """Group distances of the protected attribution at Y=0 and at Y=1."""
    return tuple(_pairwise(group_slices(s, data, spec, y), data, spec, distance_kind, kl_bins)
                 for y in (0, 1))


def criteria_scores(s: ShapMatrix, data: Dataset, spec: ProtectedSpec, distance_kind: str = "wasserstein1",
                    kl_bins: int = 50) -> dict[str, float | tuple[float, float]]:
    return {
        "demographic_parity": demographic_parity_score(s, spec, data),
        "equality_of_opportunity": equality_of_opportunity_score(s, data, spec, distance_kind, kl_bins),
        "equalized_odds": equalized_odds_score(s, data, spec, distance_kind, kl_bins),
    }


@dataclass(frozen=True)
class AuditPipeline:
    """Everything needed to turn a dataset into a fitted model and its attributions.

    ``targets`` are fixed (labels in the white-box path, oracle answers in the
    black-box path); only the features change under permutation.
    """

    targets: np.ndarray
    objective: str
    params: GBDTParams = GBDTParams()
    seed: int = 0
    max_background: int = 256
    shap_seed: int = 0

    def fit(self, data: Dataset, seed: int | None = None) -> GradientBoostedModel:
        return train_gbdt(data, self.targets, self.objective, self.params, self.seed if seed is None else seed)

    def explain(self, model: GradientBoostedModel, data: Dataset) -> ShapMatrix:
        vf = ValueFunctionConfig(data, self.max_background, self.shap_seed)
        return tree_shap(model, data.rows, vf, data.column_names)

    def run(self, data: Dataset, seed: int | None = None) -> tuple[GradientBoostedModel, ShapMatrix]:
        model = self.fit(data, seed)
        return model, self.explain(model, data)


@dataclass(frozen=True)
class BaselineStats:
    values: tuple[float, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def max(self) -> float:
        return float(np.max(self.values))

    def to_dict(self) -> dict[str, Any]:
        return {"mean": self.mean, "max": self.max, "values": list(self.values)}


@dataclass
class BaselineRun:
    """Per-permutation criterion values plus the first permutation's artefacts for plotting."""

    stats: dict[str, BaselineStats | tuple[BaselineStats, BaselineStats]]
    first_data: Dataset | None = None
    first_shap: ShapMatrix | None = None


def randomized_baseline(data: Dataset, spec: ProtectedSpec, pipeline: AuditPipeline, k: int, seed: int,
                        distance_kind: str = "wasserstein1", kl_bins: int = 50) -> BaselineRun:
    """Recompute every criterion after permuting the protected column and retraining.

    Permutation ``i`` (1-based) uses seed ``seed + i`` for both the shuffle and
    the retrain. Slices are formed on the permuted column, i.e. the attribute
    the retrained model actually sees.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    per: dict[str, list] = {c: [] for c in CRITERIA}
    first_data = first_shap = None
    for i in range(1, k + 1):
        permuted = permute_protected(data, spec, seed + i)
        try:
            _, s = pipeline.run(permuted, seed + i)
        except Exception as exc:
            raise BaselineError(f"baseline permutation {i}: {exc}") from exc
        if first_data is None:
            first_data, first_shap = permuted, s
        for c, v in criteria_scores(s, permuted, spec, distance_kind, kl_bins).items():
            per[c].append(v)
    stats: dict[str, Any] = {
        "demographic_parity": BaselineStats(tuple(per["demographic_parity"])),
        "equality_of_opportunity": BaselineStats(tuple(per["equality_of_opportunity"])),
        "equalized_odds": tuple(BaselineStats(tuple(v[y] for v in per["equalized_odds"])) for y in (0, 1)),
    }
    return BaselineRun(stats, first_data, first_shap)


def verdict(metric: float, baseline: BaselineStats, ratio_threshold: float = 3.0, floor: float = 1e-3) -> str:
    """``violation`` iff the metric strictly exceeds ``ratio_threshold`` times the baseline mean (floored)."""
    if baseline.max < 0:
        raise ValueError("baseline values must be non-negative")
    return "violation" if metric > ratio_threshold * max(baseline.mean, floor) else "no_evidence"


def ratio(metric: float, baseline: BaselineStats, floor: float = 1e-3) -> float:
    return metric / max(baseline.mean, floor)


@dataclass
class FairnessReport:
    criterion: str
    distance_kind: str
    metric: list[float]
    baseline: list[BaselineStats]
    ratio: list[float]
    verdict: str
    slices: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        scalar = len(self.metric) == 1
        return {
            "criterion": self.criterion,
            "distance_kind": self.distance_kind,
            "metric": self.metric[0] if scalar else self.metric,
            "baseline": self.baseline[0].to_dict() if scalar else [b.to_dict() for b in self.baseline],
            "ratio": self.ratio[0] if scalar else self.ratio,
            "verdict": self.verdict,
            "slices": self.slices,
        }


def _slice_counts(s: ShapMatrix, data: Dataset, spec: ProtectedSpec, outcomes: Sequence[int | None]):
    out = []
    for y in outcomes:
        for sl in group_slices(s, data, spec, y):
            out.append({"group": data.decode(spec.column, sl.group), "outcome": "any" if y is None else y,
                        "count": sl.count})
    return out


def build_reports(s: ShapMatrix, data: Dataset, spec: ProtectedSpec, baseline: BaselineRun,
                  distance_kind: str = "wasserstein1", ratio_threshold: float = 3.0, floor: float = 1e-3,
                  kl_bins: int = 50) -> list[FairnessReport]:
    scores = criteria_scores(s, data, spec, distance_kind, kl_bins)
    reports = []
    for c in CRITERIA:
        if c == "equalized_odds":
            metrics, bases, outcomes = list(scores[c]), list(baseline.stats[c]), (0, 1)
        else:
            metrics, bases = [scores[c]], [baseline.stats[c]]
            outcomes = (None,) if c == "demographic_parity" else (spec.favorable_outcome,)
        verdicts = [verdict(m, b, ratio_threshold, floor) for m, b in zip(metrics, bases)]
        reports.append(FairnessReport(
            criterion=c,
            distance_kind="mean_abs" if c == "demographic_parity" else distance_kind,
            metric=[float(m) for m in metrics],
            baseline=bases,
            ratio=[ratio(m, b, floor) for m, b in zip(metrics, bases)],
            verdict="violation" if "violation" in verdicts else "no_evidence",
            slices=_slice_counts(s, data, spec, outcomes),
        ))
    return reports


def histogram_data(series: dict[str, np.ndarray], n_bins: int = 30) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Shared bin edges and per-series counts for plotting attribution distributions."""
    nonempty = [v for v in series.values() if len(v)]
    if not nonempty:
        raise ValueError("no values to bin")
    pooled = np.concatenate(nonempty)
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, n_bins + 1)
    return edges, {k: np.histogram(v, edges)[0] for k, v in series.items()}
