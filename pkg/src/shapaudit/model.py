"""Gradient-boosted regression trees, black-box oracles and distillation.

The booster is written out in full (exact greedy split search over sorted
unique values, second-order leaf weights) because the attribution code walks
node internals directly.
"""

from __future__ import annotations

import csv
import io
import json
import subprocess
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.special import expit, logit
from scipy.stats import rankdata

from .data import Dataset

MODEL_FORMAT = "shapaudit.gbdt"
MODEL_VERSION = 1
OBJECTIVES = ("logistic", "squared")
_PROB_CLIP = 1e-6


class TrainingError(ValueError):
    pass


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class DecisionTree:
    """Binary tree stored as parallel node arrays; node 0 is the root.

    Internal nodes have ``feature >= 0``; leaves have ``feature == -1`` and
    carry ``value``. A row goes left iff ``x[feature] <= threshold``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        for name, dtype in (("feature", np.int64), ("threshold", np.float64), ("left", np.int64),
                            ("right", np.int64), ("value", np.float64)):
            arr = np.array(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self._check()

    def _check(self) -> None:
        n = len(self.feature)
        if n == 0:
            raise ValueError("tree has no nodes")
        if not all(len(a) == n for a in (self.threshold, self.left, self.right, self.value)):
            raise ValueError("node arrays have different lengths")
        seen = np.zeros(n, dtype=bool)
        stack = [0]
        while stack:
            i = stack.pop()
            if seen[i]:
                raise ValueError(f"node {i} reachable twice (cycle or shared child)")
            seen[i] = True
            if self.feature[i] >= 0:
                for c in (self.left[i], self.right[i]):
                    if not 0 <= c < n:
                        raise ValueError(f"node {i} has missing child {c}")
                    stack.append(int(c))
        if not seen.all():
            raise ValueError("tree contains unreachable nodes")

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        def rec(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(rec(self.left[i]), rec(self.right[i]))
        return rec(0)

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        feat, thr, left, right, depth = self._routing()
        flat = np.ascontiguousarray(X).ravel()
        offsets = np.arange(X.shape[0]) * X.shape[1]
        idx = np.zeros(X.shape[0], dtype=np.int64)
        for _ in range(depth):
            go_left = flat.take(offsets + feat.take(idx)) <= thr.take(idx)
            idx = np.where(go_left, left.take(idx), right.take(idx))
        return idx

    def _routing(self):
        # leaves route to themselves so every row can take exactly ``depth`` steps
        cached = self.__dict__.get("_routing_cache")
        if cached is None:
            leaf = self.feature < 0
            own = np.arange(self.n_nodes)
            cached = (np.where(leaf, 0, self.feature), np.where(leaf, np.inf, self.threshold),
                      np.where(leaf, own, self.left), np.where(leaf, own, self.right), self.depth)
            object.__setattr__(self, "_routing_cache", cached)
        return cached

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.leaf_index(X)]

    def leaf_paths(self) -> list[tuple[int, list[tuple[int, float, bool]]]]:
        """Every leaf with its root path as ``(feature, threshold, went_left)`` triples."""
        out = []
        stack: list[tuple[int, list]] = [(0, [])]
        while stack:
            i, path = stack.pop()
            if self.feature[i] < 0:
                out.append((i, path))
                continue
            f, t = int(self.feature[i]), float(self.threshold[i])
            stack.append((int(self.right[i]), path + [(f, t, False)]))
            stack.append((int(self.left[i]), path + [(f, t, True)]))
        return out

    def to_dict(self) -> dict[str, Any]:
        nodes = []
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                nodes.append({"feature": int(self.feature[i]), "threshold": float(self.threshold[i]),
                              "left": int(self.left[i]), "right": int(self.right[i])})
            else:
                nodes.append({"value": float(self.value[i])})
        return {"nodes": nodes}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DecisionTree":
        nodes = d["nodes"]
        return cls(
            feature=[n.get("feature", -1) for n in nodes],
            threshold=[n.get("threshold", 0.0) for n in nodes],
            left=[n.get("left", -1) for n in nodes],
            right=[n.get("right", -1) for n in nodes],
            value=[n.get("value", 0.0) for n in nodes],
        )

    @classmethod
    def leaf(cls, value: float) -> "DecisionTree":
        return cls(feature=[-1], threshold=[0.0], left=[-1], right=[-1], value=[value])


@dataclass(frozen=True)
class GBDTParams:
    n_trees: int = 100
    max_depth: int = 4
    learning_rate: float = 0.1
    min_child_rows: int = 10
    l2_reg: float = 1.0
    subsample: float = 1.0

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> "GBDTParams":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model hyperparameters: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class GradientBoostedModel:
    trees: tuple[DecisionTree, ...]
    learning_rate: float
    base_score: float
    objective: str
    n_features: int
    train_loss: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        object.__setattr__(self, "trees", tuple(self.trees))

    def _check_rows(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"model expects {self.n_features} features, got {X.shape[1]}")
        return X

    def predict_raw(self, X) -> np.ndarray:
        """Additive score: ``base_score + learning_rate * sum of tree outputs``."""
        X = self._check_rows(X)
        total = np.zeros(X.shape[0])
        for tree in self.trees:
            total += tree.predict(X)
        return self.base_score + self.learning_rate * total

    def predict(self, X) -> np.ndarray:
        raw = self.predict_raw(X)
        return expit(raw) if self.objective == "logistic" else raw

    def link(self, raw: np.ndarray) -> np.ndarray:
        return expit(raw) if self.objective == "logistic" else raw

    def truncated(self, n_trees: int) -> "GradientBoostedModel":
        return GradientBoostedModel(self.trees[:n_trees], self.learning_rate, self.base_score,
                                    self.objective, self.n_features)

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "objective": self.objective,
            "base_score": float(self.base_score),
            "learning_rate": float(self.learning_rate),
            "n_features": int(self.n_features),
            "trees": [t.to_dict() for t in self.trees],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GradientBoostedModel":
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model format {d.get('format')!r} v{d.get('version')!r}")
        return cls(
            trees=tuple(DecisionTree.from_dict(t) for t in d["trees"]),
            learning_rate=d["learning_rate"],
            base_score=d["base_score"],
            objective=d["objective"],
            n_features=d["n_features"],
        )

    @classmethod
    def from_json(cls, s: str) -> "GradientBoostedModel":
        return cls.from_dict(json.loads(s))


def predict(model: GradientBoostedModel, rows) -> np.ndarray:
    return model.predict(rows)


def _loss(objective: str, raw: np.ndarray, y: np.ndarray) -> float:
    if objective == "squared":
        return float(0.5 * np.mean((raw - y) ** 2))
    # mean binary cross-entropy written via logaddexp for stability
    return float(np.mean(np.logaddexp(0.0, raw) - y * raw))


def _grad_hess(objective: str, raw: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if objective == "squared":
        return raw - y, np.ones_like(raw)
    p = expit(raw)
    return p - y, p * (1.0 - p)


def _best_split(X, g, h, node_rows, orders, params):
    """Best (gain, feature, threshold, left_mask) over all features, or None."""
    G, H = g[node_rows].sum(), h[node_rows].sum()
    lam = params.l2_reg
    parent = G * G / (H + lam)
    n_node = node_rows.sum()
    best = None
    for j, order in enumerate(orders):
        idx = order[node_rows[order]]
        xs = X[idx, j]
        gl = np.cumsum(g[idx])[:-1]
        hl = np.cumsum(h[idx])[:-1]
        k = np.arange(1, len(idx))  # left child size
        ok = (xs[:-1] < xs[1:]) & (k >= params.min_child_rows) & (n_node - k >= params.min_child_rows)
        if not ok.any():
            continue
        gr, hr = G - gl, H - hl
        gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent
        gain = np.where(ok, gain, -np.inf)
        pos = int(np.argmax(gain))
        if gain[pos] > 1e-12 and (best is None or gain[pos] > best[0]):
            best = (float(gain[pos]), j, float(xs[pos]))
    return best


def _grow_tree(X, g, h, rows_mask, orders, params) -> DecisionTree:
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for arr, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, 0.0)):
            arr.append(v)
        return len(feature) - 1

    root = new_node()
    queue = [(root, rows_mask, 0)]
    while queue:
        node, mask, depth = queue.pop(0)
        split = _best_split(X, g, h, mask, orders, params) if depth < params.max_depth else None
        if split is None:
            value[node] = float(-g[mask].sum() / (h[mask].sum() + params.l2_reg))
            continue
        _, j, t = split
        go_left = X[:, j] <= t
        li, ri = new_node(), new_node()
        feature[node], threshold[node], left[node], right[node] = j, t, li, ri
        queue.append((li, mask & go_left, depth + 1))
        queue.append((ri, mask & ~go_left, depth + 1))
    return DecisionTree(feature, threshold, left, right, value)


def train_gbdt(train: Dataset | np.ndarray, targets, objective: str = "logistic",
               params: GBDTParams | None = None, seed: int = 0) -> GradientBoostedModel:
    """Fit a boosted tree ensemble to ``targets``.

    ``logistic`` minimises cross-entropy against targets in [0, 1] (hard labels
    or probabilities); ``squared`` minimises mean squared error.
    """
    params = params or GBDTParams()
    X = train.rows if isinstance(train, Dataset) else np.asarray(train, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise TrainingError("empty training set")
    if y.shape != (X.shape[0],):
        raise TrainingError(f"{len(y)} targets for {X.shape[0]} rows")
    if objective not in OBJECTIVES:
        raise TrainingError(f"objective must be one of {OBJECTIVES}")
    if params.max_depth < 1:
        raise TrainingError("max_depth must be >= 1")
    if params.n_trees < 0 or params.min_child_rows < 1 or not params.learning_rate > 0:
        raise TrainingError(f"invalid hyperparameters: {params}")
    if not 0 < params.subsample <= 1:
        raise TrainingError("subsample must be in (0, 1]")
    if objective == "logistic" and ((y < 0).any() or (y > 1).any()):
        raise TrainingError("logistic objective requires targets in [0, 1]")

    n = X.shape[0]
    if objective == "logistic":
        base = float(logit(np.clip(y.mean(), _PROB_CLIP, 1 - _PROB_CLIP)))
    else:
        base = float(y.mean())
    orders = [np.argsort(X[:, j], kind="stable") for j in range(X.shape[1])]
    rng = np.random.default_rng(seed)
    raw = np.full(n, base)
    losses = [_loss(objective, raw, y)]
    trees = []
    for _ in range(params.n_trees):
        g, h = _grad_hess(objective, raw, y)
        if params.subsample < 1.0:
            mask = np.zeros(n, dtype=bool)
            mask[rng.choice(n, size=max(1, int(round(params.subsample * n))), replace=False)] = True
        else:
            mask = np.ones(n, dtype=bool)
        tree = _grow_tree(X, g, h, mask, orders, params)
        trees.append(tree)
        raw = raw + params.learning_rate * tree.predict(X)
        losses.append(_loss(objective, raw, y))
    return GradientBoostedModel(tuple(trees), params.learning_rate, base, objective, X.shape[1],
                                train_loss=tuple(losses))


class ScoreColumnOracle:
    """Oracle backed by scores already recorded in the dataset."""

    def __init__(self, data: Dataset):
        if data.score is None:
            raise OracleError("dataset has no score column")
        self._data = data

    def query(self, data: Dataset) -> np.ndarray:
        if data is not self._data and not data.equals(self._data):
            raise OracleError("score-column oracle can only answer rows of its own dataset")
        return np.array(self._data.score, dtype=np.float64)


class SubprocessOracle:
    """Oracle that scores row batches through an external program.

    The program gets header-less CSV rows on stdin (categorical columns as their
    original strings) and must print one score in [0, 1] per line, exiting 0.
    """

    def __init__(self, command: Sequence[str], batch_size: int = 1024, timeout: float | None = 300.0):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.command = list(command)
        self.batch_size = batch_size
        self.timeout = timeout

    def _encode(self, data: Dataset, lo: int, hi: int) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for i in range(lo, hi):
            w.writerow([data.decode(c, data.rows[i, j]) for j, c in enumerate(data.column_names)])
        return buf.getvalue()

    def query(self, data: Dataset) -> np.ndarray:
        out = np.empty(data.n_rows)
        for lo in range(0, data.n_rows, self.batch_size):
            hi = min(lo + self.batch_size, data.n_rows)
            try:
                proc = subprocess.run(self.command, input=self._encode(data, lo, hi), capture_output=True,
                                      text=True, timeout=self.timeout, check=False)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise OracleError(f"oracle failed on rows {lo}..{hi - 1}: {exc}") from exc
            if proc.returncode != 0:
                raise OracleError(f"oracle exited {proc.returncode} on rows {lo}..{hi - 1}: {proc.stderr.strip()}")
            lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
            if len(lines) != hi - lo:
                raise OracleError(f"oracle returned {len(lines)} scores for rows {lo}..{hi - 1}")
            try:
                vals = np.array([float(ln) for ln in lines])
            except ValueError as exc:
                raise OracleError(f"malformed oracle output for rows {lo}..{hi - 1}: {exc}") from exc
            if not np.isfinite(vals).all() or (vals < 0).any() or (vals > 1).any():
                raise OracleError(f"oracle scores outside [0, 1] for rows {lo}..{hi - 1}")
            out[lo:hi] = vals
        return out


@dataclass(frozen=True)
class Distillation:
    model: GradientBoostedModel
    targets: np.ndarray
    fidelity_kind: str  # "r2" for soft scores, "agreement" for hard labels
    fidelity: float

    def record(self) -> dict[str, Any]:
        return {"objective": self.model.objective, "fidelity_kind": self.fidelity_kind,
                "fidelity": self.fidelity}


def r_squared(pred: np.ndarray, target: np.ndarray) -> float:
    sse = float(np.sum((pred - target) ** 2))
    sst = float(np.sum((target - target.mean()) ** 2))
    if sst == 0.0:
        return 1.0 if sse <= 1e-12 * len(target) else 0.0
    return 1.0 - sse / sst


def distill(oracle, data: Dataset, params: GBDTParams | None = None, seed: int = 0) -> Distillation:
    """Train a mimic on the oracle's answers for every row of ``data``.

    Hard 0/1 answers give a logistic mimic scored by agreement; soft scores give
    a squared-error mimic scored by R^2.
    """
    targets = np.asarray(oracle.query(data), dtype=np.float64)
    if targets.shape != (data.n_rows,):
        raise OracleError(f"oracle returned {targets.shape} for {data.n_rows} rows")
    hard = bool(np.isin(targets, (0.0, 1.0)).all())
    model = train_gbdt(data, targets, "logistic" if hard else "squared", params, seed)
    pred = model.predict(data.rows)
    if hard:
        return Distillation(model, targets, "agreement", float(np.mean((pred >= 0.5) == (targets == 1))))
    return Distillation(model, targets, "r2", r_squared(pred, targets))


class ModelOracle:
    """Wrap any fitted model as an oracle (used to re-distill a mimic)."""

    def __init__(self, model: GradientBoostedModel):
        self.model = model

    def query(self, data: Dataset) -> np.ndarray:
        return np.clip(self.model.predict(data.rows), 0.0, 1.0)


def auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney probability; ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos = y == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(s)
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


@dataclass(frozen=True)
class CalibrationBin:
    lo: float
    hi: float
    count: int
    mean_score: float | None
    positive_rate: float | None

    @property
    def gap(self) -> float | None:
        if self.count == 0:
            return None
        return abs(self.mean_score - self.positive_rate)

    def to_dict(self) -> dict[str, Any]:
        return {**asdict(self), "gap": self.gap}


def calibration_table(scores, labels, n_bins: int = 10) -> list[CalibrationBin]:
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    b = np.clip(np.floor(s * n_bins).astype(np.int64), 0, n_bins - 1)
    out = []
    for k in range(n_bins):
        m = b == k
        c = int(m.sum())
        out.append(CalibrationBin(k / n_bins, (k + 1) / n_bins, c,
                                  float(s[m].mean()) if c else None, float(y[m].mean()) if c else None))
    return out
