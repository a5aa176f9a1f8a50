"""Shapley attributions under an interventional (background-expectation) value function.

Two routes compute the same quantity:

* :func:`exact_shapley` enumerates all ``2**M`` coalitions for any model.
* :func:`tree_shap` exploits tree structure. For one leaf, a hybrid point
  ``z = (x_S, b_~S)`` reaches it iff, for every feature on the root path, the
  value that ``z`` takes satisfies all of that feature's path conditions. So the
  leaf's contribution to the game for a pair ``(x, b)`` is ``value`` times the
  indicator ``[A subset of S and B disjoint from S]``, where ``A`` holds path
  features only ``x`` satisfies and ``B`` those only ``b`` satisfies. The
  Shapley values of that indicator game have a closed form, and pairs are
  grouped by their path-satisfaction bit patterns so the cost is linear in the
  number of rows.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from functools import lru_cache
from math import factorial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .model import DecisionTree, GradientBoostedModel

MAX_EXACT_FEATURES = 20


class CapabilityError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ValueFunctionConfig:
    background: Dataset | np.ndarray
    max_background: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.max_background < 1:
            raise ValueError("max_background must be >= 1")
        if self.matrix().shape[0] < 1:
            raise ValueError("background needs at least one row")

    def matrix(self) -> np.ndarray:
        B = self.background.rows if isinstance(self.background, Dataset) else np.asarray(self.background, float)
        if B.ndim == 1:
            B = B[None, :]
        return B

    def rows(self) -> np.ndarray:
        """Background rows actually used: a seeded subsample when over the cap."""
        B = self.matrix()
        if B.shape[0] <= self.max_background:
            return B
        idx = np.random.default_rng(self.seed).choice(B.shape[0], self.max_background, replace=False)
        return B[np.sort(idx)]


@dataclass(frozen=True, eq=False)
class ShapMatrix:
    """Per-row attributions in the model's additive (raw) output space."""

    phi: np.ndarray
    phi0: float
    model_scores: np.ndarray
    feature_names: tuple[str, ...] | None = None

    @property
    def n_rows(self) -> int:
        return self.phi.shape[0]

    @property
    def n_active_features(self) -> int:
        return self.phi.shape[1]

    def column(self, feature: str | int) -> np.ndarray:
        if isinstance(feature, str):
            if self.feature_names is None:
                raise KeyError("ShapMatrix has no feature names")
            feature = self.feature_names.index(feature)
        return self.phi[:, feature]

    def mean_abs(self) -> dict[str, float]:
        names = self.feature_names or tuple(f"feature_{i + 1}" for i in range(self.n_active_features))
        return {n: float(v) for n, v in zip(names, np.abs(self.phi).mean(axis=0))}


def _as_function(model) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(model, GradientBoostedModel):
        return model.predict_raw
    if hasattr(model, "predict_raw"):
        return model.predict_raw
    if callable(model):
        return model
    raise TypeError(f"cannot explain object of type {type(model).__name__}")


def _coalition_weights(M: int) -> np.ndarray:
    # weight for a coalition of size k not containing i
    return np.array([factorial(k) * factorial(M - k - 1) / factorial(M) for k in range(M)])


def exact_shapley(model, rows, vf: ValueFunctionConfig, feature_names: Sequence[str] | None = None,
                  max_eval_rows: int = 400_000) -> ShapMatrix:
    """Brute-force Shapley values over every coalition (``M <= 20``)."""
    f = _as_function(model)
    X = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("no rows to explain")
    B = vf.rows()
    M = X.shape[1]
    if B.shape[1] != M:
        raise ValueError(f"background has {B.shape[1]} features, rows have {M}")
    if M > MAX_EXACT_FEATURES:
        raise CapabilityError(f"exact enumeration over {M} features (2^{M} coalitions) is too large; use tree_shap")
    n_sub = 1 << M
    subsets = np.arange(n_sub)
    in_s = ((subsets[:, None] >> np.arange(M)) & 1).astype(bool)
    sizes = in_s.sum(axis=1)
    nb = B.shape[0]
    chunk = max(1, max_eval_rows // nb)

    v = np.empty((X.shape[0], n_sub))
    for r, x in enumerate(X):
        for lo in range(0, n_sub, chunk):
            m = in_s[lo:lo + chunk]
            Z = np.where(m[:, None, :], x[None, None, :], B[None, :, :]).reshape(-1, M)
            v[r, lo:lo + chunk] = np.asarray(f(Z), dtype=np.float64).reshape(len(m), nb).mean(axis=1)

    w = _coalition_weights(M)
    phi = np.empty((X.shape[0], M))
    for i in range(M):
        without = subsets[~in_s[:, i]]
        phi[:, i] = (v[:, without | (1 << i)] - v[:, without]) @ w[sizes[without]]
    return ShapMatrix(phi=phi, phi0=float(v[0, 0]), model_scores=v[:, n_sub - 1].copy(),
                      feature_names=tuple(feature_names) if feature_names is not None else None)


@lru_cache(maxsize=None)
def _pattern_table(u: int) -> np.ndarray:
    """``T[px, pb, k]``: Shapley value of path feature ``k`` in the indicator game.

    ``px``/``pb`` are bit patterns saying which path features the explained row
    and the background row each satisfy.
    """
    P = 1 << u
    T = np.zeros((P, P, u))
    for px in range(P):
        for pb in range(P):
            xb = [(px >> k) & 1 for k in range(u)]
            bb = [(pb >> k) & 1 for k in range(u)]
            if not all(a or b for a, b in zip(xb, bb)):
                continue
            A = [k for k in range(u) if xb[k] and not bb[k]]
            Bs = [k for k in range(u) if bb[k] and not xb[k]]
            a, c = len(A), len(Bs)
            if a + c == 0:
                continue
            for k in A:
                T[px, pb, k] = factorial(a - 1) * factorial(c) / factorial(a + c)
            for k in Bs:
                T[px, pb, k] = -factorial(a) * factorial(c - 1) / factorial(a + c)
    T.setflags(write=False)
    return T


def _path_patterns(Z: np.ndarray, path, feats: list[int]) -> np.ndarray:
    code = np.zeros(Z.shape[0], dtype=np.int64)
    for k, j in enumerate(feats):
        ok = np.ones(Z.shape[0], dtype=bool)
        for f, t, went_left in path:
            if f == j:
                ok &= (Z[:, j] <= t) == went_left
        code |= ok.astype(np.int64) << k
    return code


def tree_shap_single(tree: DecisionTree, X: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Interventional Shapley values of one tree's output, averaged over ``B``."""
    phi = np.zeros(X.shape)
    nb = B.shape[0]
    for leaf, path in tree.leaf_paths():
        feats = sorted({f for f, _, _ in path})
        u = len(feats)
        if u == 0:
            continue
        P = 1 << u
        px = _path_patterns(X, path, feats)
        pb = _path_patterns(B, path, feats)
        weights = np.bincount(pb, minlength=P) / nb
        E = np.einsum("b,xbk->xk", weights, _pattern_table(u)) * tree.value[leaf]
        phi[:, feats] += E[px]
    return phi


def tree_shap(model: GradientBoostedModel, rows, vf: ValueFunctionConfig,
              feature_names: Sequence[str] | None = None) -> ShapMatrix:
    """Interventional Shapley values for a tree ensemble without coalition enumeration."""
    if not isinstance(model, GradientBoostedModel):
        raise TypeError("tree_shap requires a GradientBoostedModel")
    X = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    B = vf.rows()
    if X.shape[1] != model.n_features or B.shape[1] != model.n_features:
        raise ValueError(f"model expects {model.n_features} features")
    phi = np.zeros(X.shape)
    for tree in model.trees:
        phi += tree_shap_single(tree, X, B)
    phi *= model.learning_rate
    return ShapMatrix(phi=phi, phi0=float(model.predict_raw(B).mean()), model_scores=model.predict_raw(X),
                      feature_names=tuple(feature_names) if feature_names is not None else None)


def additivity_check(s: ShapMatrix) -> float:
    """Largest per-row violation of ``f(x) = phi0 + sum(phi)``."""
    resid = s.model_scores - s.phi0 - s.phi.sum(axis=1)
    return float(np.max(np.abs(resid))) if resid.size else 0.0


def write_shap_csv(s: ShapMatrix, path: str | Path, header_comment: str | None = None) -> None:
    names = s.feature_names or tuple(f"feature_{i + 1}" for i in range(s.n_active_features))
    with Path(path).open("w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", *names, "phi0", "score"])
        for i in range(s.n_rows):
            w.writerow([i, *(repr(float(v)) for v in s.phi[i]), repr(s.phi0), repr(float(s.model_scores[i]))])


def shap_summary(s: ShapMatrix) -> dict:
    return {
        "n_rows": s.n_rows,
        "phi0": s.phi0,
        "mean_abs_phi": s.mean_abs(),
        "max_additivity_residual": additivity_check(s),
    }


def write_shap_summary(s: ShapMatrix, path: str | Path, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps({**(extra or {}), **shap_summary(s)}, indent=2, sort_keys=True) + "\n")
