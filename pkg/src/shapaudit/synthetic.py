"""Seeded synthetic datasets with a known amount of planted group bias."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .data import Dataset, ProtectedSpec

FEATURES = ("age", "priors", "income", "tenure", "score_a", "group")
_WEIGHTS = np.array([-0.04, -0.35, 0.6, 0.25, 0.8])


def planted_bias(n: int = 5000, bonus: float = 0.15, seed: int = 0,
                 group_rate: float = 0.5) -> tuple[Dataset, ProtectedSpec]:
    """Six-feature dataset whose score oracle adds ``bonus`` logits when ``group == 1``.

    ``score`` holds the oracle's probability; ``label`` is drawn Bernoulli(score),
    so the oracle is calibrated by construction. ``bonus=0`` gives the null model.
    """
    rng = np.random.default_rng(seed)
    a = (rng.random(n) < group_rate).astype(np.float64)
    age = rng.integers(18, 70, n).astype(np.float64)
    priors = rng.poisson(1.0 + 0.5 * (1 - a), n).astype(np.float64)
    income = np.round(rng.normal(0.0, 1.0, n), 2)
    tenure = rng.integers(0, 10, n).astype(np.float64)
    other = np.round(rng.normal(0.0, 1.0, n), 2)
    X = np.column_stack([age, priors, income, tenure, other])
    logits = 1.2 + (X - X.mean(axis=0)) @ _WEIGHTS + bonus * a
    score = expit(logits)
    label = (rng.random(n) < score).astype(np.int64)
    rows = np.column_stack([X, a])
    data = Dataset(rows=rows, column_names=FEATURES, label=label, score=score,
                   encodings={"group": ["b", "a"]})
    return data, ProtectedSpec(column="group", groups=(0, 1), favorable_outcome=1)


def two_group_benchmark(n_per_group: int = 2500, sharpness: float = 1.2, bonus: float = 0.5,
                        seed: int = 0) -> tuple[Dataset, ProtectedSpec]:
    """Calibrated two-group data where group 0's scores are sharper (lower error cost).

    Group 1 also gets a ``bonus`` logit shift, so the protected attribute carries
    signal for the attribution-guided selection to use.
    """
    rng = np.random.default_rng(seed)
    a = rng.permutation(np.repeat([0.0, 1.0], n_per_group))
    X = rng.normal(size=(2 * n_per_group, 5))
    z = X @ np.array([0.9, -0.6, 0.5, 0.3, 0.2])
    logits = np.where(a == 0, sharpness * z, z) + 0.2 + bonus * a
    score = expit(logits)
    label = (rng.random(len(a)) < score).astype(np.int64)
    data = Dataset(rows=np.column_stack([np.round(X, 3), a]), column_names=("x1", "x2", "x3", "x4", "x5", "group"),
                   label=label, score=score, encodings={"group": ["b", "a"]})
    return data, ProtectedSpec(column="group", groups=(0, 1), favorable_outcome=1)
