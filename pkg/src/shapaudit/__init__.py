"""Audit black-box tabular classifiers for group bias through Shapley attributions."""

__version__ = "0.1.0"

from .data import Dataset, ProtectedSpec, Schema, load_csv, permute_protected, split  # noqa: E402
from .detect import (  # noqa: E402
    demographic_parity_score,
    equality_of_opportunity_score,
    equalized_odds_score,
    kl_divergence,
    randomized_baseline,
    verdict,
    wasserstein1,
)
from .mitigate import CostSpec, find_individuals, mitigate  # noqa: E402
from .model import GBDTParams, GradientBoostedModel, auc, distill, train_gbdt  # noqa: E402
from .shapley import ShapMatrix, ValueFunctionConfig, additivity_check, exact_shapley, tree_shap  # noqa: E402
