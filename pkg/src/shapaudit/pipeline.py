"""End-to-end audit, baseline and mitigation runs that write report artefacts."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .config import AuditConfig
from .data import Dataset, ProtectedSpec, load_csv, save_encodings, split
from .detect import (CRITERIA, AuditPipeline, BaselineRun, build_reports, group_slices, histogram_data,
                     randomized_baseline)
from .mitigate import (CostSpec, InfeasibleError, METHODS, group_stats, mitigate, mitigation_report,
                       plan_mitigation, quadrants)
from .model import (Distillation, GradientBoostedModel, ScoreColumnOracle, SubprocessOracle, auc,
                    calibration_table, distill, train_gbdt)
from .shapley import ShapMatrix, ValueFunctionConfig, tree_shap, write_shap_csv, write_shap_summary

SCHEMA_VERSION = "1.0"
log = logging.getLogger(__name__)


def meta(cfg: AuditConfig, command: str) -> dict[str, Any]:
    return {"tool": "shapaudit", "tool_version": __version__, "config_sha256": cfg.digest(),
            "mode": cfg.mode, "command": command}


def _meta_line(m: dict[str, Any]) -> str:
    return f"shapaudit {m['tool_version']} command={m['command']} mode={m['mode']} config_sha256={m['config_sha256']}"


def write_json(path: Path, payload: dict[str, Any], m: dict[str, Any]) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "meta": m, **payload}
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True, allow_nan=False) + "\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


def write_csv_with_meta(path: Path, header: list[str], rows, m: dict[str, Any]) -> None:
    with path.open("w", newline="") as fh:
        fh.write(f"# {_meta_line(m)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


@dataclass
class Prepared:
    data: Dataset
    spec: ProtectedSpec
    pipeline: AuditPipeline
    model_info: dict[str, Any]


def _fit_targets(cfg: AuditConfig, data: Dataset, seed: int) -> tuple[GradientBoostedModel, np.ndarray, dict]:
    """Train the audited model (white-box) or distil a mimic from the oracle (black-box)."""
    if cfg.mode == "whitebox":
        targets = data.label.astype(np.float64)
        model = train_gbdt(data, targets, "logistic", cfg.model, seed)
        info = {"kind": "whitebox", "objective": "logistic"}
        return model, targets, info
    if cfg.mode == "blackbox_column":
        oracle = ScoreColumnOracle(data)
    else:
        oracle = SubprocessOracle(cfg.oracle.command, cfg.oracle.batch_size, cfg.oracle.timeout)
    d: Distillation = distill(oracle, data, cfg.model, seed)
    return d.model, d.targets, {"kind": "mimic", **d.record()}


def prepare(cfg: AuditConfig) -> tuple[Prepared, GradientBoostedModel, ShapMatrix]:
    data, spec = load_csv(cfg.data_path(), cfg.schema)
    model, targets, info = _fit_targets(cfg, data, cfg.seed)
    pipeline = AuditPipeline(targets=targets, objective=model.objective, params=cfg.model, seed=cfg.seed,
                             max_background=cfg.shap.max_background, shap_seed=cfg.shap.seed)
    shap = pipeline.explain(model, data)
    pred = model.predict(data.rows)
    if len(np.unique(data.label)) == 2:
        info["auc_vs_labels"] = auc(pred, data.label)
    info.update({"n_trees": len(model.trees), "hyperparameters": vars(cfg.model).copy()})
    return Prepared(data, spec, pipeline, info), model, shap


def _dataset_info(p: Prepared) -> dict[str, Any]:
    return {
        "n_rows": p.data.n_rows,
        "n_features": p.data.n_features,
        "features": list(p.data.column_names),
        "protected": p.spec.column,
        "groups": [p.data.decode(p.spec.column, g) for g in p.spec.groups],
        "favorable_outcome": p.spec.favorable_outcome,
        "shap_rows": "in_sample",
    }


def _baseline(cfg: AuditConfig, p: Prepared) -> BaselineRun:
    return randomized_baseline(p.data, p.spec, p.pipeline, cfg.detection.k_permutations, cfg.seed,
                               cfg.detection.distance, cfg.detection.kl_bins)


def _write_histograms(out: Path, cfg: AuditConfig, p: Prepared, shap: ShapMatrix, base: BaselineRun, m) -> None:
    figures = {"demographic_parity": None, "equality_of_opportunity": p.spec.favorable_outcome,
               "equalized_odds_y0": 0, "equalized_odds_y1": 1}
    for name, outcome in figures.items():
        series = {}
        for tag, data, s in (("protected", p.data, shap), ("randomized", base.first_data, base.first_shap)):
            for sl in group_slices(s, data, p.spec, outcome):
                series[f"{tag}:{data.decode(p.spec.column, sl.group)}"] = sl.phi_values
        edges, counts = histogram_data(series, cfg.detection.hist_bins)
        keys = list(series)
        rows = [[float(edges[i]), float(edges[i + 1]), *(int(counts[k][i]) for k in keys)]
                for i in range(len(edges) - 1)]
        write_csv_with_meta(out / f"hist_{name}.csv", ["bin_lo", "bin_hi", *keys], rows, m)


def run_audit(cfg: AuditConfig) -> int:
    """Fit, explain, score all criteria against the baseline and write artefacts.

    Returns 2 if any criterion is flagged as a violation, else 0.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    m = meta(cfg, "audit")
    p, model, shap = prepare(cfg)
    base = _baseline(cfg, p)
    d = cfg.detection
    reports = build_reports(shap, p.data, p.spec, base, d.distance, d.ratio_threshold, d.floor, d.kl_bins)
    any_violation = any(r.verdict == "violation" for r in reports)
    write_json(out / "audit_report.json", {
        "dataset": _dataset_info(p),
        "model": p.model_info,
        "detection": {"distance": d.distance, "k_permutations": d.k_permutations,
                      "ratio_threshold": d.ratio_threshold, "floor": d.floor},
        "reports": [r.to_dict() for r in reports],
        "any_violation": any_violation,
    }, m)
    write_shap_csv(shap, out / "shap.csv", header_comment=_meta_line(m))
    write_shap_summary(shap, out / "shap_summary.json", {"schema_version": SCHEMA_VERSION, "meta": m})
    (out / "model.json").write_text(json.dumps({**model.to_dict(), "meta": m}, indent=1, sort_keys=True) + "\n")
    save_encodings(p.data, out / "encodings.json")
    _write_histograms(out, cfg, p, shap, base, m)
    return 2 if any_violation else 0


def run_baseline(cfg: AuditConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    m = meta(cfg, "baseline")
    p, _, _ = prepare(cfg)
    base = _baseline(cfg, p)
    for c in CRITERIA:
        st = base.stats[c]
        body = ({"per_outcome": {"0": st[0].to_dict(), "1": st[1].to_dict()}} if c == "equalized_odds"
                else st.to_dict())
        write_json(out / f"baseline_{c}.json", {
            "criterion": c,
            "distance_kind": "mean_abs" if c == "demographic_parity" else cfg.detection.distance,
            "k_permutations": cfg.detection.k_permutations,
            "permutation_seeds": [cfg.seed + i for i in range(1, cfg.detection.k_permutations + 1)],
            "baseline": body,
        }, m)
    return 0


def run_mitigate(cfg: AuditConfig) -> int:
    """Random and quadrant post-processing on the same plan, plus comparison artefacts."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    m = meta(cfg, "mitigate")
    ms = cfg.mitigation
    data, spec = load_csv(cfg.data_path(), cfg.schema)
    if len(spec.groups) != 2:
        raise ValueError(f"mitigation requires a binary protected attribute, got groups {spec.groups}")
    if ms.holdout_fraction is not None:
        fit_data, eval_data = split(data, 1.0 - ms.holdout_fraction, cfg.seed)
    else:
        fit_data = eval_data = data

    model, _, info = _fit_targets(cfg, fit_data, cfg.seed)
    if cfg.mode == "whitebox":
        scores = model.predict(eval_data.rows)
    elif cfg.mode == "blackbox_column":
        scores = np.asarray(eval_data.score, dtype=np.float64)
    else:
        scores = SubprocessOracle(cfg.oracle.command, cfg.oracle.batch_size, cfg.oracle.timeout).query(eval_data)
    vf = ValueFunctionConfig(fit_data, cfg.shap.max_background, cfg.shap.seed)
    shap = tree_shap(model, eval_data.rows, vf, eval_data.column_names)
    protected_shap = shap.column(spec.column)
    groups = eval_data.column(spec.column)
    label = lambda g: eval_data.decode(spec.column, g)  # noqa: E731

    table = calibration_table(scores, eval_data.label, ms.calibration_bins)
    warnings = [f"bin [{b.lo:.2f}, {b.hi:.2f}) gap {b.gap:.3f} exceeds {ms.calibration_tolerance}"
                for b in table if b.count >= ms.calibration_min_count and b.gap > ms.calibration_tolerance]
    for w in warnings:
        log.warning("classifier may be miscalibrated: %s", w)
    write_json(out / "calibration.json", {"bins": [b.to_dict() for b in table], "warnings": warnings}, m)

    cost = CostSpec(ms.w_fp, ms.w_fn)
    try:
        plan = plan_mitigation(scores, eval_data.label, groups, list(spec.groups), cost)
    except InfeasibleError as exc:
        st = group_stats(scores, eval_data.label, groups, list(spec.groups))
        costs = ", ".join(f"{label(g)}={s.cost(cost):.6g}" for g, s in st.items())
        raise InfeasibleError(f"{exc}; group costs: {costs}") from exc

    results = {}
    for method in METHODS:
        results[method] = mitigate(scores, eval_data.label, groups, list(spec.groups), protected_shap, method,
                                   cost, ms.seed, ms.distance, model.objective, plan)
        write_json(out / f"mitigation_{method}.json", {
            **results[method].to_dict(label),
            "distance_kind": ms.distance if method == "quadrant" else None,
            "model": info,
            "n_eval_rows": eval_data.n_rows,
        }, m)

    report = mitigation_report(plan.before, results["random"].after, results["quadrant"].after, cost, label)
    write_json(out / "mitigation_table.json", report, m)
    gnames = report["groups"]
    header = ["metric"] + [f"{v}:{g}" for v in report["variants"] for g in gnames]
    rows = [[metric] + [report["rows"][metric][v][g] for v in report["variants"] for g in gnames]
            for metric in report["metrics"]]
    rows.append(["weighted_cost"] + [report["weighted_cost"][v][g] for v in report["variants"] for g in gnames])
    write_csv_with_meta(out / "mitigation_table.csv", header, rows, m)

    t_mask = groups == plan.modified_group
    members = np.flatnonzero(t_mask)
    mu_t = plan.before[plan.modified_group].base_rate
    quads = quadrants(protected_shap[members], scores[members], mu_t)
    sel_r = set(results["random"].modified_indices.tolist())
    sel_q = set(results["quadrant"].modified_indices.tolist())
    scatter = [[int(i), float(protected_shap[i]), float(scores[i]), int(q), int(i in sel_r), int(i in sel_q)]
               for i, q in zip(members, quads)]
    write_csv_with_meta(out / "quadrant_scatter.csv",
                        ["row_id", "shap", "pred", "quadrant", "selected_random", "selected_quadrant"], scatter, m)
    return 0
