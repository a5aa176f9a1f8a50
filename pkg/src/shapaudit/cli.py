"""Command-line entry point.

Exit codes: 0 success, 1 error (config, schema, training, infeasible
mitigation), 2 audit completed and at least one criterion flagged a violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import load_config
from .detect import DISTANCES
from .pipeline import run_audit, run_baseline, run_mitigate

EXIT_OK, EXIT_ERROR, EXIT_VIOLATION = 0, 1, 2


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="JSON or TOML audit config")
    p.add_argument("--out", default=d, help="output directory (overrides config)")
    p.add_argument("--seed", type=int, default=d, help="master seed (overrides config)")
    p.add_argument("--distance", choices=DISTANCES, default=d, help="distribution distance for criteria")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapaudit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"shapaudit {__version__}")
    _global_flags(parser, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("audit", "fit or distil, explain, and test all fairness criteria"),
                        ("baseline", "compute randomized-attribute baseline statistics"),
                        ("mitigate", "random vs attribution-guided calibrated post-processing")):
        sp = sub.add_parser(name, help=help_)
        _global_flags(sp, suppress=True)
    rp = sub.add_parser("report", help="pretty-print a JSON artefact")
    rp.add_argument("path")
    return parser


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    if isinstance(v, list):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def render(doc: dict) -> str:
    """Human-readable rendering of audit reports and mitigation tables; raw JSON otherwise."""
    lines = []
    if "reports" in doc:
        ds = doc.get("dataset", {})
        lines.append(f"protected attribute: {ds.get('protected')}  groups: {ds.get('groups')}  rows: {ds.get('n_rows')}")
        model = doc.get("model", {})
        if "fidelity" in model:
            lines.append(f"mimic fidelity ({model['fidelity_kind']}): {model['fidelity']:.4f}")
        lines.append(f"{'criterion':<26}{'distance':<14}{'metric':<22}{'baseline mean':<22}{'ratio':<22}verdict")
        for r in doc["reports"]:
            b = r["baseline"]
            bm = b["mean"] if isinstance(b, dict) else [x["mean"] for x in b]
            lines.append(f"{r['criterion']:<26}{r['distance_kind']:<14}{_fmt(r['metric']):<22}{_fmt(bm):<22}"
                         f"{_fmt(r['ratio']):<22}{r['verdict']}")
        return "\n".join(lines)
    if "rows" in doc and "variants" in doc:
        cols = [(v, g) for v in doc["variants"] for g in doc["groups"]]
        lines.append(f"{'':<14}" + "".join(f"{v + ':' + g:>18}" for v, g in cols))
        for metric in doc["metrics"]:
            lines.append(f"{metric:<14}" + "".join(f"{doc['rows'][metric][v][g]:>18.3f}" for v, g in cols))
        lines.append(f"{'weighted_cost':<14}" + "".join(f"{doc['weighted_cost'][v][g]:>18.3f}" for v, g in cols))
        lines.append("cost gap: " + ", ".join(f"{v}={doc['cost_gap'][v]:.4f}" for v in doc["variants"]))
        return "\n".join(lines)
    return json.dumps(doc, indent=2, sort_keys=True)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            print(render(json.loads(Path(args.path).read_text())))
            return EXIT_OK
        if getattr(args, "config", None) is None:
            raise ValueError("--config is required")
        cfg = load_config(args.config).with_overrides(
            seed=getattr(args, "seed", None), out=getattr(args, "out", None),
            distance=getattr(args, "distance", None))
        runner = {"audit": run_audit, "baseline": run_baseline, "mitigate": run_mitigate}[args.command]
        return runner(cfg)
    except Exception as exc:  # every failure maps to exit 1 with a structured message
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
