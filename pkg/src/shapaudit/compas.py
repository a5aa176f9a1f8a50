"""Prepare ProPublica's ``compas-scores-two-years.csv`` for auditing.

Applies ProPublica's row filters, keeps African-American and Caucasian
defendants, and labels ``score_text == "Low"`` as the favourable outcome 1.
The raw file is not shipped; pass its path explicitly::

    python -m shapaudit.compas compas-scores-two-years.csv compas_audit.csv
"""

from __future__ import annotations

import csv
import sys
from pathlib import Path

FEATURES = ("sex", "age", "race", "juv_fel_count", "juv_misd_count", "juv_other_count", "priors_count",
            "c_charge_degree")
RACES = ("Caucasian", "African-American")


def prepare_compas(raw_path: str | Path, out_path: str | Path) -> int:
    """Write the filtered audit CSV and return its row count."""
    with Path(raw_path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        pos = {}
        for i, name in enumerate(header):
            pos.setdefault(name, i)  # the raw file repeats some column names
        kept = []
        for rec in reader:
            if not rec:
                continue
            get = lambda c: rec[pos[c]]  # noqa: E731
            days = get("days_b_screening_arrest")
            if days == "" or not -30 <= float(days) <= 30:
                continue
            if get("is_recid") == "-1" or get("c_charge_degree") == "O" or get("score_text") in ("N/A", ""):
                continue
            if get("race") not in RACES:
                continue
            kept.append([get(c) for c in FEATURES] + ["1" if get("score_text") == "Low" else "0"])
    with Path(out_path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(FEATURES) + ["low_score"])
        w.writerows(kept)
    return len(kept)


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit("usage: python -m shapaudit.compas RAW_CSV OUT_CSV")
    print(prepare_compas(sys.argv[1], sys.argv[2]))
