"""Markdown summary of whatever suite CSVs exist under an output directory."""

from __future__ import annotations

import csv
from pathlib import Path

SUITE_FILES = (
    ("Controllability (z sweep)", "controllability/zsweep.csv"),
    ("Noise injection curve", "noise_curve/noise_curve.csv"),
    ("Memorization by score band", "memorization/memorization.csv"),
    ("Ablation: bucketing", "ablations/ablation_bucketing.csv"),
    ("Ablation: fusion", "ablations/ablation_fusion.csv"),
    ("Ablation: number of levels", "ablations/ablation_k.csv"),
)


def csv_to_markdown(path: Path) -> str:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return "_empty_\n"
    head, body = rows[0], rows[1:]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    lines += ["| " + " | ".join(r) + " |" for r in body]
    return "\n".join(lines) + "\n"


def write_report(out: str | Path) -> Path:
    out = Path(out)
    parts = ["# noisycap experiment report\n"]
    found = 0
    for title, rel in SUITE_FILES:
        p = out / rel
        if p.is_file():
            found += 1
            parts.append(f"## {title}\n\n`{rel}`\n\n{csv_to_markdown(p)}")
    if not found:
        raise FileNotFoundError(f"no suite CSVs under {out}")
    path = out / "report.md"
    path.write_text("\n".join(parts))
    return path
