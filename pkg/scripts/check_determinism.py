#!/usr/bin/env python3
"""Run one suite twice with the same seed and compare every CSV byte for byte."""

from __future__ import annotations

import argparse
import sys
import tempfile
from pathlib import Path

from noisycap.harness import SUITES, load_spec


def run_twice(spec, suite: str, root: Path) -> list[str]:
    for tag in ("a", "b"):
        SUITES[suite](spec, root / tag)
    diffs = []
    for a in sorted((root / "a").rglob("*.csv")):
        if a.name == "train_log.csv":  # carries wallclock_ms
            continue
        b = root / "b" / a.relative_to(root / "a")
        if not b.exists() or a.read_bytes() != b.read_bytes():
            diffs.append(str(a.relative_to(root / "a")))
    return diffs


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("suite", choices=sorted(SUITES))
    ap.add_argument("--config", default="configs/smoke.json")
    args = ap.parse_args()
    spec = load_spec(args.config)
    with tempfile.TemporaryDirectory() as tmp:
        diffs = run_twice(spec, args.suite, Path(tmp))
    for d in diffs:
        print("differs:", d)
    print("identical" if not diffs else f"{len(diffs)} file(s) differ")
    return 1 if diffs else 0


if __name__ == "__main__":
    sys.exit(main())
