#!/usr/bin/env python3
"""Run several experiment suites with one config, then write report.md.

    python scripts/run_experiments.py --config configs/acc.json --out runs/default
    python scripts/run_experiments.py --config configs/smoke.json --out runs/smoke --suites controllability noise
"""

from __future__ import annotations

import argparse
import logging
import time
from pathlib import Path

from noisycap.harness import SUITES, load_spec, write_report

ORDER = ("controllability", "noise", "memorization", "ablations")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/acc.json")
    ap.add_argument("--out", required=True)
    ap.add_argument("--suites", nargs="+", choices=ORDER, default=list(ORDER))
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    spec = load_spec(args.config, seed=args.seed, output_dir=args.out)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(spec.to_json() + "\n")
    for name in args.suites:
        t0 = time.perf_counter()
        SUITES[name](spec, out)
        logging.info("%s finished in %.1f s", name, time.perf_counter() - t0)
    print(write_report(out))


if __name__ == "__main__":
    main()
