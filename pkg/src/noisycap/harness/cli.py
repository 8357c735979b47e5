"""Command-line entry point: ``python -m noisycap <command> ...``.

Every command accepts ``--config file.json`` plus one flag per config key
(``--total-steps 500`` overrides ``total_steps``). Outputs go under ``--out``
only. Failures print a single ``noisycap: error: ...`` line and exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..alignment import STRATEGIES, fit_buckets, threshold_for_retention
from ..metrics import evaluate_captions
from ..microworld import inject_noise, read_jsonl, read_score_tsv, override_scores, write_jsonl
from ..training import load_model
from .config import MODEL_LABELS, SPEC_FIELDS, ConfigError, load_spec
from .report import write_report
from .suites import NOISE_KEY, SUITES, derive_seed, fit_model, test_set, train_set

EXIT_USAGE = 2


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one line, machine-parsable
        raise CliError(message)


def _sequence(text: str):
    try:
        v = json.loads(text)
    except json.JSONDecodeError:
        v = [x.strip() for x in text.split(",") if x.strip()]
        v = [json.loads(x) if x.replace(".", "", 1).lstrip("-").isdigit() else x for x in v]
    if not isinstance(v, list):
        v = [v]
    return v


def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat JSON config file")
    p.add_argument("--out", required=True, help="output directory")
    for name, default in SPEC_FIELDS.items():
        if name == "output_dir":
            continue
        flag = "--" + name.replace("_", "-")
        if isinstance(default, bool):
            kind = lambda s: s.lower() in ("1", "true", "yes")  # noqa: E731
        elif isinstance(default, (tuple, list)):
            kind = _sequence
        else:
            kind = type(default)
        p.add_argument(flag, dest=name, type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="noisycap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic pair dataset")
    _add_spec_flags(p)
    p.add_argument("--n", type=int, default=None, help="number of pairs (default: n_train)")
    p.add_argument("--noise-ratio", type=float, default=0.0)

    p = sub.add_parser("fit-buckets", help="fit alignment buckets to a dataset's scores")
    _add_spec_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--scores", default=None, help="optional id<TAB>score file overriding stored scores")
    p.add_argument("--strategy", choices=STRATEGIES, default=None)
    p.add_argument("--k", type=int, default=None)

    p = sub.add_parser("train", help="train one model")
    _add_spec_flags(p)
    p.add_argument("--model", choices=MODEL_LABELS, default="conditioned")
    p.add_argument("--data", default=None, help="pairs.jsonl (default: generate from config)")
    p.add_argument("--filter-threshold", type=float, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_spec_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None, help="pairs.jsonl (default: the config's clean test set)")
    p.add_argument("--z", type=int, default=None)

    p = sub.add_parser("experiment", help="run an experiment suite")
    p.add_argument("suite", choices=sorted(SUITES))
    _add_spec_flags(p)

    p = sub.add_parser("report", help="summarise suite CSVs under --out into report.md")
    p.add_argument("--out", required=True)
    return parser


def _spec(args):
    overrides = {k: getattr(args, k) for k in SPEC_FIELDS if k != "output_dir" and hasattr(args, k)}
    return load_spec(args.config, output_dir=args.out, **overrides)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_pairs(path: str):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"data file not found: {p}")
    return read_jsonl(p)


def cmd_gen_data(args) -> None:
    spec = _spec(args)
    world = spec.world()
    pairs = train_set(spec, args.n)
    if args.noise_ratio:
        pairs = inject_noise(pairs, args.noise_ratio, derive_seed(spec.seed, NOISE_KEY), world)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(pairs, out / "pairs.jsonl")
    _write_json(out / "world.json", world.to_dict())


def cmd_fit_buckets(args) -> None:
    spec = _spec(args)
    pairs = _load_pairs(args.data)
    if args.scores:
        pairs = override_scores(pairs, read_score_tsv(args.scores))
    scores = np.array([p.raw_score for p in pairs])
    b = fit_buckets(scores, args.strategy or spec.bucketing, args.k or spec.k_levels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "buckets.json").write_text(b.to_json() + "\n")


def cmd_train(args) -> None:
    spec = _spec(args)
    world = spec.world()
    pairs = _load_pairs(args.data) if args.data else train_set(spec)
    threshold = args.filter_threshold
    if args.model == "filtering" and threshold is None:
        threshold = threshold_for_retention([p.raw_score for p in pairs], spec.retain_fraction)
    tcfg = spec.trainer(args.model, threshold=threshold)
    _, rec = fit_model(
        args.model, spec.captioner(args.model), tcfg, pairs, world, Path(args.out), spec.bucketing, spec.weight_scale
    )
    _write_json(Path(args.out) / "run.json", {"label": rec.label, "config": rec.config, "checkpoint": rec.checkpoint})


def cmd_eval(args) -> None:
    spec = _spec(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CliError(f"checkpoint not found: {ckpt}")
    model = load_model(ckpt)
    world = spec.world()
    pairs = _load_pairs(args.data) if args.data else test_set(spec)
    z = args.z
    if model.config.conditioned and z is None:
        z = model.config.k_levels
    caps = model.generate([p.scene for p in pairs], world, z)
    rep = evaluate_captions(caps, pairs, world, spec.recall_ks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(rep.to_json() + "\n")


def cmd_experiment(args) -> None:
    spec = _spec(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(spec.to_json() + "\n")
    SUITES[args.suite](spec, out)


def cmd_report(args) -> None:
    out = Path(args.out)
    if not out.is_dir():
        raise CliError(f"output directory not found: {out}")
    write_report(out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "fit-buckets": cmd_fit_buckets,
    "train": cmd_train,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        COMMANDS[args.command](args)
    except (CliError, ConfigError, ValueError, OSError) as e:
        msg = " ".join(str(e).split())
        print(f"noisycap: error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
