"""The four experiment suites.

Each suite is a pure function of its ExperimentSpec: data, initial weights
and batch order all derive from ``spec.seed``. Independent training runs are
fanned out over ``NOISYCAP_THREADS`` worker processes (default 1); each run
owns its own subdirectory and the CSVs are written after all runs finish.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .. import numcore as nc
from ..alignment import WeightSpec, bucket_many, fit_buckets, threshold_for_retention
from ..captioner import Captioner, CaptionerConfig
from ..metrics import MetricsReport, bleu4, evaluate_captions, oracle_align_captions
from ..microworld import Pair, WorldSpec, generate_dataset, inject_noise, pair_to_json
from ..training import TrainConfig, train
from .config import ExperimentSpec

log = logging.getLogger(__name__)

ZSWEEP_COLUMNS = ["model", "z", "bleu4", "cider_d", "oracle_align", "r1", "r5", "r10"]
NOISE_COLUMNS = ["model", "ratio", "z", "retained_n", "bleu4", "cider_d", "oracle_align", "r1", "r5", "r10"]
MEMO_COLUMNS = ["model", "z", "group", "n", "em", "bleu4", "oracle_align"]
ABLATION_COLUMNS = ["option", "k", "fusion", "bucketing", "best_z", "cider_d", "oracle_align", "bleu4", "data_hash"]

# keys for derived seeds
_TRAIN_DATA, _TEST_DATA, NOISE_KEY, _MEMO_DATA = 11, 12, 13, 14


@dataclass
class RunRecord:
    label: str
    config: dict
    checkpoint: str
    metrics: dict = field(default_factory=dict)  # "split/z" -> MetricsReport fields
    wallclock_s: float = 0.0


# -- helpers ------------------------------------------------------------------


def derive_seed(seed: int, key: int) -> int:
    return int(nc.make_rng(seed, key).integers(2**31 - 1))


def data_hash(pairs: Sequence[Pair]) -> str:
    h = hashlib.sha256()
    for p in pairs:
        h.update(json.dumps(pair_to_json(p), sort_keys=True).encode())
        h.update(b"\n")
    return h.hexdigest()[:16]


def train_set(spec: ExperimentSpec, n: int | None = None, key: int = _TRAIN_DATA) -> list[Pair]:
    return generate_dataset(spec.world(), spec.n_train if n is None else n, seed=derive_seed(spec.seed, key))


def test_set(spec: ExperimentSpec) -> list[Pair]:
    """Held-out scenes with uncorrupted captions; shared by every model in a suite."""
    clean = replace(spec.world(), corruption_mixture=((0.0, 1.0),))
    pairs = generate_dataset(clean, spec.n_test, seed=derive_seed(spec.seed, _TEST_DATA))
    return [Pair("t" + p.id, p.scene, p.caption, p.raw_score, p.true_corruption) for p in pairs]


def workers() -> int:
    raw = os.environ.get("NOISYCAP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"NOISYCAP_THREADS must be an integer, got {raw!r}") from None


def fan_out(fn: Callable, jobs: list) -> list:
    """``[fn(*job) for job in jobs]``, in job order, across worker processes if allowed."""
    n = min(workers(), len(jobs))
    if n <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n) as ex:
        futures = [ex.submit(fn, *job) for job in jobs]
        return [f.result() for f in futures]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_csv(path: Path, columns: list[str], rows: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])
    return path


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _metric_row(rep: MetricsReport) -> dict:
    row = {"bleu4": rep.bleu4, "cider_d": rep.cider_d, "oracle_align": rep.oracle_align_mean}
    for k, v in rep.recall_at.items():
        row[f"r{k}"] = v
    return row


def evaluate(model: Captioner, pairs: Sequence[Pair], world: WorldSpec, z, ks) -> MetricsReport:
    caps = model.generate([p.scene for p in pairs], world, z)
    return evaluate_captions(caps, pairs, world, ks)


def fit_model(
    label: str,
    model_config: CaptionerConfig,
    train_config: TrainConfig,
    pairs: Sequence[Pair],
    world: WorldSpec,
    run_dir: Path,
    bucketing: str = "uniform",
    weight_scale: float = 2.0,
    callback: Callable | None = None,
):
    """Train one model; bucket/weight specs are fit on ``pairs`` as given (before filtering)."""
    scores = np.array([p.raw_score for p in pairs])
    buckets = fit_buckets(scores, bucketing, model_config.k_levels) if model_config.conditioned else None
    weights = WeightSpec.fit(scores, weight_scale) if train_config.objective == "weighted" else None
    t0 = time.perf_counter()
    result = train(
        model_config, train_config, pairs, world.n_values, buckets, weights, out_dir=run_dir, callback=callback
    )
    if buckets is not None:
        (run_dir / "buckets.json").write_text(buckets.to_json())
    record = RunRecord(
        label,
        {"model": model_config.to_dict(), "train": train_config.to_dict(), "n_train": result.n_train},
        str(run_dir / "checkpoint"),
        wallclock_s=round(time.perf_counter() - t0, 3),
    )
    return result.model, record


def _save_records(out: Path, records: list[RunRecord]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "runs.json").write_text(json.dumps([asdict(r) for r in records], indent=2, sort_keys=True))


# -- controllability ----------------------------------------------------------


def _controllability_job(spec: ExperimentSpec, label: str, out: str):
    world = spec.world()
    data = train_set(spec)
    test = test_set(spec)
    model, rec = fit_model(
        label, spec.captioner(label), spec.trainer(label), data, world, Path(out) / label, spec.bucketing
    )
    rows = []
    zs = range(1, spec.k_levels + 1) if label == "conditioned" else [None]
    for z in zs:
        rep = evaluate(model, test, world, z, spec.recall_ks)
        rec.metrics[f"test/{'' if z is None else z}"] = asdict(rep)
        rows.append({"model": label, "z": z, **_metric_row(rep)})
    return rows, rec


def run_controllability(spec: ExperimentSpec, out: str | Path) -> Path:
    """Train conditioned and vanilla once; sweep z over 1..K for the conditioned model."""
    out = Path(out) / "controllability"
    results = fan_out(_controllability_job, [(spec, "conditioned", str(out)), (spec, "vanilla", str(out))])
    rows = [r for rs, _ in results for r in rs]
    _save_records(out, [rec for _, rec in results])
    return write_csv(out / "zsweep.csv", ZSWEEP_COLUMNS, rows)


# -- noise curve --------------------------------------------------------------


def _noise_job(spec: ExperimentSpec, label: str, ratio: float, out: str):
    world = spec.world()
    noisy = inject_noise(train_set(spec), ratio, derive_seed(spec.seed, NOISE_KEY), world)
    test = test_set(spec)
    scores = np.array([p.raw_score for p in noisy])
    threshold = threshold_for_retention(scores, spec.retain_fraction) if label == "filtering" else None
    tcfg = spec.trainer(label, threshold=threshold)
    run_dir = Path(out) / f"ratio{ratio:.2f}" / label
    model, rec = fit_model(label, spec.captioner(label), tcfg, noisy, world, run_dir, spec.bucketing, spec.weight_scale)
    z = spec.k_levels if label == "conditioned" else None
    rep = evaluate(model, test, world, z, spec.recall_ks)
    rec.metrics[f"test/{'' if z is None else z}"] = asdict(rep)
    row = {"model": label, "ratio": ratio, "z": z, "retained_n": rec.config["n_train"], **_metric_row(rep)}
    return row, rec


def run_noise_curve(spec: ExperimentSpec, out: str | Path, ratios: Sequence[float] | None = None) -> Path:
    """One row per (model, ratio); every model trains for the same ``total_steps``."""
    out = Path(out) / "noise_curve"
    ratios = spec.ratios if ratios is None else ratios
    jobs = [(spec, label, float(r), str(out)) for r in ratios for label in spec.models]
    results = fan_out(_noise_job, jobs)
    _save_records(out, [rec for _, rec in results])
    return write_csv(out / "noise_curve.csv", NOISE_COLUMNS, [row for row, _ in results])


# -- memorization -------------------------------------------------------------


def score_bands(pairs: Sequence[Pair], spec: ExperimentSpec) -> dict[str, list[Pair]]:
    """Noisy and clean bands of the training set.

    Quantile mode takes the bottom ``band_low`` and top ``1 - band_high``
    fractions by rank (ties broken by pair id); absolute mode uses the two
    values as score thresholds.
    """
    if spec.band_mode == "absolute":
        return {
            "noisy": [p for p in pairs if p.raw_score <= spec.band_low],
            "clean": [p for p in pairs if p.raw_score >= spec.band_high],
        }
    ranked = sorted(pairs, key=lambda p: (p.raw_score, p.id))
    n = len(ranked)
    lo = int(np.floor(spec.band_low * n))
    hi = int(np.ceil(spec.band_high * n))
    return {"noisy": ranked[:lo], "clean": ranked[hi:]}


def plateau_step(history: Sequence[tuple[int, int]], patience: int = 3) -> int | None:
    """First eval step after which train EM did not rise for ``patience`` consecutive windows."""
    best, since, start = -1, 0, None
    for step, em in history:
        if em > best:
            best, since, start = em, 0, step
        else:
            since += 1
            if since >= patience:
                return start
    return None


def _memo_job(spec: ExperimentSpec, label: str, out: str):
    world = spec.world()
    data = train_set(spec, spec.memo_n_train, key=_MEMO_DATA)
    bands = score_bands(data, spec)
    probe = data[: spec.memo_probe_n]
    probe_scores = np.array([p.raw_score for p in probe])
    levels = None
    if label == "conditioned":
        fit = fit_buckets(np.array([p.raw_score for p in data]), spec.bucketing, spec.k_levels)
        levels = bucket_many(fit, probe_scores)
    history: list[tuple[int, int]] = []

    def track(step, model):
        # train EM on a fixed probe subset; conditioned models decode at each pair's own level
        caps = model.generate([p.scene for p in probe], world, levels)
        history.append((step, sum(tuple(c) == p.caption for c, p in zip(caps, probe))))

    tcfg = replace(spec.trainer(label, steps=spec.memo_steps), eval_every=spec.memo_eval_every)
    model, rec = fit_model(
        label, spec.captioner(label), tcfg, data, world, Path(out) / label, spec.bucketing, callback=track
    )
    rec.metrics["train_em_probe"] = {"n": len(probe), "history": history, "plateau_step": plateau_step(history)}
    if rec.metrics["train_em_probe"]["plateau_step"] is None:
        log.warning("%s: train EM still rising at the %d-step cap", label, spec.memo_steps)
    rows = []
    zs = spec.report_z() if label == "conditioned" else [None]
    for z in zs:
        for group in ("noisy", "clean"):
            pairs = bands[group]
            if not pairs:
                rows.append({"model": label, "z": z, "group": group, "n": 0, "em": 0, "bleu4": 0.0, "oracle_align": 0.0})
                continue
            caps = model.generate([p.scene for p in pairs], world, z)
            refs = [p.caption for p in pairs]
            rows.append(
                {
                    "model": label,
                    "z": z,
                    "group": group,
                    "n": len(pairs),
                    "em": sum(tuple(c) == tuple(r) for c, r in zip(caps, refs)),
                    "bleu4": bleu4(caps, refs),
                    "oracle_align": oracle_align_captions([p.scene for p in pairs], caps, world),
                }
            )
    return rows, rec


def run_memorization(spec: ExperimentSpec, out: str | Path) -> Path:
    """Long training on a small set, then exact-match counts per score band."""
    out = Path(out) / "memorization"
    results = fan_out(_memo_job, [(spec, "vanilla", str(out)), (spec, "conditioned", str(out))])
    _save_records(out, [rec for _, rec in results])
    return write_csv(out / "memorization.csv", MEMO_COLUMNS, [r for rs, _ in results for r in rs])


# -- ablations ----------------------------------------------------------------


def _ablation_job(spec: ExperimentSpec, k: int, fusion: str, bucketing: str, out: str):
    world = spec.world()
    data = train_set(spec)
    test = test_set(spec)
    name = f"k{k}_{fusion}_{bucketing}"
    model, rec = fit_model(
        "conditioned",
        spec.captioner("conditioned", k_levels=k, fusion=fusion),
        spec.trainer("conditioned"),
        data,
        world,
        Path(out) / "runs" / name,
        bucketing,
    )
    best = None
    for z in range(1, k + 1):
        rep = evaluate(model, test, world, z, spec.recall_ks)
        rec.metrics[f"test/{z}"] = asdict(rep)
        if best is None or rep.oracle_align_mean > best[1].oracle_align_mean:
            best = (z, rep)
    z, rep = best
    row = {
        "k": k,
        "fusion": fusion,
        "bucketing": bucketing,
        "best_z": z,
        "cider_d": rep.cider_d,
        "oracle_align": rep.oracle_align_mean,
        "bleu4": rep.bleu4,
        "data_hash": data_hash(data),
    }
    return row, rec


def run_ablations(spec: ExperimentSpec, out: str | Path) -> dict[str, Path]:
    """Bucketing, fusion and K sweeps around the default configuration.

    Each sweep varies one axis and keeps data, seed and step budget fixed.
    Configurations shared between sweeps are trained once. Metrics are
    reported at the z with the highest oracle alignment.
    """
    out = Path(out) / "ablations"
    sweeps = {
        "bucketing": [(spec.k_levels, spec.fusion, b) for b in spec.ablation_bucketing],
        "fusion": [(spec.k_levels, f, spec.bucketing) for f in spec.ablation_fusion],
        "k": [(k, spec.fusion, spec.bucketing) for k in spec.ablation_k],
    }
    unique = sorted({c for configs in sweeps.values() for c in configs}, key=str)
    results = dict(zip(unique, fan_out(_ablation_job, [(spec, *c, str(out)) for c in unique])))
    _save_records(out, [results[c][1] for c in unique])
    paths = {}
    for axis, configs in sweeps.items():
        rows = []
        for c in configs:
            row = dict(results[c][0])
            row["option"] = {"bucketing": c[2], "fusion": c[1], "k": c[0]}[axis]
            rows.append(row)
        paths[axis] = write_csv(out / f"ablation_{axis}.csv", ABLATION_COLUMNS, rows)
    return paths


SUITES = {
    "controllability": run_controllability,
    "noise": run_noise_curve,
    "memorization": run_memorization,
    "ablations": run_ablations,
}
