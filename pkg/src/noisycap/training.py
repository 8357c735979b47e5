"""Training objectives (vanilla, alignment-conditioned, similarity-weighted) and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .alignment import BucketSpec, WeightSpec, bucket_many, filter_pairs, loss_weights
from .captioner import Captioner, CaptionerConfig, multi_hot
from .microworld import BOS, EOS, PAD, Pair
from .numcore import Tensor

log = logging.getLogger(__name__)

OBJECTIVES = ("vanilla", "conditioned", "weighted")


class EmptyTrainingSet(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: "TrainState"):
        super().__init__(f"non-finite loss at step {step}; last good state is step {last_good.step}")
        self.step = step
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "vanilla"
    filter_threshold: float | None = None
    total_steps: int = 3000
    batch_size: int = 64
    base_lr: float = 3e-3
    warmup_fraction: float = 0.10
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"TrainConfig: unknown objective {self.objective!r}")
        if self.total_steps < 1:
            raise ValueError("TrainConfig: total_steps must be >= 1")
        if self.filter_threshold is not None and self.objective != "vanilla":
            raise ValueError("TrainConfig: filtering only combines with the vanilla objective")
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# -- batches ------------------------------------------------------------------


@dataclass
class Batch:
    features: np.ndarray  # (B, n_features) multi-hot scenes
    inputs: np.ndarray  # (B, L) BOS w1..wT PAD..
    targets: np.ndarray  # (B, L) w1..wT EOS PAD..
    mask: np.ndarray  # (B, L) 1.0 on scored positions
    levels: np.ndarray | None = None
    scores: np.ndarray | None = None

    def __len__(self) -> int:
        return self.inputs.shape[0]


def make_batch(
    pairs: Sequence[Pair],
    n_values: int,
    n_features: int,
    levels: np.ndarray | None = None,
    scores: np.ndarray | None = None,
) -> Batch:
    if len(pairs) == 0:
        raise EmptyTrainingSet("make_batch: empty batch")
    b = len(pairs)
    length = max(len(p.caption) for p in pairs) + 1
    inputs = np.full((b, length), PAD, dtype=np.int64)
    targets = np.full((b, length), PAD, dtype=np.int64)
    mask = np.zeros((b, length), dtype=np.float32)
    for i, p in enumerate(pairs):
        t = len(p.caption)
        inputs[i, 0] = BOS
        inputs[i, 1 : t + 1] = p.caption
        targets[i, :t] = p.caption
        targets[i, t] = EOS
        mask[i, : t + 1] = 1.0
    feats = multi_hot(np.array([p.scene.attrs for p in pairs]), n_values, n_features)
    return Batch(feats, inputs, targets, mask, levels, scores)


# -- losses -------------------------------------------------------------------


def sequence_nll(logits: Tensor, batch: Batch) -> Tensor:
    """Per-example summed NLL over caption positions (EOS included, padding excluded), shape (B,)."""
    return (nc.cross_entropy(logits, batch.targets) * batch.mask).sum(axis=1)


def loss_vanilla(model: Captioner, batch: Batch) -> Tensor:
    if len(batch) == 0:
        raise EmptyTrainingSet("loss_vanilla: empty batch")
    return sequence_nll(model.logits(batch.features, batch.inputs), batch).mean()


def loss_conditioned(model: Captioner, batch: Batch) -> Tensor:
    if batch.levels is None:
        raise ValueError("loss_conditioned: batch has no alignment levels")
    return sequence_nll(model.logits(batch.features, batch.inputs, batch.levels), batch).mean()


def loss_weighted(model: Captioner, batch: Batch, spec: WeightSpec) -> Tensor:
    if batch.scores is None:
        raise ValueError("loss_weighted: batch has no scores")
    w = loss_weights(spec, batch.scores).astype(np.float32)
    return (sequence_nll(model.logits(batch.features, batch.inputs), batch) * w).mean()


# -- state --------------------------------------------------------------------


@dataclass
class TrainState:
    step: int
    params: dict[str, np.ndarray]
    opt: nc.OptimizerState
    rng_state: dict
    order: np.ndarray
    cursor: int
    loss_ema: float | None = None

    def copy(self) -> "TrainState":
        opt = replace(
            self.opt,
            first_moment=[m.copy() for m in self.opt.first_moment],
            second_moment=[v.copy() for v in self.opt.second_moment],
        )
        return TrainState(
            self.step,
            {k: v.copy() for k, v in self.params.items()},
            opt,
            json.loads(json.dumps(self.rng_state)),
            self.order.copy(),
            self.cursor,
            self.loss_ema,
        )

    def save(self, path: str | Path, model_config: CaptionerConfig, train_config: TrainConfig) -> Path:
        names = list(self.params)
        tensors = dict(self.params)
        for i, n in enumerate(names):
            tensors[f"opt.m.{n}"] = self.opt.first_moment[i]
            tensors[f"opt.v.{n}"] = self.opt.second_moment[i]
        extra = {
            "step": self.step,
            "step_count": self.opt.step_count,
            "rng_state": self.rng_state,
            "order": self.order.tolist(),
            "cursor": self.cursor,
            "loss_ema": self.loss_ema,
        }
        return nc.save_checkpoint(path, tensors, _run_config(model_config, train_config), extra)

    @classmethod
    def load(cls, path: str | Path, model_config: CaptionerConfig, train_config: TrainConfig) -> "TrainState":
        tensors, manifest = nc.load_checkpoint(path, _run_config(model_config, train_config))
        extra = manifest["extra"]
        names = [n for n in tensors if not n.startswith("opt.")]
        opt = _new_opt([tensors[n] for n in names], train_config)
        opt.step_count = extra["step_count"]
        opt.first_moment = [tensors[f"opt.m.{n}"].copy() for n in names]
        opt.second_moment = [tensors[f"opt.v.{n}"].copy() for n in names]
        return cls(
            extra["step"],
            {n: tensors[n].copy() for n in names},
            opt,
            extra["rng_state"],
            np.asarray(extra["order"], dtype=np.int64),
            extra["cursor"],
            extra["loss_ema"],
        )


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return {"__u64__": [int(x) for x in obj]}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__u64__" in obj:
            return np.array(obj["__u64__"], dtype=np.uint64)
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj


def _run_config(model_config: CaptionerConfig, train_config: TrainConfig) -> dict:
    return {"model": model_config.to_dict(), "train": train_config.to_dict()}


def _new_opt(params, cfg: TrainConfig) -> nc.OptimizerState:
    return nc.OptimizerState.for_params(
        params, base_lr=cfg.base_lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay
    )


def save_model(path: str | Path, model: Captioner, extra: dict | None = None) -> Path:
    return nc.save_checkpoint(path, model.state_dict(), {"model": model.config.to_dict()}, extra)


def load_model(path: str | Path) -> Captioner:
    params, manifest = nc.load_checkpoint(path)
    cfg_dict = dict(manifest["config"]["model"])
    cfg = CaptionerConfig(**cfg_dict)
    if nc.config_hash({"model": cfg.to_dict()}) != manifest["config_hash"]:
        raise nc.CheckpointError("checkpoint config_hash does not match embedded config")
    model_params = {k: v for k, v in params.items() if not k.startswith("opt.")}
    return Captioner(cfg, params=model_params)


# -- loop ---------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Captioner
    state: TrainState
    log: list[dict] = field(default_factory=list)
    n_train: int = 0
    updates: int = 0

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "lr", "loss", "wallclock_ms"])
            w.writeheader()
            for row in self.log:
                w.writerow(row)


def prepare_dataset(cfg: TrainConfig, pairs: Sequence[Pair]) -> list[Pair]:
    data = list(pairs)
    if cfg.filter_threshold is not None:
        data = filter_pairs(data, cfg.filter_threshold)
    if not data:
        raise EmptyTrainingSet("empty training set")
    return data


def train(
    model_config: CaptionerConfig,
    cfg: TrainConfig,
    pairs: Sequence[Pair],
    n_values: int,
    bucket_spec: BucketSpec | None = None,
    weight_spec: WeightSpec | None = None,
    out_dir: str | Path | None = None,
    resume: TrainState | None = None,
    stop_at: int | None = None,
    callback: Callable[[int, Captioner], None] | None = None,
) -> TrainResult:
    """Run ``cfg.total_steps`` AdamW updates on shuffled minibatches.

    Update ``i`` (0-based) uses ``lr_at(i + 1)``. The data order is a fresh
    permutation per pass over the (possibly filtered) set, drawn from the run
    seed. ``stop_at`` halts early at that step so a later ``resume`` can
    continue the identical trajectory.
    """
    if model_config.conditioned != (cfg.objective == "conditioned"):
        raise ValueError("train: conditioned models need the conditioned objective and vice versa")
    data = prepare_dataset(cfg, pairs)
    n = len(data)
    scores = np.array([p.raw_score for p in data])
    levels = None
    if cfg.objective == "conditioned":
        if bucket_spec is None:
            raise ValueError("train: conditioned objective needs a BucketSpec")
        levels = bucket_many(bucket_spec, scores)
        if bucket_spec.k != model_config.k_levels:
            raise ValueError("train: BucketSpec.k differs from the model's k_levels")
    if cfg.objective == "weighted" and weight_spec is None:
        raise ValueError("train: weighted objective needs a WeightSpec")

    schedule = nc.LrSchedule(cfg.base_lr, cfg.total_steps, cfg.warmup_fraction)
    rng = nc.make_rng(cfg.seed, 1)
    if resume is None:
        model = Captioner(model_config, seed=cfg.seed)
        params = model.parameters()
        state = TrainState(0, {}, _new_opt([p.data for p in params], cfg), {}, rng.permutation(n), 0)
        state.rng_state = _jsonable(rng.bit_generator.state)
    else:
        state = resume.copy()
        model = Captioner(model_config, params=state.params)
        params = model.parameters()
        rng.bit_generator.state = _from_jsonable(state.rng_state)
    state.params = {k: t.data for k, t in model.params.items()}
    last_good = state.copy()

    stop = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    t0 = time.perf_counter()
    rows: list[dict] = []
    updates = 0
    n_features = model_config.n_features
    while state.step < stop:
        bs = min(cfg.batch_size, n)
        if state.cursor + bs > n:
            state.order = rng.permutation(n)
            state.cursor = 0
            state.rng_state = _jsonable(rng.bit_generator.state)
        idx = state.order[state.cursor : state.cursor + bs]
        state.cursor += bs
        batch = make_batch(
            [data[i] for i in idx],
            n_values,
            n_features,
            None if levels is None else levels[idx],
            scores[idx],
        )
        if cfg.objective == "vanilla":
            loss = loss_vanilla(model, batch)
        elif cfg.objective == "conditioned":
            loss = loss_conditioned(model, batch)
        else:
            loss = loss_weighted(model, batch, weight_spec)
        value = loss.item()
        if not np.isfinite(value):
            if out_dir is not None:
                last_good.save(Path(out_dir) / "last_good", model_config, cfg)
            raise TrainingDiverged(state.step, last_good)
        grads = nc.backward(loss, params)
        lr = nc.lr_at(schedule, state.step + 1)
        nc.adamw_step([p.data for p in params], grads, state.opt, lr)
        state.step += 1
        updates += 1
        state.loss_ema = value if state.loss_ema is None else 0.98 * state.loss_ema + 0.02 * value
        rows.append(
            {
                "step": state.step,
                "lr": f"{lr:.8g}",
                "loss": f"{value:.6f}",
                "wallclock_ms": int((time.perf_counter() - t0) * 1000),
            }
        )
        if cfg.eval_every and state.step % cfg.eval_every == 0:
            last_good = state.copy()
            if out_dir is not None:
                state.save(Path(out_dir) / "state", model_config, cfg)
            if callback is not None:
                callback(state.step, model)
            log.debug("step %d loss %.4f (ema %.4f) lr %.2e", state.step, value, state.loss_ema, lr)

    result = TrainResult(model, state, rows, n, updates)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_model(out / "checkpoint", model, {"steps": state.step, "n_train": n})
        result.write_log(out / "train_log.csv")
    return result
