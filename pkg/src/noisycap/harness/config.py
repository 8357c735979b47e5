"""Flat experiment configuration.

Every field of :class:`ExperimentSpec` is a top-level JSON key, and the CLI
exposes each one as ``--field-name`` so a flag overrides exactly one key.
"""

from __future__ import annotations

import json
import math
from dataclasses import MISSING, asdict, dataclass, fields, replace
from pathlib import Path

from ..alignment import STRATEGIES
from ..captioner import FUSIONS, CaptionerConfig
from ..microworld import DEFAULT_MIXTURE, WorldSpec
from ..training import TrainConfig

MODEL_LABELS = ("vanilla", "filtering", "weighted", "conditioned")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    name: str = "default"
    seed: int = 0
    output_dir: str = "runs"
    # world
    n_slots: int = 6
    n_values: int = 8
    mixture: tuple = DEFAULT_MIXTURE
    mention_prob: float = 0.95
    n_train: int = 20000
    n_test: int = 500
    # model
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    k_levels: int = 8
    fusion: str = "concat_seq"
    bucketing: str = "uniform"
    # optimisation
    total_steps: int = 3000
    batch_size: int = 64
    base_lr: float = 3e-3
    warmup_fraction: float = 0.10
    weight_decay: float = 0.01
    # sweeps
    models: tuple = MODEL_LABELS
    z_values: tuple = ()
    ratios: tuple = (0.0, 0.2, 0.4, 0.6, 0.8)
    retain_fraction: float = 0.4
    weight_scale: float = 2.0
    recall_ks: tuple = (1, 5, 10)
    # memorization
    memo_n_train: int = 5000
    memo_steps: int = 6000
    memo_eval_every: int = 500
    memo_probe_n: int = 500
    band_mode: str = "quantile"
    band_low: float = 0.2
    band_high: float = 0.8
    # ablations
    ablation_bucketing: tuple = STRATEGIES
    ablation_fusion: tuple = FUSIONS
    ablation_k: tuple = (4, 8, 16)

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(tuple(x) if isinstance(x, list) else x for x in v))
        self.validate()

    def validate(self) -> None:
        def bad(msg):
            raise ConfigError(f"config: {msg}")

        if len(set(self.models)) != len(self.models):
            bad("model labels must be unique")
        for m in self.models:
            if m not in MODEL_LABELS:
                bad(f"unknown model label {m!r}")
        if self.fusion not in FUSIONS or any(f not in FUSIONS for f in self.ablation_fusion):
            bad("fusion must be one of " + ", ".join(FUSIONS))
        if self.bucketing not in STRATEGIES or any(s not in STRATEGIES for s in self.ablation_bucketing):
            bad("bucketing must be one of " + ", ".join(STRATEGIES))
        if self.k_levels < 1 or any(k < 1 for k in self.ablation_k):
            bad("bucket counts must be >= 1")
        if any(not 1 <= z <= self.k_levels for z in self.z_values):
            bad(f"z values must lie in 1..{self.k_levels}")
        if any(not 0.0 <= r <= 1.0 for r in self.ratios):
            bad("noise ratios must lie in [0, 1]")
        if not 0.0 < self.retain_fraction <= 1.0:
            bad("retain_fraction must lie in (0, 1]")
        if self.band_mode not in ("quantile", "absolute"):
            bad("band_mode must be 'quantile' or 'absolute'")
        if self.band_mode == "quantile" and not 0.0 < self.band_low <= self.band_high < 1.0:
            bad("quantile bands need 0 < band_low <= band_high < 1")
        if self.n_train < 1 or self.n_test < 1 or self.memo_n_train < 1:
            bad("dataset sizes must be >= 1")
        if self.total_steps < 1 or self.memo_steps < 1:
            bad("step budgets must be >= 1")
        if self.memo_eval_every < 1 or self.memo_probe_n < 1:
            bad("memo_eval_every and memo_probe_n must be >= 1")
        if any(k < 1 for k in self.recall_ks):
            bad("recall K values must be >= 1")
        try:
            self.world()
        except ValueError as e:
            bad(str(e))

    # -- derived objects ------------------------------------------------------

    def world(self) -> WorldSpec:
        return WorldSpec(
            self.n_slots, self.n_values, tuple(tuple(m) for m in self.mixture), self.seed, mention_prob=self.mention_prob
        )

    def report_z(self, k: int | None = None) -> list[int]:
        """z rows for summary tables: explicit ``z_values`` or {1, ceil(K/2)-1, ceil(K/2)+1, K-1, K}."""
        k = self.k_levels if k is None else k
        if self.z_values and k == self.k_levels:
            return sorted(set(self.z_values))
        half = math.ceil(k / 2)
        return sorted({z for z in (1, half - 1, half + 1, k - 1, k) if 1 <= z <= k})

    def captioner(self, label: str, **kw) -> CaptionerConfig:
        base = dict(
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            k_levels=self.k_levels,
            fusion=self.fusion,
            conditioned=label == "conditioned",
        )
        base.update(kw)
        return CaptionerConfig.for_world(self.world(), **base)

    def trainer(self, label: str, steps: int | None = None, threshold: float | None = None) -> TrainConfig:
        objective = {"filtering": "vanilla"}.get(label, label)
        return TrainConfig(
            objective=objective,
            filter_threshold=threshold if label == "filtering" else None,
            total_steps=self.total_steps if steps is None else steps,
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            warmup_fraction=self.warmup_fraction,
            weight_decay=self.weight_decay,
            seed=self.seed,
        )

    # -- serialisation --------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: _listify(v) for k, v in d.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"config: unknown key {unknown[0]!r}")
        return cls(**d)

    def override(self, **kw) -> "ExperimentSpec":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def _listify(v):
    if isinstance(v, (tuple, list)):
        return [_listify(x) for x in v]
    return v


def load_spec(path: str | Path | None, **overrides) -> ExperimentSpec:
    """Read a flat JSON config (if given) and apply non-None overrides."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {p}: invalid JSON ({e.msg} at line {e.lineno})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {p}: top level must be an object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentSpec.from_dict(data)
    except TypeError as e:
        raise ConfigError(f"config: {e}") from None


def field_defaults() -> dict:
    out = {}
    for f in fields(ExperimentSpec):
        out[f.name] = f.default if f.default is not MISSING else f.default_factory()  # type: ignore[misc]
    return out


SPEC_FIELDS = field_defaults()
