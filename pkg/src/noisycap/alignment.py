"""Alignment levels from similarity scores, plus the filtering and loss-weighting transforms."""

from __future__ import annotations

import json
from bisect import bisect_right
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

STRATEGIES = ("uniform", "quantile")


@dataclass(frozen=True)
class BucketSpec:
    strategy: str
    k: int
    boundaries: tuple[float, ...]
    score_min: float
    score_max: float

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"BucketSpec: unknown strategy {self.strategy!r}")
        if self.k < 2:
            raise ValueError("BucketSpec: k must be >= 2")
        object.__setattr__(self, "boundaries", tuple(float(b) for b in self.boundaries))
        if len(self.boundaries) != self.k - 1:
            raise ValueError(f"BucketSpec: expected {self.k - 1} boundaries, got {len(self.boundaries)}")
        b = self.boundaries
        degenerate = self.score_min == self.score_max
        if not degenerate and any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError("BucketSpec: boundaries must be strictly increasing")
        if b and (b[0] < self.score_min or b[-1] > self.score_max):
            raise ValueError("BucketSpec: boundaries outside [score_min, score_max]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BucketSpec":
        d = json.loads(text)
        return cls(d["strategy"], int(d["k"]), tuple(d["boundaries"]), float(d["score_min"]), float(d["score_max"]))


def _quantile_boundaries(x: np.ndarray, k: int) -> list[float]:
    """Cut a sorted array into k bins at value gaps nearest to the i*n/k ranks."""
    n = x.size
    gaps = np.flatnonzero(x[1:] > x[:-1]) + 1  # candidate cut positions j: x[j-1] < x[j]
    if gaps.size < k - 1:
        raise ValueError(f"fit_buckets: quantile needs >= {k} distinct scores, got {gaps.size + 1}")
    cuts: list[int] = []
    lo = 0
    for i in range(1, k):
        hi = gaps.size - (k - 1 - i)  # leave room for the remaining cuts
        target = i * n / k
        cand = gaps[lo:hi]
        j = lo + int(np.argmin(np.abs(cand - target)))
        cuts.append(int(gaps[j]))
        lo = j + 1
    return [float((x[c - 1] + x[c]) / 2.0) for c in cuts]


def fit_buckets(scores: Sequence[float], strategy: str = "uniform", k: int = 8) -> BucketSpec:
    """Fit a ``k``-level bucketing function on observed scores.

    Uniform bins split the observed ``[min, max]`` range evenly. Quantile bins
    cut at the i/k ranks (moved to the nearest gap between distinct values),
    so with no ties every bin holds ``floor(n/k)`` or ``ceil(n/k)`` scores.
    When all scores are equal, uniform fitting degrades to ``k-1`` boundaries
    at that value and every score lands in level ``k``.
    """
    if k < 2:
        raise ValueError("fit_buckets: k must be >= 2")
    if strategy not in STRATEGIES:
        raise ValueError(f"fit_buckets: unknown strategy {strategy!r}")
    x = np.sort(np.asarray(scores, dtype=np.float64))
    if x.size == 0 or not np.all(np.isfinite(x)):
        raise ValueError("fit_buckets: scores must be non-empty and finite")
    lo, hi = float(x[0]), float(x[-1])
    if strategy == "uniform":
        if lo == hi:
            return BucketSpec(strategy, k, (lo,) * (k - 1), lo, hi)
        width = (hi - lo) / k
        bounds = [lo + i * width for i in range(1, k)]
    else:
        if lo == hi:
            raise ValueError("fit_buckets: quantile bucketing of identical scores")
        bounds = _quantile_boundaries(x, k)
    return BucketSpec(strategy, k, tuple(bounds), lo, hi)


def bucket(spec: BucketSpec, s: float) -> int:
    """Level in ``1..k``; a score on a boundary joins the higher bin, out-of-range scores clamp."""
    level = 1 + bisect_right(spec.boundaries, float(s))
    return min(max(level, 1), spec.k)


def bucket_many(spec: BucketSpec, scores: Sequence[float]) -> np.ndarray:
    levels = 1 + np.searchsorted(np.asarray(spec.boundaries), np.asarray(scores, dtype=np.float64), side="right")
    return np.clip(levels, 1, spec.k).astype(np.int64)


# -- filtering baseline -------------------------------------------------------


def filter_pairs(pairs, threshold: float) -> list:
    """Keep pairs with ``raw_score > threshold`` (strict), preserving order."""
    return [p for p in pairs if p.raw_score > threshold]


def rejected_pairs(pairs, threshold: float) -> list:
    return [p for p in pairs if not p.raw_score > threshold]


def threshold_for_retention(scores: Sequence[float], fraction: float) -> float:
    """Threshold whose strict filter keeps roughly the top ``fraction`` of scores.

    With ties the kept share can be smaller than requested; never larger.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("threshold_for_retention: fraction must be in (0, 1]")
    x = np.sort(np.asarray(scores, dtype=np.float64))
    cut = x.size - int(round(fraction * x.size))
    if cut <= 0:
        return float(np.nextafter(x[0], -np.inf))
    return float(x[cut - 1])


# -- loss weighting baseline --------------------------------------------------


@dataclass(frozen=True)
class WeightSpec:
    score_min: float
    score_max: float
    scale: float = 2.0

    def __post_init__(self):
        if not self.score_max > self.score_min:
            raise ValueError("WeightSpec: score_max must exceed score_min")

    @classmethod
    def fit(cls, scores: Sequence[float], scale: float = 2.0) -> "WeightSpec":
        x = np.asarray(scores, dtype=np.float64)
        return cls(float(x.min()), float(x.max()), scale)


def loss_weight(spec: WeightSpec, s: float) -> float:
    """Min-max rescaled score times ``scale``, clamped to ``[0, scale]``."""
    w = spec.scale * (float(s) - spec.score_min) / (spec.score_max - spec.score_min)
    return min(max(w, 0.0), spec.scale)


def loss_weights(spec: WeightSpec, scores: Sequence[float]) -> np.ndarray:
    x = np.asarray(scores, dtype=np.float64)
    return np.clip(spec.scale * (x - spec.score_min) / (spec.score_max - spec.score_min), 0.0, spec.scale)
