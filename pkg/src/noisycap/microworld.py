"""Synthetic scenes, token captions, graded corruption and the alignment oracle.

A scene is a vector of categorical slots. A clean caption mentions each slot
independently with probability ``mention_prob`` (redrawn until at least half
are mentioned), in random order; every mention is a
slot-specific connective word followed by the slot's value word. Corruption
re-draws each value word uniformly over that slot's values with probability
rho. The oracle score is the cosine between a multi-hot scene vector and a
bag-of-value-words caption vector.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numcore import make_rng

BOS, EOS, PAD = 0, 1, 2
SPECIALS = ("<bos>", "<eos>", "<pad>")

DEFAULT_MIXTURE = ((0.0, 0.35), (0.2, 0.25), (0.5, 0.2), (0.9, 0.2))
_SLOT_NAMES = ("color", "shape", "size", "texture", "material", "pattern", "mood", "place")
_CONNECTIVES = ("in", "a", "of", "with", "made-of", "covered-in", "feeling", "at")


@dataclass(frozen=True)
class Scene:
    id: str
    attrs: tuple[int, ...]


@dataclass(frozen=True)
class Pair:
    id: str
    scene: Scene
    caption: tuple[int, ...]
    raw_score: float
    true_corruption: float = 0.0


def default_vocab(n_slots: int, n_values: int) -> tuple[str, ...]:
    conn = [_CONNECTIVES[i] if i < len(_CONNECTIVES) else f"conn{i}" for i in range(n_slots)]
    names = [_SLOT_NAMES[i] if i < len(_SLOT_NAMES) else f"slot{i}" for i in range(n_slots)]
    values = [f"{names[s]}:{v}" for s in range(n_slots) for v in range(n_values)]
    return SPECIALS + tuple(conn) + tuple(values)


@dataclass(frozen=True)
class WorldSpec:
    n_slots: int = 6
    n_values: int = 8
    corruption_mixture: tuple[tuple[float, float], ...] = DEFAULT_MIXTURE
    seed: int = 0
    vocab: tuple[str, ...] | None = None
    mention_prob: float = 0.95
    vocab_tokens: tuple[str, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_slots < 1 or self.n_values < 2:
            raise ValueError("WorldSpec: need n_slots >= 1 and n_values >= 2")
        mix = tuple((float(r), float(w)) for r, w in self.corruption_mixture)
        object.__setattr__(self, "corruption_mixture", mix)
        if abs(sum(w for _, w in mix) - 1.0) > 1e-9:
            raise ValueError("WorldSpec: corruption mixture weights must sum to 1")
        if not 0.0 < self.mention_prob <= 1.0:
            raise ValueError("WorldSpec: mention_prob must lie in (0, 1]")
        if any(not 0.0 <= r <= 1.0 or w < 0 for r, w in mix):
            raise ValueError("WorldSpec: corruption levels must lie in [0, 1], weights >= 0")
        vocab = tuple(self.vocab) if self.vocab is not None else default_vocab(self.n_slots, self.n_values)
        need = self.n_slots * self.n_values + self.n_slots + len(SPECIALS)
        if len(vocab) < need:
            raise ValueError(f"WorldSpec: vocab has {len(vocab)} tokens, need >= {need}")
        object.__setattr__(self, "vocab_tokens", vocab)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab_tokens)

    @property
    def max_len(self) -> int:
        return 2 * self.n_slots

    @property
    def min_mentions(self) -> int:
        return math.ceil(self.n_slots / 2)

    @property
    def n_features(self) -> int:
        return self.n_slots * self.n_values

    def connective(self, slot: int) -> int:
        return len(SPECIALS) + slot

    def value_token(self, slot: int, value: int) -> int:
        return len(SPECIALS) + self.n_slots + slot * self.n_values + value

    def to_dict(self) -> dict:
        return {
            "n_slots": self.n_slots,
            "n_values": self.n_values,
            "corruption_mixture": [list(m) for m in self.corruption_mixture],
            "seed": self.seed,
            "mention_prob": self.mention_prob,
        }

    def decode(self, tokens: Iterable[int]) -> str:
        return " ".join(self.vocab_tokens[t] for t in tokens)


def value_slot_table(spec: WorldSpec) -> np.ndarray:
    """Map token id -> feature index (slot*n_values + value), or -1 for non-value tokens."""
    table = np.full(spec.vocab_size, -1, dtype=np.int64)
    first = spec.value_token(0, 0)
    table[first : first + spec.n_features] = np.arange(spec.n_features)
    return table


# -- embeddings and oracle ----------------------------------------------------


def embed_scene(scene: Scene, spec: WorldSpec) -> np.ndarray:
    v = np.zeros(spec.n_features)
    for s, val in enumerate(scene.attrs):
        v[s * spec.n_values + val] = 1.0
    return v


def embed_caption(caption: Sequence[int], spec: WorldSpec) -> np.ndarray:
    feats = value_slot_table(spec)[np.asarray(caption, dtype=np.int64)]
    return np.bincount(feats[feats >= 0], minlength=spec.n_features).astype(np.float64)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def oracle_similarity(scene: Scene, caption: Sequence[int], spec: WorldSpec) -> float:
    if len(caption) == 0:
        raise ValueError("oracle_similarity: empty caption")
    return cosine(embed_scene(scene, spec), embed_caption(caption, spec))


def scene_matrix(scenes: Sequence[Scene], spec: WorldSpec) -> np.ndarray:
    """Stacked multi-hot scene vectors, shape (n, n_features)."""
    m = np.zeros((len(scenes), spec.n_features))
    if scenes:
        attrs = np.array([s.attrs for s in scenes], dtype=np.int64)
        cols = attrs + np.arange(spec.n_slots) * spec.n_values
        np.put_along_axis(m, cols, 1.0, axis=1)
    return m


def caption_matrix(captions: Sequence[Sequence[int]], spec: WorldSpec) -> np.ndarray:
    table = value_slot_table(spec)
    m = np.zeros((len(captions), spec.n_features))
    for i, cap in enumerate(captions):
        feats = table[np.asarray(cap, dtype=np.int64)] if len(cap) else np.empty(0, dtype=np.int64)
        feats = feats[feats >= 0]
        np.add.at(m[i], feats, 1.0)
    return m


def batch_similarity(scenes: Sequence[Scene], captions: Sequence[Sequence[int]], spec: WorldSpec) -> np.ndarray:
    """Row-wise oracle similarity; empty or value-free captions score 0."""
    s = scene_matrix(scenes, spec)
    c = caption_matrix(captions, spec)
    denom = np.linalg.norm(s, axis=1) * np.linalg.norm(c, axis=1)
    dots = (s * c).sum(axis=1)
    return np.divide(dots, denom, out=np.zeros(len(scenes)), where=denom > 0)


# -- generation ---------------------------------------------------------------


def render_caption(attrs: Sequence[int], slots: Sequence[int], spec: WorldSpec) -> tuple[int, ...]:
    out: list[int] = []
    for s in slots:
        out += [spec.connective(s), spec.value_token(s, attrs[s])]
    return tuple(out)


def full_caption(scene: Scene, spec: WorldSpec) -> tuple[int, ...]:
    """Every slot, in slot order, uncorrupted."""
    return render_caption(scene.attrs, range(spec.n_slots), spec)


def _sample_pair(rng: np.random.Generator, spec: WorldSpec, idx: int, levels, weights) -> Pair:
    attrs = tuple(int(a) for a in rng.integers(0, spec.n_values, size=spec.n_slots))
    # each slot is mentioned independently; redraw until at least half are
    while True:
        keep = rng.random(spec.n_slots) < spec.mention_prob
        if keep.sum() >= spec.min_mentions:
            break
    slots = rng.permutation(np.flatnonzero(keep))
    m = len(slots)
    rho = float(levels[rng.choice(len(levels), p=weights)])
    flip = rng.random(m) < rho
    redraw = rng.integers(0, spec.n_values, size=m)
    said = [int(redraw[j]) if flip[j] else attrs[s] for j, s in enumerate(slots)]
    caption: list[int] = []
    for j, s in enumerate(slots):
        caption += [spec.connective(int(s)), spec.value_token(int(s), said[j])]
    scene = Scene(f"s{idx:07d}", attrs)
    caption_t = tuple(caption)
    return Pair(scene.id, scene, caption_t, oracle_similarity(scene, caption_t, spec), rho)


def generate_dataset(spec: WorldSpec, n: int, seed: int | None = None) -> list[Pair]:
    """``n`` pairs; identical for identical ``(spec, n, seed)``."""
    if n < 1:
        raise ValueError("generate_dataset: n must be >= 1")
    rng = make_rng(spec.seed if seed is None else seed)
    levels = np.array([r for r, _ in spec.corruption_mixture])
    weights = np.array([w for _, w in spec.corruption_mixture])
    weights = weights / weights.sum()
    return [_sample_pair(rng, spec, i, levels, weights) for i in range(n)]


def _derangement(rng: np.random.Generator, k: int) -> np.ndarray:
    while True:
        perm = rng.permutation(k)
        if not np.any(perm == np.arange(k)):
            return perm


def inject_noise(pairs: Sequence[Pair], ratio: float, seed: int, spec: WorldSpec) -> list[Pair]:
    """Move captions between ``ceil(ratio*n)`` randomly chosen pairs.

    Chosen pairs receive captions of other chosen pairs through a uniformly
    random derangement, so the caption multiset is preserved and no pair
    keeps its own caption. Replaced pairs are re-scored by the oracle and get
    ``true_corruption = 1.0``.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"inject_noise: ratio must be in [0, 1], got {ratio}")
    n = len(pairs)
    k = math.ceil(ratio * n)
    out = list(pairs)
    if k == 0:
        return out
    if n < 2:
        raise ValueError("inject_noise: need at least 2 pairs to move captions")
    rng = make_rng(seed)
    k = max(k, 2)  # one pair alone cannot receive another's caption without a second mover
    chosen = np.sort(rng.choice(n, size=k, replace=False))
    perm = _derangement(rng, k)
    for dst, src in zip(chosen, chosen[perm]):
        old = pairs[dst]
        cap = pairs[src].caption
        out[dst] = replace(old, caption=cap, raw_score=oracle_similarity(old.scene, cap, spec), true_corruption=1.0)
    return out


# -- file formats -------------------------------------------------------------


def pair_to_json(p: Pair) -> dict:
    return {
        "id": p.id,
        "attrs": list(p.scene.attrs),
        "tokens": list(p.caption),
        "score": p.raw_score,
        "corruption": p.true_corruption,
    }


def pair_from_json(d: dict) -> Pair:
    return Pair(d["id"], Scene(d["id"], tuple(d["attrs"])), tuple(d["tokens"]), float(d["score"]), float(d["corruption"]))


def write_jsonl(pairs: Iterable[Pair], path: str | Path) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(json.dumps(pair_to_json(p), separators=(",", ":")) + "\n")


def read_jsonl(path: str | Path) -> list[Pair]:
    with open(path) as fh:
        return [pair_from_json(json.loads(line)) for line in fh if line.strip()]


def read_score_tsv(path: str | Path) -> dict[str, float]:
    scores: dict[str, float] = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{ln}: expected 'id<TAB>score'")
            scores[parts[0]] = float(parts[1])
    return scores


def override_scores(pairs: Sequence[Pair], scores: dict[str, float]) -> list[Pair]:
    """Replace ``raw_score`` for ids present in ``scores``."""
    return [replace(p, raw_score=scores[p.id]) if p.id in scores else p for p in pairs]
