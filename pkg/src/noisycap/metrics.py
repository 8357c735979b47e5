"""Caption metrics: corpus BLEU@4, CIDEr-D, exact-match counting, oracle alignment, self-retrieval recall."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .microworld import Pair, Scene, WorldSpec, batch_similarity, caption_matrix, scene_matrix

Tokens = Sequence[Hashable]

BLEU_SMOOTHING = "add-one on zero n-gram match counts"


@dataclass
class MetricsReport:
    bleu4: float = 0.0
    cider_d: float = 0.0
    oracle_align_mean: float = 0.0
    em_count: int = 0
    recall_at: dict[int, float] = field(default_factory=dict)
    n_examples: int = 0
    metadata: dict = field(default_factory=lambda: {"bleu_smoothing": BLEU_SMOOTHING, "cider": "CIDEr-D sigma=6"})

    def __post_init__(self):
        if not 0.0 <= self.bleu4 <= 1.0:
            raise ValueError("MetricsReport: bleu4 outside [0, 1]")
        if self.em_count > self.n_examples:
            raise ValueError("MetricsReport: em_count exceeds n_examples")
        rs = [self.recall_at[k] for k in sorted(self.recall_at)]
        if any(not 0.0 <= r <= 1.0 for r in rs) or any(a > b for a, b in zip(rs, rs[1:])):
            raise ValueError("MetricsReport: recall must lie in [0, 1] and be non-decreasing in K")

    def to_json(self) -> str:
        d = asdict(self)
        d["recall_at"] = {str(k): v for k, v in self.recall_at.items()}
        return json.dumps(d, sort_keys=True)


def _as_refs(refs) -> list[tuple]:
    """Accept one reference (token sequence) or several (sequence of token sequences)."""
    if len(refs) and isinstance(refs[0], (list, tuple, np.ndarray)):
        return [tuple(r) for r in refs]
    return [tuple(refs)]


def ngrams(tokens: Tokens, n: int) -> Counter:
    t = tuple(tokens)
    return Counter(t[i : i + n] for i in range(len(t) - n + 1))


# -- BLEU ---------------------------------------------------------------------


def bleu4(candidates: Sequence[Tokens], references: Sequence, smooth: bool = True) -> float:
    """Corpus BLEU with uniform 1..4-gram weights and the brevity penalty.

    With ``smooth`` any order whose corpus match count is zero uses
    ``1 / (total + 1)`` instead of zero.
    """
    if len(candidates) == 0:
        raise ValueError("bleu4: empty corpus")
    if len(candidates) != len(references):
        raise ValueError("bleu4: candidate and reference counts differ")
    match = [0] * 4
    total = [0] * 4
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        refs = _as_refs(refs)
        cand = tuple(cand)
        c_len += len(cand)
        r_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            cc = ngrams(cand, n)
            best: Counter = Counter()
            for r in refs:
                best |= ngrams(r, n)
            match[n - 1] += sum(min(c, best[g]) for g, c in cc.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    if c_len == 0:
        return 0.0
    logp = 0.0
    for m, t in zip(match, total):
        if m == 0:
            if not smooth:
                return 0.0
            logp += math.log(1.0 / (t + 1))
        else:
            logp += math.log(m / t)
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(logp / 4)


# -- CIDEr-D ------------------------------------------------------------------


def document_frequency(corpus: Sequence, n: int = 4) -> Counter:
    """Number of reference sets containing each 1..n-gram."""
    df: Counter = Counter()
    for refs in corpus:
        seen = set()
        for r in _as_refs(refs):
            for k in range(1, n + 1):
                seen.update(ngrams(r, k))
        df.update(seen)
    return df


def _tfidf(tokens: Tokens, df: Counter, log_n: float, n: int):
    vecs: list[dict] = []
    norms: list[float] = []
    for k in range(1, n + 1):
        vec = {g: tf * (log_n - math.log(max(1.0, df[g]))) for g, tf in ngrams(tokens, k).items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def cider_d_scores(
    candidates: Sequence[Tokens],
    references: Sequence,
    corpus: Sequence | None = None,
    n: int = 4,
    sigma: float = 6.0,
) -> list[float]:
    """Per-candidate CIDEr-D; document frequencies come from ``corpus`` (default: ``references``)."""
    if len(candidates) == 0:
        raise ValueError("cider_d: empty corpus")
    if len(candidates) != len(references):
        raise ValueError("cider_d: candidate and reference counts differ")
    corpus = references if corpus is None else corpus
    df = document_frequency(corpus, n)
    log_n = math.log(float(len(corpus)))
    out = []
    for cand, refs in zip(candidates, references):
        refs = _as_refs(refs)
        cv, cn = _tfidf(cand, df, log_n, n)
        total = 0.0
        for r in refs:
            rv, rn = _tfidf(r, df, log_n, n)
            delta = len(tuple(cand)) - len(r)
            penalty = math.exp(-(delta**2) / (2 * sigma**2))
            for k in range(n):
                if cn[k] == 0 or rn[k] == 0:
                    continue
                dot = sum(min(v, rv[k].get(g, 0.0)) * rv[k].get(g, 0.0) for g, v in cv[k].items())
                total += penalty * dot / (cn[k] * rn[k])
        out.append(10.0 * total / (n * len(refs)))
    return out


def cider_d(candidates, references, corpus=None, n: int = 4, sigma: float = 6.0) -> float:
    scores = cider_d_scores(candidates, references, corpus, n, sigma)
    return float(np.mean(scores))


# -- model-based metrics ------------------------------------------------------


def exact_match_count(model, pairs: Sequence[Pair], world: WorldSpec, z=None, captions=None) -> int:
    """Pairs whose greedy caption equals the stored caption token for token."""
    if not pairs:
        return 0
    if captions is None:
        captions = model.generate([p.scene for p in pairs], world, z)
    return sum(tuple(c) == tuple(p.caption) for c, p in zip(captions, pairs))


def oracle_align_captions(scenes: Sequence[Scene], captions: Sequence[Tokens], world: WorldSpec) -> float:
    return float(batch_similarity(scenes, captions, world).mean())


def oracle_align(model, scenes: Sequence[Scene], world: WorldSpec, z=None) -> float:
    return oracle_align_captions(scenes, model.generate(scenes, world, z), world)


def retrieval_ranks(captions: Sequence[Tokens], gallery: Sequence[Scene], world: WorldSpec) -> np.ndarray:
    """0-based rank of scene i for caption i among the gallery.

    Ranking is by cosine similarity, descending; ties go to the scene with the
    smaller id.
    """
    s = scene_matrix(gallery, world)
    c = caption_matrix(captions, world)
    s_norm = np.linalg.norm(s, axis=1)
    c_norm = np.linalg.norm(c, axis=1)
    denom = c_norm[:, None] * s_norm[None, :]
    sims = np.divide(c @ s.T, denom, out=np.zeros_like(denom), where=denom > 0)
    order = np.argsort(np.array([g.id for g in gallery]), kind="stable")
    id_rank = np.empty(len(gallery), dtype=np.int64)
    id_rank[order] = np.arange(len(gallery))
    own = sims[np.arange(len(captions)), np.arange(len(captions))]
    higher = (sims > own[:, None]).sum(axis=1)
    tied_before = ((sims == own[:, None]) & (id_rank[None, :] < id_rank[: len(captions), None])).sum(axis=1)
    return higher + tied_before


def recall_from_captions(
    captions: Sequence[Tokens], gallery: Sequence[Scene], world: WorldSpec, ks=(1, 5, 10)
) -> dict[int, float]:
    if len(gallery) < max(ks):
        raise ValueError(f"self_retrieval: gallery of {len(gallery)} is smaller than K={max(ks)}")
    if len(captions) != len(gallery):
        raise ValueError("self_retrieval: one caption per gallery scene is required")
    ranks = retrieval_ranks(captions, gallery, world)
    return {k: float((ranks < k).mean()) for k in ks}


def self_retrieval(model, gallery: Sequence[Scene], world: WorldSpec, z=None, ks=(1, 5, 10)) -> dict[int, float]:
    if len(gallery) < max(ks):
        raise ValueError(f"self_retrieval: gallery of {len(gallery)} is smaller than K={max(ks)}")
    return recall_from_captions(model.generate(gallery, world, z), gallery, world, ks)


def evaluate_captions(
    captions: Sequence[Tokens],
    pairs: Sequence[Pair],
    world: WorldSpec,
    ks=(1, 5, 10),
) -> MetricsReport:
    """All metrics for generated ``captions`` against ``pairs`` (references and gallery)."""
    refs = [p.caption for p in pairs]
    scenes = [p.scene for p in pairs]
    recall = recall_from_captions(captions, scenes, world, ks) if len(scenes) >= max(ks) else {}
    return MetricsReport(
        bleu4=bleu4(captions, refs),
        cider_d=cider_d(captions, refs),
        oracle_align_mean=oracle_align_captions(scenes, captions, world),
        em_count=sum(tuple(c) == tuple(r) for c, r in zip(captions, refs)),
        recall_at=recall,
        n_examples=len(pairs),
    )
