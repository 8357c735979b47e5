import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisycap.microworld import (
    BOS,
    EOS,
    PAD,
    Pair,
    Scene,
    WorldSpec,
    batch_similarity,
    embed_caption,
    embed_scene,
    full_caption,
    generate_dataset,
    inject_noise,
    oracle_similarity,
    override_scores,
    read_jsonl,
    read_score_tsv,
    render_caption,
    value_slot_table,
    write_jsonl,
)

W = WorldSpec()
scenes = st.lists(st.integers(0, 7), min_size=6, max_size=6).map(lambda a: Scene("x", tuple(a)))


def test_default_world_shape():
    assert (W.n_slots, W.n_values) == (6, 8)
    assert (BOS, EOS, PAD) == (0, 1, 2)
    assert W.vocab_size == 3 + 6 + 48
    assert W.max_len == 12


def test_mixture_must_sum_to_one():
    with pytest.raises(ValueError):
        WorldSpec(corruption_mixture=((0.0, 0.5), (0.5, 0.4)))
    WorldSpec(corruption_mixture=((0.0, 0.5), (0.5, 0.5 + 5e-10)))


def test_vocab_too_small_is_rejected():
    with pytest.raises(ValueError):
        WorldSpec(vocab=("a",) * 20)


def test_generate_dataset_needs_positive_n():
    with pytest.raises(ValueError):
        generate_dataset(W, 0)


# -- oracle -------------------------------------------------------------------


def test_three_correct_of_six_slots():
    scene = Scene("s", (1, 2, 3, 4, 5, 6))
    cap = render_caption(scene.attrs, [0, 2, 4], W)
    assert oracle_similarity(scene, cap, W) == pytest.approx(3 / math.sqrt(6 * 3), abs=1e-12)


def test_connectives_only_score_zero():
    scene = Scene("s", (0,) * 6)
    assert oracle_similarity(scene, [W.connective(i) for i in range(6)], W) == 0.0


def test_empty_caption_rejected():
    with pytest.raises(ValueError):
        oracle_similarity(Scene("s", (0,) * 6), [], W)


@given(scenes)
def test_full_caption_is_maximal_and_beats_any_single_corruption(scene):
    full = full_caption(scene, W)
    assert oracle_similarity(scene, full, W) == pytest.approx(1.0)
    for slot in range(6):
        wrong = (scene.attrs[slot] + 1) % 8
        cap = list(full)
        cap[2 * slot + 1] = W.value_token(slot, wrong)
        assert oracle_similarity(scene, cap, W) < oracle_similarity(scene, full, W)


@given(scenes)
def test_identical_scenes_have_equal_embeddings(scene):
    twin = Scene("y", scene.attrs)
    np.testing.assert_array_equal(embed_scene(scene, W), embed_scene(twin, W))
    assert oracle_similarity(scene, full_caption(twin, W), W) == pytest.approx(1.0)


def test_disjoint_attributes_score_zero():
    a = Scene("a", (0,) * 6)
    b = Scene("b", (1,) * 6)
    assert oracle_similarity(a, full_caption(b, W), W) == 0.0


def test_duplicate_mention_doubles_coordinate():
    tok = W.value_token(2, 5)
    e = embed_caption([tok, W.connective(0), tok], W)
    assert e[2 * 8 + 5] == 2.0
    assert e.sum() == 2.0


@given(scenes, st.lists(st.integers(3, 56), min_size=1, max_size=12), st.randoms())
def test_oracle_is_permutation_invariant_and_bounded(scene, caption, rnd):
    shuffled = list(caption)
    rnd.shuffle(shuffled)
    s = oracle_similarity(scene, caption, W)
    assert s == pytest.approx(oracle_similarity(scene, shuffled, W), abs=1e-12)
    assert 0.0 <= s <= 1.0 + 1e-12


@given(st.lists(st.tuples(scenes, st.lists(st.integers(0, 56), min_size=1, max_size=12)), min_size=1, max_size=8))
def test_batch_similarity_matches_scalar_oracle(items):
    sc = [s for s, _ in items]
    caps = [c for _, c in items]
    got = batch_similarity(sc, caps, W)
    for g, s, c in zip(got, sc, caps):
        assert g == pytest.approx(oracle_similarity(s, c, W), abs=1e-12)


def test_value_slot_table_marks_only_value_words():
    t = value_slot_table(W)
    assert (t[:9] == -1).all()
    assert list(t[9:]) == list(range(48))


# -- generation ---------------------------------------------------------------


def test_generation_is_reproducible():
    a = generate_dataset(W, 200, seed=5)
    b = generate_dataset(W, 200, seed=5)
    c = generate_dataset(W, 200, seed=6)
    assert a == b
    assert a != c


def test_caption_structure():
    tab = value_slot_table(W)
    for p in generate_dataset(W, 500, seed=1):
        cap = p.caption
        assert 1 <= len(cap) <= W.max_len
        assert len(cap) % 2 == 0
        conn = [c - 3 for c in cap[0::2]]
        vals = [tab[v] for v in cap[1::2]]
        assert len(set(conn)) == len(conn) >= W.min_mentions
        assert all(v // 8 == s for v, s in zip(vals, conn))
        assert all(0 <= a < 8 for a in p.scene.attrs)


def test_zero_corruption_gives_max_score_for_caption_shape():
    clean = WorldSpec(corruption_mixture=((0.0, 1.0),))
    for p in generate_dataset(clean, 300, seed=2):
        m = len(p.caption) // 2
        assert p.raw_score == pytest.approx(math.sqrt(m / 6))


def test_full_corruption_matches_one_in_n_values():
    noisy = WorldSpec(corruption_mixture=((1.0, 1.0),))
    tab = value_slot_table(noisy)
    hit = total = 0
    for p in generate_dataset(noisy, 10_000, seed=3):
        for t in p.caption[1::2]:
            f = tab[t]
            total += 1
            hit += p.scene.attrs[f // 8] == f % 8
    assert hit / total == pytest.approx(1 / 8, rel=0.02)


def test_two_level_mixture_is_bimodal_in_corruption_order():
    w = WorldSpec(corruption_mixture=((0.0, 0.5), (0.8, 0.5)))
    pairs = generate_dataset(w, 10_000, seed=4)
    s = np.array([p.raw_score for p in pairs])
    hist, _ = np.histogram(s, bins=5, range=(0, 1))
    dip = hist[1:-1].min()
    assert dip < hist[0] and dip < hist[-1]
    by_level = {r: Counter(round(p.raw_score, 6) for p in pairs if p.true_corruption == r) for r in (0.0, 0.8)}
    mode = {r: c.most_common(1)[0][0] for r, c in by_level.items()}
    assert mode[0.0] > mode[0.8]


def test_mean_score_falls_with_corruption_level():
    means = []
    for rho in (0.0, 0.2, 0.5, 0.9):
        w = WorldSpec(corruption_mixture=((rho, 1.0),))
        means.append(np.mean([p.raw_score for p in generate_dataset(w, 1000, seed=8)]))
    assert all(a > b for a, b in zip(means, means[1:]))


# -- noise injection ----------------------------------------------------------


@pytest.fixture(scope="module")
def base_pairs():
    return generate_dataset(W, 100, seed=9)


def test_ratio_zero_is_identity(base_pairs):
    assert inject_noise(base_pairs, 0.0, 1, W) == list(base_pairs)


def test_half_ratio_changes_exactly_half(base_pairs):
    out = inject_noise(base_pairs, 0.5, 1, W)
    changed = [a for a, b in zip(base_pairs, out) if a.caption != b.caption or a.true_corruption != b.true_corruption]
    assert len(changed) == 50


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2**31))
def test_injection_moves_captions_without_inventing_them(ratio, seed):
    pairs = generate_dataset(W, 40, seed=10)
    out = inject_noise(pairs, ratio, seed, W)
    assert Counter(p.caption for p in out) == Counter(p.caption for p in pairs)
    assert [p.scene for p in out] == [p.scene for p in pairs]
    for p in out:
        assert p.raw_score == pytest.approx(oracle_similarity(p.scene, p.caption, W))


def test_full_ratio_drops_to_random_pair_baseline():
    pairs = generate_dataset(W, 10_000, seed=11)
    out = inject_noise(pairs, 1.0, 12, W)
    assert all(p.true_corruption == 1.0 for p in out)
    # independent baseline: score every scene against a shuffled caption list
    rng = np.random.default_rng(0)
    caps = [pairs[i].caption for i in rng.permutation(len(pairs))]
    baseline = batch_similarity([p.scene for p in pairs], caps, W).mean()
    assert np.mean([p.raw_score for p in out]) == pytest.approx(baseline, abs=0.01)
    assert baseline < 0.5 * np.mean([p.raw_score for p in pairs])


def test_injection_needs_two_pairs():
    with pytest.raises(ValueError):
        inject_noise(generate_dataset(W, 1, seed=0), 0.5, 0, W)
    with pytest.raises(ValueError):
        inject_noise(generate_dataset(W, 5, seed=0), 1.5, 0, W)


# -- files --------------------------------------------------------------------


def test_jsonl_roundtrip(tmp_path, base_pairs):
    path = tmp_path / "p.jsonl"
    write_jsonl(base_pairs, path)
    assert read_jsonl(path) == list(base_pairs)
    first = path.read_text().splitlines()[0]
    for key in ('"id"', '"attrs"', '"tokens"', '"score"', '"corruption"'):
        assert key in first


def test_score_override_from_tsv(tmp_path, base_pairs):
    tsv = tmp_path / "s.tsv"
    tsv.write_text(f"{base_pairs[0].id}\t0.25\n\n{base_pairs[3].id}\t-0.1\n")
    out = override_scores(base_pairs, read_score_tsv(tsv))
    assert out[0].raw_score == 0.25 and out[3].raw_score == -0.1
    assert out[1] == base_pairs[1]
    bad = tmp_path / "bad.tsv"
    bad.write_text("only-one-field\n")
    with pytest.raises(ValueError):
        read_score_tsv(bad)
