import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisycap import numcore as nc
from noisycap.alignment import WeightSpec, fit_buckets, loss_weights
from noisycap.captioner import Captioner, CaptionerConfig
from noisycap.microworld import WorldSpec, generate_dataset
from noisycap.training import (
    EmptyTrainingSet,
    TrainConfig,
    TrainState,
    load_model,
    loss_conditioned,
    loss_vanilla,
    loss_weighted,
    make_batch,
    sequence_nll,
    train,
)

W = WorldSpec()
TINY = dict(d_model=16, n_layers=1, n_heads=2)
PAIRS = generate_dataset(W, 200, seed=21)


def cfg(**kw):
    return CaptionerConfig.for_world(W, **{**TINY, **kw})


def batch(pairs=PAIRS[:8], levels=None, scores=True):
    s = np.array([p.raw_score for p in pairs]) if scores else None
    return make_batch(pairs, 8, W.n_features, levels, s)


def flat_model(**kw):
    m = Captioner(cfg(**kw), seed=0)
    m["head.w"].data[:] = 0.0
    m["head.b"].data[:] = 0.0
    return m


def test_config_rules():
    with pytest.raises(ValueError):
        TrainConfig(total_steps=0)
    with pytest.raises(ValueError):
        TrainConfig(objective="conditioned", filter_threshold=0.3)
    with pytest.raises(ValueError):
        TrainConfig(objective="ranking")


def test_uniform_logits_cost_log_v_per_token_plus_eos():
    b = batch()
    lengths = np.array([len(p.caption) for p in PAIRS[:8]])
    per = sequence_nll(flat_model(conditioned=False).logits(b.features, b.inputs), b).data
    np.testing.assert_allclose(per, (lengths + 1) * math.log(W.vocab_size), rtol=1e-6)
    assert loss_vanilla(flat_model(conditioned=False), b).item() == pytest.approx(per.mean(), rel=1e-6)


def test_perfect_logits_cost_nothing():
    b = batch()
    logits = np.full(b.targets.shape + (W.vocab_size,), -1e4, dtype=np.float32)
    np.put_along_axis(logits, b.targets[..., None], 1e4, axis=-1)
    assert sequence_nll(nc.Tensor(logits), b).data.max() < 1e-6


def test_batch_mean_equals_mean_of_single_examples():
    m = Captioner(cfg(conditioned=False), seed=1)
    whole = loss_vanilla(m, batch()).item()
    singles = [loss_vanilla(m, batch([p])).item() for p in PAIRS[:8]]
    assert whole == pytest.approx(np.mean(singles), rel=1e-5)


def test_weighted_two_example_hand_case():
    m = Captioner(cfg(conditioned=False), seed=2)
    two = PAIRS[:2]
    b = batch(two)
    a_nll, b_nll = sequence_nll(m.logits(b.features, b.inputs), b).data
    # weights 0.5 and 1.5 under a spec on [0, 1] with scale 2: scores 0.25 and 0.75
    b.scores = np.array([0.25, 0.75])
    spec = WeightSpec(0.0, 1.0, 2.0)
    assert loss_weights(spec, b.scores).tolist() == [0.5, 1.5]
    assert loss_weighted(m, b, spec).item() == pytest.approx((0.5 * a_nll + 1.5 * b_nll) / 2, rel=1e-5)


def test_unit_weights_equal_vanilla_and_zero_weight_gives_no_gradient():
    m = Captioner(cfg(conditioned=False), seed=3)
    b = batch()
    b.scores = np.full(8, 0.5)
    assert loss_weighted(m, b, WeightSpec(0.0, 1.0)).item() == pytest.approx(loss_vanilla(m, b).item(), rel=1e-6)
    one = batch(PAIRS[:1])
    one.scores = np.array([0.0])
    grads = nc.backward(loss_weighted(m, one, WeightSpec(0.0, 1.0)), m.parameters())
    assert all(not g.any() for g in grads)


def test_expected_weight_over_many_scores():
    s = np.random.default_rng(0).random(10_000)
    spec = WeightSpec.fit(s)
    assert loss_weights(spec, s).mean() == pytest.approx(2 * (s.mean() - s.min()) / (s.max() - s.min()), rel=1e-9)


def test_conditioning_is_live_and_batch_order_free():
    m = Captioner(cfg(), seed=4)
    lv = np.array([1, 2, 3, 4, 5, 6, 7, 8])
    base = loss_conditioned(m, batch(levels=lv)).item()
    assert loss_conditioned(m, batch(levels=lv[::-1].copy())).item() != base
    perm = np.random.default_rng(1).permutation(8)
    shuffled = batch([PAIRS[i] for i in perm], levels=lv[perm])
    assert loss_conditioned(m, shuffled).item() == pytest.approx(base, rel=1e-5)
    with pytest.raises(ValueError):
        loss_conditioned(m, batch())


def test_control_row_gradient_comes_only_from_its_level():
    m = Captioner(cfg(), seed=5)
    lv = np.array([2, 2, 5, 2, 5, 5, 5, 2])
    emb = m["ctrl.emb"]
    (g,) = nc.backward(loss_conditioned(m, batch(levels=lv)), [emb])
    used = {1, 4}
    for row in range(8):
        assert g[row].any() == (row in used)
    for level in (2, 5):
        idx = np.flatnonzero(lv == level)
        sub = batch([PAIRS[i] for i in idx], levels=lv[idx])
        (gs,) = nc.backward(loss_conditioned(m, sub), [emb])
        np.testing.assert_allclose(g[level - 1], gs[level - 1] * len(idx) / 8, rtol=1e-4, atol=1e-7)


# -- loop ---------------------------------------------------------------------


def quick(**kw):
    base = dict(objective="vanilla", total_steps=6, batch_size=16, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_single_step_is_one_update():
    r = train(cfg(conditioned=False), quick(total_steps=1), PAIRS, 8)
    init = Captioner(cfg(conditioned=False), seed=3).state_dict()
    assert r.updates == 1 and r.state.opt.step_count == 1
    assert any(not np.array_equal(init[k], v) for k, v in r.model.state_dict().items())


def test_filter_above_max_is_empty():
    with pytest.raises(EmptyTrainingSet, match="empty training set"):
        train(cfg(conditioned=False), quick(filter_threshold=2.0), PAIRS, 8)


@settings(max_examples=5, deadline=None)
@given(st.floats(0.0, 0.9))
def test_update_count_ignores_dataset_size(threshold):
    kept = sum(p.raw_score > threshold for p in PAIRS)
    if kept == 0:
        return
    r = train(cfg(conditioned=False), quick(filter_threshold=threshold, total_steps=7), PAIRS, 8)
    assert r.updates == 7 and r.n_train == kept


def test_runs_are_bit_identical(tmp_path):
    a = train(cfg(conditioned=False), quick(), PAIRS, 8, out_dir=tmp_path / "a")
    b = train(cfg(conditioned=False), quick(), PAIRS, 8, out_dir=tmp_path / "b")
    assert (tmp_path / "a/checkpoint/params.bin").read_bytes() == (tmp_path / "b/checkpoint/params.bin").read_bytes()
    for k, v in a.model.state_dict().items():
        np.testing.assert_array_equal(v, b.model.state_dict()[k])


def test_resume_bit_matches_unbroken_run(tmp_path):
    mc = cfg()
    tc = quick(objective="conditioned", total_steps=30, batch_size=64)
    bs = fit_buckets([p.raw_score for p in PAIRS], "uniform", 8)
    full = train(mc, tc, PAIRS, 8, bucket_spec=bs)
    half = train(mc, tc, PAIRS, 8, bucket_spec=bs, stop_at=13)
    half.state.save(tmp_path / "state", mc, tc)
    state = TrainState.load(tmp_path / "state", mc, tc)
    rest = train(mc, tc, PAIRS, 8, bucket_spec=bs, resume=state)
    assert [r["loss"] for r in half.log + rest.log] == [r["loss"] for r in full.log]
    for k, v in full.model.state_dict().items():
        np.testing.assert_array_equal(v, rest.model.state_dict()[k])
    with pytest.raises(nc.CheckpointError):
        TrainState.load(tmp_path / "state", mc, quick(objective="conditioned", total_steps=31))


def test_log_and_checkpoint_files(tmp_path):
    r = train(cfg(conditioned=False), quick(), PAIRS, 8, out_dir=tmp_path)
    with open(tmp_path / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["step", "lr", "loss", "wallclock_ms"]
    assert [int(x["step"]) for x in rows] == list(range(1, 7))
    assert float(rows[-1]["lr"]) == 0.0
    m = load_model(tmp_path / "checkpoint")
    for k, v in r.model.state_dict().items():
        np.testing.assert_array_equal(v, m.state_dict()[k])


def test_objective_and_model_must_agree():
    with pytest.raises(ValueError):
        train(cfg(), quick(), PAIRS, 8)
    with pytest.raises(ValueError):
        train(cfg(), quick(objective="conditioned"), PAIRS, 8)
    with pytest.raises(ValueError):
        train(cfg(conditioned=False), quick(objective="weighted"), PAIRS, 8)


def test_divergence_keeps_last_good_state(tmp_path):
    from noisycap.training import TrainingDiverged

    bad = [p.__class__(p.id, p.scene, p.caption, float("nan"), p.true_corruption) for p in PAIRS]
    with pytest.raises(TrainingDiverged) as info:
        train(cfg(conditioned=False), quick(objective="weighted"), bad, 8, weight_spec=WeightSpec(0.0, 1.0), out_dir=tmp_path)
    assert info.value.last_good.step == 0
    assert (tmp_path / "last_good" / "manifest.json").exists()
