import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisycap import numcore as nc
from noisycap.captioner import FUSIONS, Captioner, CaptionerConfig, multi_hot
from noisycap.microworld import BOS, Scene, WorldSpec, generate_dataset
from noisycap.training import make_batch, sequence_nll

W = WorldSpec()
TINY = dict(d_model=16, n_layers=1, n_heads=2)


def tiny(**kw):
    return CaptionerConfig.for_world(W, **{**TINY, **kw})


def feats(n, seed=0):
    rng = np.random.default_rng(seed)
    return multi_hot(rng.integers(0, 8, size=(n, 6)), 8, W.n_features)


@pytest.mark.parametrize(
    "kw,expected",
    [
        # hand count for V=57, 48 features, d=64, 2 blocks of 49984, 15/14 positions
        ({}, 112057),
        ({"conditioned": False}, 111481),
        ({"fusion": "sum"}, 111993),
        ({"fusion": "concat_channel_mlp"}, 136761),
    ],
)
def test_parameter_count_golden(kw, expected):
    assert Captioner(CaptionerConfig.for_world(W, **kw)).n_params() == expected


def test_config_validation():
    with pytest.raises(ValueError):
        tiny(n_heads=3)
    with pytest.raises(ValueError):
        tiny(fusion="mlp")


def test_zero_scene_gives_bias():
    m = Captioner(tiny(), seed=1)
    m["scene.b"].data[:] = np.arange(16, dtype=np.float32)
    out = m.encode_scene(np.zeros((1, W.n_features)))
    np.testing.assert_array_equal(out.data[0], np.arange(16, dtype=np.float32))


def test_scene_embedding_sees_every_slot():
    m = Captioner(tiny(), seed=2)
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.integers(0, 8, size=6)
        b = a.copy()
        slot = rng.integers(6)
        b[slot] = (b[slot] + 1 + rng.integers(7)) % 8
        ea, eb = m.encode_scene(multi_hot(np.stack([a, b]), 8, W.n_features)).data
        assert not np.array_equal(ea, eb)


def test_sum_fusion_with_zero_control_row_is_identity():
    m = Captioner(tiny(fusion="sum"), seed=3)
    m["ctrl.emb"].data[4] = 0.0
    img = m.encode_scene(feats(3))
    np.testing.assert_array_equal(m.fuse(img, 5).data[:, 0, :], img.data)


def test_concat_seq_rows():
    m = Captioner(tiny(), seed=4)
    img = m.encode_scene(feats(3))
    a, b = m.fuse(img, 2).data, m.fuse(img, 7).data
    assert a.shape == (3, 2, 16)
    assert not np.array_equal(a[:, 0], b[:, 0])
    np.testing.assert_array_equal(a[:, 1], b[:, 1])


@pytest.mark.parametrize("fusion,rows", [("sum", 1), ("concat_seq", 2), ("concat_channel_mlp", 1)])
def test_prefix_rows_by_fusion(fusion, rows):
    m = Captioner(tiny(fusion=fusion), seed=5)
    assert m.fuse(m.encode_scene(feats(4)), [1, 2, 3, 8]).shape == (4, rows, 16)
    assert m.config.n_prefix == rows


@pytest.mark.parametrize("z", [0, 9])
def test_control_out_of_range(z):
    m = Captioner(tiny(), seed=0)
    with pytest.raises(ValueError):
        m.fuse(m.encode_scene(feats(1)), z)


def test_conditioned_model_needs_z_and_vanilla_ignores_it():
    cond = Captioner(tiny(), seed=0)
    with pytest.raises(ValueError):
        cond.prefix(cond.encode_scene(feats(1)))
    van = Captioner(tiny(conditioned=False), seed=0)
    f = feats(2)
    tok = np.full((2, 3), BOS)
    np.testing.assert_array_equal(van.logits(f, tok).data, van.logits(f, tok, z=3).data)


def test_context_overflow():
    m = Captioner(tiny(), seed=0)
    with pytest.raises(ValueError):
        m.logits(feats(1), np.zeros((1, W.max_len + 2), dtype=np.int64), 1)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 11), st.integers(0, 2**16))
def test_future_tokens_do_not_leak(t, seed):
    m = Captioner(tiny(), seed=6)
    rng = np.random.default_rng(seed)
    tok = rng.integers(0, W.vocab_size, size=(2, 12))
    tok[:, 0] = BOS
    alt = tok.copy()
    alt[:, t:] = rng.integers(0, W.vocab_size, size=(2, 12 - t))
    a = m.logits(feats(2), tok, 3).data
    b = m.logits(feats(2), alt, 3).data
    np.testing.assert_array_equal(a[:, :t], b[:, :t])


def test_prefix_order_matters():
    m = Captioner(tiny(), seed=7)
    img = m.encode_scene(feats(2))
    pre = m.fuse(img, 4)
    swapped = nc.concat([pre[:, 1:2, :], pre[:, 0:1, :]], axis=1)
    tok = np.full((2, 1), BOS)
    assert not np.allclose(m.decode_logits(pre, tok).data, m.decode_logits(swapped, tok).data)


def test_uniform_logits_emit_lowest_token_until_max_len():
    m = Captioner(tiny(), seed=8)
    m["head.w"].data[:] = 0.0
    m["head.b"].data[:] = 0.0
    caps, truncated = m.generate_batch(feats(3), z=2)
    assert caps == [(0,) * W.max_len] * 3
    assert truncated == [True] * 3


def test_generation_is_deterministic():
    m = Captioner(tiny(), seed=9)
    scenes = [p.scene for p in generate_dataset(W, 20, seed=1)]
    assert m.generate(scenes, W, 5) == m.generate(scenes, W, 5)


def test_logits_stay_finite_at_init():
    rng = np.random.default_rng(10)
    total = 0
    for fusion in FUSIONS:
        m = Captioner(tiny(fusion=fusion), seed=11)
        for _ in range(5):
            n = 700
            tok = rng.integers(0, W.vocab_size, size=(n, 1 + W.max_len))
            out = m.logits(feats(n, seed=int(rng.integers(1 << 30))), tok, rng.integers(1, 9, size=n))
            assert np.isfinite(out.data).all()
            total += n
    assert total >= 10_000


def test_init_is_keyed_by_parameter_name():
    a = Captioner(tiny(conditioned=False), seed=12).state_dict()
    b = Captioner(tiny(), seed=12).state_dict()
    np.testing.assert_array_equal(a["tok.emb"], b["tok.emb"])
    np.testing.assert_array_equal(a["head.w"], b["head.w"])


# -- k=1 collapses to a vanilla decoder with a learned constant prefix row ----


class ConstantPrefix(Captioner):
    """Vanilla-style model whose extra prefix row is a learned constant broadcast by a ones matmul."""

    def prefix(self, image_emb, z=None):
        b, d = image_emb.shape
        const = nc.Tensor(np.ones((b, 1), dtype=np.float32)) @ self["ctrl.emb"]
        return nc.concat([const.reshape(b, 1, d), image_emb.reshape(b, 1, d)], axis=1)


def _run(model, batches, levels):
    cfg = nc.LrSchedule(3e-3, len(batches), 0.1)
    params = model.parameters()
    opt = nc.OptimizerState.for_params([p.data for p in params], base_lr=3e-3, weight_decay=0.01)
    losses = []
    for i, batch in enumerate(batches):
        z = np.ones(len(batch), dtype=np.int64) if levels else None
        loss = sequence_nll(model.logits(batch.features, batch.inputs, z), batch).mean()
        losses.append(loss.item())
        nc.adamw_step([p.data for p in params], nc.backward(loss, params), opt, nc.lr_at(cfg, i + 1))
    return np.array(losses)


def test_single_level_matches_constant_prefix_model():
    cfg = tiny(k_levels=1)
    pairs = generate_dataset(W, 320, seed=13)
    batches = [make_batch(pairs[i : i + 32], 8, W.n_features) for i in range(0, 320, 32)]
    cond = Captioner(cfg, seed=14)
    const = ConstantPrefix(cfg, params=cond.state_dict())
    a = _run(cond, batches, levels=True)
    b = _run(const, batches, levels=False)
    assert np.abs(a - b).max() < 1e-5
    assert a[-1] < a[0]
