"""Quality-controllable caption generator.

A linear scene encoder gives one global image embedding. A learned control
embedding (one row per alignment level) is fused with it into a prefix, and a
small pre-LN causal transformer decodes ``[prefix; BOS; w1..wT]``.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .microworld import BOS, EOS, Scene, WorldSpec
from .numcore import Tensor

FUSIONS = ("sum", "concat_seq", "concat_channel_mlp")


@dataclass(frozen=True)
class CaptionerConfig:
    vocab_size: int
    max_len: int
    n_features: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    k_levels: int = 8
    fusion: str = "concat_seq"
    conditioned: bool = True
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("CaptionerConfig: d_model must be divisible by n_heads")
        if self.fusion not in FUSIONS:
            raise ValueError(f"CaptionerConfig: unknown fusion {self.fusion!r}")
        if self.conditioned and self.k_levels < 1:
            raise ValueError("CaptionerConfig: k_levels must be >= 1")

    @classmethod
    def for_world(cls, world: WorldSpec, **kw) -> "CaptionerConfig":
        return cls(vocab_size=world.vocab_size, max_len=world.max_len, n_features=world.n_features, **kw)

    @property
    def n_prefix(self) -> int:
        return 2 if self.conditioned and self.fusion == "concat_seq" else 1

    @property
    def n_positions(self) -> int:
        return self.n_prefix + 1 + self.max_len

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: CaptionerConfig) -> dict[str, tuple[int, ...]]:
    d, v = cfg.d_model, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"scene.w": (cfg.n_features, d), "scene.b": (d,)}
    if cfg.conditioned:
        shapes["ctrl.emb"] = (cfg.k_levels, d)
        if cfg.fusion == "concat_channel_mlp":
            shapes.update({"fuse.w1": (2 * d, 2 * d), "fuse.b1": (2 * d,), "fuse.w2": (2 * d, d), "fuse.b2": (d,)})
    shapes["tok.emb"] = (v, d)
    shapes["pos.emb"] = (cfg.n_positions, d)
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        shapes.update(
            {
                p + "ln1.g": (d,),
                p + "ln1.b": (d,),
                p + "attn.qkv.w": (d, 3 * d),
                p + "attn.qkv.b": (3 * d,),
                p + "attn.proj.w": (d, d),
                p + "attn.proj.b": (d,),
                p + "ln2.g": (d,),
                p + "ln2.b": (d,),
                p + "mlp.fc.w": (d, 4 * d),
                p + "mlp.fc.b": (4 * d,),
                p + "mlp.out.w": (4 * d, d),
                p + "mlp.out.b": (d,),
            }
        )
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "head.w": (d, v), "head.b": (v,)})
    return shapes


def init_params(cfg: CaptionerConfig, seed: int) -> dict[str, np.ndarray]:
    """Normal(0, init_std) matrices, zero biases, unit LayerNorm gains.

    Each parameter draws from its own stream keyed by its name, so adding or
    removing a parameter never shifts the others' initial values.
    """
    out: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            out[name] = np.ones(shape, dtype=np.float32)
        elif leaf == "b" or name.endswith((".b1", ".b2")):
            out[name] = np.zeros(shape, dtype=np.float32)
        else:
            rng = nc.make_rng(seed, zlib.crc32(name.encode()))
            out[name] = (rng.standard_normal(shape) * cfg.init_std).astype(np.float32)
    return out


def multi_hot(attrs: np.ndarray, n_values: int, n_features: int) -> np.ndarray:
    attrs = np.asarray(attrs, dtype=np.int64)
    m = np.zeros((attrs.shape[0], n_features), dtype=np.float32)
    cols = attrs + np.arange(attrs.shape[1]) * n_values
    np.put_along_axis(m, cols, 1.0, axis=1)
    return m


class Captioner:
    def __init__(self, config: CaptionerConfig, seed: int = 0, params: dict[str, np.ndarray] | None = None):
        self.config = config
        raw = init_params(config, seed) if params is None else params
        expected = param_shapes(config)
        if set(raw) != set(expected):
            raise ValueError(f"Captioner: parameter names differ from config: {sorted(set(raw) ^ set(expected))}")
        self.params: dict[str, Tensor] = {}
        for name, shape in expected.items():
            arr = np.asarray(raw[name], dtype=np.float32)
            if arr.shape != shape:
                raise nc.ShapeError(f"param {name}", arr.shape, shape)
            self.params[name] = Tensor(arr.copy(), requires_grad=True)
        self._masks: dict[int, np.ndarray] = {}

    # -- parameters -----------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    # -- forward pieces -------------------------------------------------------

    def encode_scene(self, features: np.ndarray) -> Tensor:
        """(B, n_features) multi-hot rows -> (B, d_model) image embeddings."""
        x = Tensor(np.asarray(features, dtype=np.float32))
        return x @ self["scene.w"] + self["scene.b"]

    def fuse(self, image_emb: Tensor, z) -> Tensor:
        """Combine image embeddings (B, d) with control levels ``z`` (B,) into a (B, p, d) prefix."""
        cfg = self.config
        if not cfg.conditioned:
            raise ValueError("fuse: model is not conditioned")
        z = np.broadcast_to(np.asarray(z, dtype=np.int64), (image_emb.shape[0],))
        if z.min() < 1 or z.max() > cfg.k_levels:
            raise ValueError(f"fuse: control signal outside 1..{cfg.k_levels}")
        ctrl = nc.embedding(self["ctrl.emb"], z - 1)
        b, d = image_emb.shape
        if cfg.fusion == "sum":
            return (image_emb + ctrl).reshape(b, 1, d)
        if cfg.fusion == "concat_seq":
            return nc.concat([ctrl.reshape(b, 1, d), image_emb.reshape(b, 1, d)], axis=1)
        both = nc.concat([ctrl, image_emb], axis=1)
        hidden = nc.gelu(both @ self["fuse.w1"] + self["fuse.b1"])
        return (hidden @ self["fuse.w2"] + self["fuse.b2"]).reshape(b, 1, d)

    def prefix(self, image_emb: Tensor, z=None) -> Tensor:
        if self.config.conditioned:
            if z is None:
                raise ValueError("prefix: conditioned model needs a control signal")
            return self.fuse(image_emb, z)
        b, d = image_emb.shape
        return image_emb.reshape(b, 1, d)

    def _causal_mask(self, t: int) -> np.ndarray:
        m = self._masks.get(t)
        if m is None:
            m = self._masks[t] = np.triu(np.ones((t, t), dtype=bool), k=1)
        return m

    def _block(self, x: Tensor, i: int) -> Tensor:
        cfg = self.config
        p = f"blocks.{i}."
        b, t, d = x.shape
        h, dh = cfg.n_heads, d // cfg.n_heads
        y = nc.layer_norm(x, self[p + "ln1.g"], self[p + "ln1.b"])
        qkv = (y @ self[p + "attn.qkv.w"] + self[p + "attn.qkv.b"]).reshape(b, t, 3, h, dh)
        qkv = qkv.transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        att = nc.softmax(nc.masked_fill(att, np.broadcast_to(self._causal_mask(t), att.shape)), axis=-1)
        y = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        x = x + (y @ self[p + "attn.proj.w"] + self[p + "attn.proj.b"])
        y = nc.layer_norm(x, self[p + "ln2.g"], self[p + "ln2.b"])
        y = nc.gelu(y @ self[p + "mlp.fc.w"] + self[p + "mlp.fc.b"])
        return x + (y @ self[p + "mlp.out.w"] + self[p + "mlp.out.b"])

    def decode_logits(self, prefix: Tensor, tokens: np.ndarray) -> Tensor:
        """Logits (B, L, V) at the caption positions for inputs ``tokens`` (B, L), which start with BOS."""
        tokens = np.asarray(tokens, dtype=np.int64)
        b, p, d = prefix.shape
        length = tokens.shape[1]
        if p + length > self.config.n_positions:
            raise ValueError(f"decode_logits: context {p + length} exceeds window {self.config.n_positions}")
        x = nc.concat([prefix, nc.embedding(self["tok.emb"], tokens)], axis=1)
        x = x + self["pos.emb"][: p + length]
        for i in range(self.config.n_layers):
            x = self._block(x, i)
        x = x[:, p:, :]
        x = nc.layer_norm(x, self["ln_f.g"], self["ln_f.b"])
        return x @ self["head.w"] + self["head.b"]

    def logits(self, features: np.ndarray, tokens: np.ndarray, z=None) -> Tensor:
        return self.decode_logits(self.prefix(self.encode_scene(features), z), tokens)

    # -- inference ------------------------------------------------------------

    def generate_batch(self, features: np.ndarray, z=None, batch_size: int = 512):
        """Greedy decoding; returns ``(captions, truncated)`` with BOS/EOS stripped.

        Argmax ties go to the lowest token id.
        """
        features = np.asarray(features, dtype=np.float32)
        n = features.shape[0]
        zs = None if z is None else np.broadcast_to(np.asarray(z, dtype=np.int64), (n,))
        captions: list[tuple[int, ...]] = []
        truncated: list[bool] = []
        with nc.no_grad():
            for lo in range(0, n, batch_size):
                feats = features[lo : lo + batch_size]
                zb = None if zs is None else zs[lo : lo + batch_size]
                pre = self.prefix(self.encode_scene(feats), zb if self.config.conditioned else None)
                b = feats.shape[0]
                seq = np.full((b, 1), BOS, dtype=np.int64)
                done = np.zeros(b, dtype=bool)
                for _ in range(self.config.max_len):
                    nxt = self.decode_logits(pre, seq).data[:, -1, :].argmax(axis=-1)
                    nxt = np.where(done, EOS, nxt)
                    seq = np.concatenate([seq, nxt[:, None]], axis=1)
                    done |= nxt == EOS
                    if done.all():
                        break
                for row, fin in zip(seq[:, 1:], done):
                    stop = np.flatnonzero(row == EOS)
                    captions.append(tuple(int(t) for t in (row[: stop[0]] if stop.size else row)))
                    truncated.append(not fin)
        return captions, truncated

    def generate(self, scenes: Sequence[Scene], world: WorldSpec, z=None) -> list[tuple[int, ...]]:
        feats = multi_hot(np.array([s.attrs for s in scenes]), world.n_values, world.n_features)
        return self.generate_batch(feats, z)[0]
