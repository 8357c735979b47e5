"""Numerical core: float32 tensors, reverse-mode autodiff, AdamW, LR schedule, checkpoints."""

import numpy as np

from .checkpoint import CheckpointError, config_hash, load_checkpoint, save_checkpoint
from .optim import LrSchedule, OptimizerState, adamw_step, lr_at
from .tensor import (
    DTYPE,
    MASK_FILL,
    ShapeError,
    Tensor,
    add,
    concat,
    cross_entropy,
    embedding,
    gelu,
    getitem,
    is_grad_enabled,
    layer_norm,
    masked_fill,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    softmax,
    sub,
    transpose,
    tsum,
)


def make_rng(seed, *keys: int) -> np.random.Generator:
    """Seedable 64-bit counter-based generator (Philox).

    Extra integer ``keys`` derive independent streams from one run seed.
    """
    if keys:
        return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))
    return np.random.Generator(np.random.Philox(int(seed)))


def backward(loss: Tensor, leaves=()) -> list[np.ndarray]:
    """Run the reverse pass and return gradients for ``leaves``.

    Leaves the loss does not reach get an all-zero gradient.
    """
    for leaf in leaves:
        leaf.grad = None
    loss.backward()
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


__all__ = [
    "DTYPE",
    "MASK_FILL",
    "CheckpointError",
    "LrSchedule",
    "OptimizerState",
    "ShapeError",
    "Tensor",
    "adamw_step",
    "add",
    "backward",
    "concat",
    "config_hash",
    "cross_entropy",
    "embedding",
    "gelu",
    "getitem",
    "is_grad_enabled",
    "layer_norm",
    "load_checkpoint",
    "lr_at",
    "make_rng",
    "masked_fill",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "reshape",
    "save_checkpoint",
    "softmax",
    "sub",
    "transpose",
    "tsum",
]
