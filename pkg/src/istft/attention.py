"""Block-wise masked interpretable multi-head attention.

The sequence interleaves ``n_o`` outputs per time instance, so position
``r`` belongs to time block ``r // n_o``. A query may attend to every key in
its own time block and in all earlier blocks; later blocks are masked.
Heads share one value projection, which makes the head-averaged weight
matrix the exact mixing matrix applied to the values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Linear, Module, uniform_init
from .tensor import Tensor


@dataclass(frozen=True)
class BlockMask:
    n_t: int
    n_o: int
    allowed: np.ndarray

    @property
    def M(self) -> int:
        return self.n_t * self.n_o


def build_block_mask(n_t: int, n_o: int) -> BlockMask:
    if n_t < 1 or n_o < 1:
        raise ValueError(f"block mask needs n_t >= 1 and n_o >= 1, got ({n_t}, {n_o})")
    block = np.arange(n_t * n_o) // n_o
    allowed = block[None, :] <= block[:, None]
    allowed.setflags(write=False)
    return BlockMask(n_t, n_o, allowed)


class InterpretableAttention(Module):
    """Per-head query/key projections, one shared value projection."""

    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int):
        if n_heads < 1 or d_model % n_heads:
            raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.d_model, self.n_heads = d_model, n_heads
        self.d_k = d_model // n_heads
        self.W_Q = [uniform_init(rng, d_model, (d_model, self.d_k)) for _ in range(n_heads)]
        self.W_K = [uniform_init(rng, d_model, (d_model, self.d_k)) for _ in range(n_heads)]
        self.W_V = uniform_init(rng, d_model, (d_model, self.d_k))
        self.out = Linear(rng, self.d_k, d_model)

    def head_weights(self, theta: Tensor, mask: BlockMask) -> list[Tensor]:
        scale = 1.0 / np.sqrt(self.d_k)
        heads = []
        for wq, wk in zip(self.W_Q, self.W_K):
            q = T.matmul(theta, wq)
            k = T.matmul(theta, wk)
            logits = T.scale(T.matmul(q, T.transpose(k)), scale)
            heads.append(T.masked_softmax(logits, mask.allowed))
        return heads

    def __call__(self, theta: Tensor, mask: BlockMask) -> tuple[Tensor, Tensor]:
        return interpretable_mha(theta, self, mask)


def interpretable_mha(theta: Tensor, w: InterpretableAttention,
                      mask: BlockMask) -> tuple[Tensor, Tensor]:
    """Return ``(output, Ã)`` for features ``theta`` of shape ``(..., M, d_model)``."""
    if theta.shape[-2] != mask.M:
        raise T.ShapeError(f"sequence length {theta.shape[-2]} != mask size {mask.M}")
    heads = w.head_weights(theta, mask)
    a_bar = heads[0]
    for h in heads[1:]:
        a_bar = T.add(a_bar, h)
    if len(heads) > 1:
        a_bar = T.scale(a_bar, 1.0 / len(heads))
    v = T.matmul(theta, w.W_V)
    return w.out(T.matmul(a_bar, v)), a_bar
