"""Single-head scaled dot-product cross-attention and the pre-norm residual block."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Module, glorot, param
from .tensor import DimensionError, Tensor


class AttentionParams(Module):
    """Projections ``W_Q`` (d_model x d_attn), ``W_K``/``W_V`` (d_cond x d_attn), ``W_O`` (d_attn x d_out).

    ``d_out`` defaults to ``d_model`` so the output can be added back onto the
    query stream.
    """

    def __init__(self, rng: np.random.Generator, d_model: int, d_cond: int, d_attn: int,
                 d_out: int | None = None, zero_out: bool = False, dtype=np.float64):
        if d_attn < 1:
            raise DimensionError("d_attn must be >= 1")
        d_out = d_model if d_out is None else d_out
        self.w_q = param(glorot(rng, d_model, d_attn, dtype))
        self.w_k = param(glorot(rng, d_cond, d_attn, dtype))
        self.w_v = param(glorot(rng, d_cond, d_attn, dtype))
        self.w_o = param(np.zeros((d_attn, d_out), dtype) if zero_out else glorot(rng, d_attn, d_out, dtype))

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_cond(self) -> int:
        return self.w_k.shape[0]

    @property
    def d_attn(self) -> int:
        return self.w_q.shape[1]


def attention_weights(z: Tensor, c: Tensor, p: AttentionParams) -> Tensor:
    """Row-stochastic ``softmax(Q K^T / sqrt(d_attn))`` of shape (b, n, m)."""
    _check(z, c, p)
    q = T.matmul(z, p.w_q)
    k = T.matmul(c, p.w_k)
    logits = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(p.d_attn))
    return T.softmax(logits, axis=-1)


def cross_attention(z: Tensor, c: Tensor, p: AttentionParams, return_weights: bool = False):
    """Queries from ``z`` (b, n, d_model); keys and values from ``c`` (b, m, d_cond)."""
    a = attention_weights(z, c, p)
    v = T.matmul(c, p.w_v)
    out = T.matmul(T.matmul(a, v), p.w_o)
    return (out, a) if return_weights else out


def _check(z: Tensor, c: Tensor, p: AttentionParams) -> None:
    if z.ndim != 3 or c.ndim != 3:
        raise DimensionError(f"cross_attention expects rank-3 inputs, got {z.shape} and {c.shape}")
    if z.shape[-1] != p.d_model:
        raise DimensionError(f"query features {z.shape[-1]} != W_Q rows {p.d_model}")
    if c.shape[-1] != p.d_cond:
        raise DimensionError(f"condition features {c.shape[-1]} != W_K rows {p.d_cond}")
    if z.shape[0] != c.shape[0] and 1 not in (z.shape[0], c.shape[0]):
        raise DimensionError(f"batch sizes differ: {z.shape[0]} vs {c.shape[0]}")


class CrossAttnBlock(Module):
    """LayerNorm on the query stream, cross-attention, residual add."""

    def __init__(self, rng: np.random.Generator, d_model: int, d_cond: int, d_attn: int | None = None,
                 zero_out: bool = True, dtype=np.float64):
        self.norm = LayerNorm(d_model, dtype=dtype)
        self.attn = AttentionParams(rng, d_model, d_cond, d_attn or d_model, zero_out=zero_out, dtype=dtype)

    def branch(self, hidden: Tensor, cond: Tensor, gate: Tensor | None = None) -> Tensor:
        """Residual branch only; ``gate`` (b, n, 1) scales the normalised queries per token."""
        q = self.norm(hidden)
        if gate is not None:
            q = T.mul(q, gate)
        return cross_attention(q, cond, self.attn)

    def __call__(self, hidden: Tensor, cond: Tensor) -> Tensor:
        return cross_attn_block(hidden, cond, self)


def cross_attn_block(hidden: Tensor, emotion_latent: Tensor, blk: CrossAttnBlock) -> Tensor:
    if hidden.shape[-1] != blk.norm.gain.shape[0]:
        raise DimensionError(f"hidden width {hidden.shape[-1]} != norm width {blk.norm.gain.shape[0]}")
    return T.add(hidden, blk.branch(hidden, emotion_latent))
