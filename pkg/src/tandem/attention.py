"""Per-stream multi-head scaled dot-product attention with sigmoid output.

By default tokens are time steps: every time step attends over the whole
sequence of its own stream. No positional encoding is added, so the module
is permutation-equivariant in time. ``axis="feature"`` instead treats the
``d_in`` scalar entries of each time step as tokens.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module

AXES = ("time", "feature")


class StreamAttention(Module):
    def __init__(self, d_in: int, d_h: int, heads: int, rng: np.random.Generator,
                 axis: str = "time"):
        super().__init__()
        if d_h % heads:
            raise ValueError(f"model dim {d_h} not divisible by {heads} heads")
        if axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
        self.d_in, self.d_h, self.heads, self.axis = d_in, d_h, heads, axis
        self.d_key = d_h // heads
        tok = d_in if axis == "time" else 1
        bound = 1.0 / math.sqrt(tok)
        self.w_q, self.w_k, self.w_v = [], [], []
        for h in range(heads):
            for name, store in (("q", self.w_q), ("k", self.w_k), ("v", self.w_v)):
                store.append(self.param(f"w_{name}{h}",
                                        rng.uniform(-bound, bound, (tok, self.d_key))))
        cat = heads * self.d_key * (1 if axis == "time" else d_in)
        ob = 1.0 / math.sqrt(cat)
        self.w_o = self.param("w_o", rng.uniform(-ob, ob, (cat, d_h)))

    def _tokens(self, seq) -> Tensor:
        seq = ad.constant(seq) if not isinstance(seq, Tensor) else seq
        if seq.shape[-1] != self.d_in:
            raise ad.ShapeError(f"attention: expected input dim {self.d_in}, got {seq.shape}")
        if seq.shape[-2] < 1:
            raise ad.ShapeError("attention: empty sequence")
        if self.axis == "feature":
            seq = ad.reshape(seq, seq.shape + (1,))
        return seq

    def _heads(self, tokens: Tensor, queries: Tensor):
        scale = 1.0 / math.sqrt(self.d_key)
        outs, weights = [], []
        for h in range(self.heads):
            q = ad.matmul(queries, self.w_q[h])
            k = ad.matmul(tokens, self.w_k[h])
            v = ad.matmul(tokens, self.w_v[h])
            w = ad.softmax_last_dim(ad.scale(ad.matmul(q, ad.transpose(k)), scale))
            weights.append(w)
            outs.append(ad.matmul(w, v))
        cat = outs[0] if self.heads == 1 else ad.concat_last_dim(*outs)
        if self.axis == "feature":
            cat = ad.reshape(cat, cat.shape[:-2] + (cat.shape[-2] * cat.shape[-1],))
        return ad.sigmoid(ad.matmul(cat, self.w_o)), weights

    def __call__(self, seq) -> Tensor:
        return attend_stream(seq, self)


def attend_stream(seq, params: StreamAttention) -> Tensor:
    """``(..., T, d_in)`` -> ``(..., T, d_h)``, entries in (0, 1)."""
    tokens = params._tokens(seq)
    out, _ = params._heads(tokens, tokens)
    return out


def attend_final(seq, params: StreamAttention) -> Tensor:
    """Last row of :func:`attend_stream`, ``(..., d_h)``, computed in O(T)."""
    tokens = params._tokens(seq)
    if params.axis == "time":
        last = ad.slice_(tokens, (Ellipsis, slice(-1, None), slice(None)))
        out, _ = params._heads(tokens, last)
    else:
        last = ad.slice_(tokens, (Ellipsis, slice(-1, None), slice(None), slice(None)))
        out, _ = params._heads(last, last)
    return ad.reshape(out, out.shape[:-2] + (out.shape[-1],))


def attention_scores(seq, params: StreamAttention) -> list[np.ndarray]:
    """Per-head softmax weights used by :func:`attend_stream`.

    Time axis: ``(..., T, T)`` per head; feature axis: ``(..., T, d_in, d_in)``.
    """
    tokens = params._tokens(seq)
    _, weights = params._heads(tokens, tokens)
    return [w.data for w in weights]
