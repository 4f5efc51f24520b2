"""Multi-head attention with head-wise window masking.

Two masking modes are provided.  post_softmax multiplies the per-head band
mask into the attention weights *after* the softmax, so a token's admitted
weights may sum to less than one (no renormalization).  pre_softmax instead
bars out-of-window scores with -inf before the softmax, so the surviving
weights renormalize to one.  Hard structural masks (the decoder's causal
mask) are always applied pre-softmax regardless of mode, since leaking
future positions through the softmax denominator would break causality.

Everything here is stateless given its parameters; concurrent forward
evaluation over shared immutable parameters is safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import ConfigError, ShapeError
from .masks import MaskSet
from .rng import RngState
from .tensor import Tensor

MASK_MODES = ("post_softmax", "pre_softmax")


@dataclass
class AttentionParams:
    """Projections for one multi-head attention block."""

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    heads: int

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    @classmethod
    def init(cls, d_model: int, heads: int, rng: RngState) -> "AttentionParams":
        if d_model % heads != 0:
            raise ConfigError(f"d_model {d_model} not divisible by {heads} heads")
        scale = 1.0 / np.sqrt(d_model)

        def w():
            return Tensor(rng.normal(0.0, scale, (d_model, d_model)), requires_grad=True)

        def b():
            return Tensor(np.zeros(d_model), requires_grad=True)

        return cls(w_q=w(), b_q=b(), w_k=w(), b_k=b(), w_v=w(), b_v=b(), w_o=w(), b_o=b(), heads=heads)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w_q": self.w_q, f"{prefix}.b_q": self.b_q,
            f"{prefix}.w_k": self.w_k, f"{prefix}.b_k": self.b_k,
            f"{prefix}.w_v": self.w_v, f"{prefix}.b_v": self.b_v,
            f"{prefix}.w_o": self.w_o, f"{prefix}.b_o": self.b_o,
        }


def multi_view_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask_set: MaskSet | None,
    mode: str = "post_softmax",
    hard_mask: np.ndarray | None = None,
    dropout_p: float = 0.0,
    rng: RngState | None = None,
    training: bool = False,
) -> Tensor:
    """Scaled dot-product attention over [B,H,N,d_k] inputs with window masks.

    mask_set supplies the per-head band masks ([H,N,N], broadcast over batch);
    None means full attention.  hard_mask is an always-pre-softmax structural
    mask such as the causal triangle ([N,N] or [Nq,Nk]).  Dropout, when
    active, hits the attention weights after all masking.
    """
    if mode not in MASK_MODES:
        raise ConfigError(f"unknown attention mode {mode!r}")
    if q.ndim != 4 or k.ndim != 4 or v.ndim != 4:
        raise ShapeError(f"attention expects [B,H,N,d_k] inputs, got {q.shape}, {k.shape}, {v.shape}")
    n_q, n_k = q.shape[2], k.shape[2]
    if mask_set is not None:
        if mask_set.n_steps != n_q or n_q != n_k:
            raise ShapeError(f"mask for {mask_set.n_steps} steps does not fit attention over {n_q}x{n_k} scores")
        if mask_set.heads != q.shape[1]:
            raise ShapeError(f"mask has {mask_set.heads} heads, inputs have {q.shape[1]}")

    d_k = q.shape[-1]
    scores = tz.matmul(q, tz.transpose(k, (0, 1, 3, 2))) / np.sqrt(d_k)
    if hard_mask is not None:
        scores = tz.masked_fill(scores, hard_mask, -np.inf)
    if mask_set is not None and mode == "pre_softmax":
        scores = tz.masked_fill(scores, mask_set.masks, -np.inf)
    weights = tz.softmax(scores, axis=-1)
    if mask_set is not None and mode == "post_softmax":
        weights = weights * Tensor(mask_set.masks)
    weights = tz.dropout(weights, dropout_p, rng, training)
    return tz.matmul(weights, v)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[B,N,d_model] -> [B,H,N,d_k]."""
    b, n, d = x.shape
    return tz.transpose(tz.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[B,H,N,d_k] -> [B,N,d_model]."""
    b, h, n, d_k = x.shape
    return tz.reshape(tz.transpose(x, (0, 2, 1, 3)), (b, n, h * d_k))


def multi_head_block(
    x: Tensor,
    params: AttentionParams,
    mask_set: MaskSet | None,
    mode: str = "post_softmax",
    memory: Tensor | None = None,
    hard_mask: np.ndarray | None = None,
    dropout_p: float = 0.0,
    rng: RngState | None = None,
    training: bool = False,
) -> Tensor:
    """Project, attend per head, merge, and project back to d_model.

    Queries come from x; keys and values come from memory when given (cross
    attention) and from x otherwise.  The caller owns residuals and layer
    norms.
    """
    if x.shape[-1] != params.d_model:
        raise ShapeError(f"input dim {x.shape[-1]} does not match params d_model {params.d_model}")
    source = memory if memory is not None else x
    q = split_heads(tz.linear(x, params.w_q, params.b_q), params.heads)
    k = split_heads(tz.linear(source, params.w_k, params.b_k), params.heads)
    v = split_heads(tz.linear(source, params.w_v, params.b_v), params.heads)
    attended = multi_view_attention(
        q, k, v, mask_set, mode=mode, hard_mask=hard_mask,
        dropout_p=dropout_p, rng=rng, training=training,
    )
    return tz.linear(merge_heads(attended), params.w_o, params.b_o)


def causal_mask(n_query: int, n_key: int | None = None) -> np.ndarray:
    """Lower-triangular keep mask: position t may attend u only for u <= t."""
    n_key = n_query if n_key is None else n_key
    return np.tril(np.ones((n_query, n_key)))
