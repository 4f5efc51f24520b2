"""Sub-sampling prenet, positional encoding, and encoder/decoder stacks.

The prenet is two stride-2 width-3 convolutions with ReLU, cutting the
frame sequence to a quarter of its length before any attention runs.
Encoder and decoder blocks use pre-norm residuals (norm before sublayer)
with a final norm on top of each stack; the decoder adds a causal
self-attention and cross-attention over the encoder memory.

Parameters are immutable during evaluation; training mutates them from a
single thread.  Batch elements are independent throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .attention import AttentionParams, causal_mask, multi_head_block
from .config import ModelConfig
from .errors import DataError
from .masks import MaskSet, WindowSchedule, build_mask_set
from .rng import RngState
from .tensor import Tensor


@dataclass
class EncodedSequence:
    """A batch of d_model token sequences, [B, N, d_model]."""

    tokens: Tensor
    n_steps: int


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, d: int) -> "LayerNormParams":
        return cls(gain=Tensor(np.ones(d), requires_grad=True), bias=Tensor(np.zeros(d), requires_grad=True))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, d_model: int, d_ff: int, rng: RngState) -> "FeedForwardParams":
        return cls(
            w1=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, d_ff)), requires_grad=True),
            b1=Tensor(np.zeros(d_ff), requires_grad=True),
            w2=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_ff), (d_ff, d_model)), requires_grad=True),
            b2=Tensor(np.zeros(d_model), requires_grad=True),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1, f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


@dataclass
class PrenetParams:
    conv1: Tensor
    bias1: Tensor
    conv2: Tensor
    bias2: Tensor

    @classmethod
    def init(cls, feature_dim: int, d_model: int, rng: RngState) -> "PrenetParams":
        return cls(
            conv1=Tensor(rng.normal(0.0, np.sqrt(2.0 / (3 * feature_dim)), (3, feature_dim, d_model)), requires_grad=True),
            bias1=Tensor(np.zeros(d_model), requires_grad=True),
            conv2=Tensor(rng.normal(0.0, np.sqrt(2.0 / (3 * d_model)), (3, d_model, d_model)), requires_grad=True),
            bias2=Tensor(np.zeros(d_model), requires_grad=True),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.conv1": self.conv1, f"{prefix}.bias1": self.bias1,
            f"{prefix}.conv2": self.conv2, f"{prefix}.bias2": self.bias2,
        }


@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    ffn: FeedForwardParams
    norm1: LayerNormParams
    norm2: LayerNormParams

    @classmethod
    def init(cls, config: ModelConfig, rng: RngState) -> "EncoderLayerParams":
        return cls(
            attn=AttentionParams.init(config.d_model, config.heads, rng),
            ffn=FeedForwardParams.init(config.d_model, config.d_ff, rng),
            norm1=LayerNormParams.init(config.d_model),
            norm2=LayerNormParams.init(config.d_model),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        out.update(self.attn.named(f"{prefix}.attn"))
        out.update(self.ffn.named(f"{prefix}.ffn"))
        out.update(self.norm1.named(f"{prefix}.norm1"))
        out.update(self.norm2.named(f"{prefix}.norm2"))
        return out


@dataclass
class DecoderLayerParams:
    self_attn: AttentionParams
    cross_attn: AttentionParams
    ffn: FeedForwardParams
    norm1: LayerNormParams
    norm2: LayerNormParams
    norm3: LayerNormParams

    @classmethod
    def init(cls, config: ModelConfig, rng: RngState) -> "DecoderLayerParams":
        return cls(
            self_attn=AttentionParams.init(config.d_model, config.heads, rng),
            cross_attn=AttentionParams.init(config.d_model, config.heads, rng),
            ffn=FeedForwardParams.init(config.d_model, config.d_ff, rng),
            norm1=LayerNormParams.init(config.d_model),
            norm2=LayerNormParams.init(config.d_model),
            norm3=LayerNormParams.init(config.d_model),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        out.update(self.self_attn.named(f"{prefix}.self_attn"))
        out.update(self.cross_attn.named(f"{prefix}.cross_attn"))
        out.update(self.ffn.named(f"{prefix}.ffn"))
        out.update(self.norm1.named(f"{prefix}.norm1"))
        out.update(self.norm2.named(f"{prefix}.norm2"))
        out.update(self.norm3.named(f"{prefix}.norm3"))
        return out


# -- building blocks ---------------------------------------------------------


def sinusoidal_encoding(n_steps: int, d_model: int) -> np.ndarray:
    """Classic fixed sin/cos position table, [N, d_model]."""
    position = np.arange(n_steps)[:, None].astype(np.float64)
    div = np.exp(np.arange(0, d_model, 2) * (-np.log(10000.0) / d_model))
    table = np.zeros((n_steps, d_model))
    table[:, 0::2] = np.sin(position * div)
    table[:, 1::2] = np.cos(position * div[: (d_model // 2)])
    return table


def prenet_output_length(t: int) -> int:
    """Sequence length after the two stride-2 convolutions: ceil(ceil(T/2)/2)."""
    t1 = (t + 2 * 1 - 3) // 2 + 1
    return (t1 + 2 * 1 - 3) // 2 + 1


def prenet(
    params: PrenetParams,
    x: Tensor,
    positional_encoding: bool = True,
    dropout_p: float = 0.0,
    rng: RngState | None = None,
    training: bool = False,
) -> EncodedSequence:
    """Downsample [B,T,feature_dim] frames to [B,~T/4,d_model] tokens."""
    if x.ndim != 3:
        raise DataError(f"prenet expects [B,T,feature_dim], got shape {x.shape}")
    if x.shape[1] < 4:
        raise DataError(f"prenet input too short: T={x.shape[1]} < 4 frames")
    h = tz.relu(tz.conv1d(x, params.conv1, stride=2, padding=1) + params.bias1)
    h = tz.relu(tz.conv1d(h, params.conv2, stride=2, padding=1) + params.bias2)
    n = h.shape[1]
    if positional_encoding:
        h = h + Tensor(sinusoidal_encoding(n, h.shape[2]))
    h = tz.dropout(h, dropout_p, rng, training)
    return EncodedSequence(tokens=h, n_steps=n)


def feed_forward(
    params: FeedForwardParams,
    x: Tensor,
    dropout_p: float = 0.0,
    rng: RngState | None = None,
    training: bool = False,
) -> Tensor:
    h = tz.relu(tz.linear(x, params.w1, params.b1))
    h = tz.dropout(h, dropout_p, rng, training)
    return tz.linear(h, params.w2, params.b2)


def encoder_schedule(config: ModelConfig, layer: int) -> WindowSchedule:
    """Window schedule for one encoder layer, honoring the per-layer override."""
    if config.per_layer_windows:
        groups = config.per_layer_windows.split(";")
        windows = groups[layer % len(groups)]
        return WindowSchedule(tuple(int(w) for w in windows.split(",")))
    return WindowSchedule.exponential(config.heads)


def encoder_mask_sets(config: ModelConfig, n_steps: int, cls_index: int | None = None) -> list[MaskSet | None]:
    """Per-layer mask sets for the encoder; None entries mean full attention."""
    if not config.multi_view:
        return [None] * config.n_encoder_layers
    return [
        build_mask_set(encoder_schedule(config, layer), n_steps, cls_index=cls_index, cls_policy=config.cls_policy)
        for layer in range(config.n_encoder_layers)
    ]


def encode(
    layers: list[EncoderLayerParams],
    final_norm: LayerNormParams,
    seq: EncodedSequence,
    config: ModelConfig,
    mask_sets: list[MaskSet | None],
    rng: RngState | None = None,
    training: bool = False,
) -> EncodedSequence:
    """Run the pre-norm encoder stack; masks are given per layer."""
    p = config.dropout
    x = seq.tokens
    for layer, masks in zip(layers, mask_sets):
        attended = multi_head_block(
            tz.layer_norm(x, layer.norm1.gain, layer.norm1.bias), layer.attn, masks,
            mode=config.mask_mode, dropout_p=p, rng=rng, training=training,
        )
        x = x + tz.dropout(attended, p, rng, training)
        ff = feed_forward(layer.ffn, tz.layer_norm(x, layer.norm2.gain, layer.norm2.bias), p, rng, training)
        x = x + tz.dropout(ff, p, rng, training)
    x = tz.layer_norm(x, final_norm.gain, final_norm.bias)
    return EncodedSequence(tokens=x, n_steps=seq.n_steps)


def decoder_mask_sets(config: ModelConfig, n_steps: int) -> list[MaskSet | None]:
    """Multi-view masks reach decoder self-attention only when configured to."""
    if not config.multi_view or config.mv_scope != "encoder_and_decoder":
        return [None] * config.n_decoder_layers
    return [
        build_mask_set(WindowSchedule.exponential(config.heads), n_steps, cls_policy=config.cls_policy)
        for _ in range(config.n_decoder_layers)
    ]


def decode(
    layers: list[DecoderLayerParams],
    final_norm: LayerNormParams,
    target: Tensor,
    memory: EncodedSequence,
    config: ModelConfig,
    rng: RngState | None = None,
    training: bool = False,
) -> Tensor:
    """Pre-norm decoder stack: causal self-attention, cross-attention, FFN."""
    if memory.n_steps < 1:
        raise DataError("decoder needs a non-empty memory")
    p = config.dropout
    n_t = target.shape[1]
    causal = causal_mask(n_t)
    mask_sets = decoder_mask_sets(config, n_t)
    x = target
    for layer, masks in zip(layers, mask_sets):
        attended = multi_head_block(
            tz.layer_norm(x, layer.norm1.gain, layer.norm1.bias), layer.self_attn, masks,
            mode=config.mask_mode, hard_mask=causal, dropout_p=p, rng=rng, training=training,
        )
        x = x + tz.dropout(attended, p, rng, training)
        cross = multi_head_block(
            tz.layer_norm(x, layer.norm2.gain, layer.norm2.bias), layer.cross_attn, None,
            memory=memory.tokens, dropout_p=p, rng=rng, training=training,
        )
        x = x + tz.dropout(cross, p, rng, training)
        ff = feed_forward(layer.ffn, tz.layer_norm(x, layer.norm3.gain, layer.norm3.bias), p, rng, training)
        x = x + tz.dropout(ff, p, rng, training)
    return tz.layer_norm(x, final_norm.gain, final_norm.bias)
