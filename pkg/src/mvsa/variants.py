"""The five speaker-embedding architectures and their pooling heads.

Every variant maps a batch of feature frames to a fixed-size speaker
embedding plus classification logits over the training speakers:

  a: decoder runs with a single learned aggregation token as its whole
     input; its one output position is projected to the embedding.
  b: decoder input is the encoder output with the aggregation token
     appended at the end, under causal self-attention; the final
     position is projected to the embedding.
  c: plain temporal mean of the encoder output; the mean itself is the
     embedding (no projection, so embedding_dim must equal d_model).
  d: aggregation token prepended before the encoder; encoder output at
     position 0 is projected to the embedding.
  e: encoder output -> linear -> attention-weighted mean/std pooling ->
     two hidden layers; the embedding is the first hidden layer's
     pre-activation output.

Parameters are immutable during evaluation; training mutates them from
one thread.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .config import ModelConfig
from .errors import DataError, ShapeError
from .rng import RngState
from .tensor import Tensor
from .transformer import (
    DecoderLayerParams,
    EncodedSequence,
    EncoderLayerParams,
    LayerNormParams,
    PrenetParams,
    decode,
    encode,
    encoder_mask_sets,
    prenet,
)


@dataclass
class SpeakerEmbedding:
    """One utterance's fixed-size voice summary."""

    vector: np.ndarray
    utterance_id: str


@dataclass
class PoolingParams:
    """Attention scorer for weighted mean/std pooling over time."""

    w: Tensor  # [d_in, d_attn]
    b: Tensor  # [d_attn]
    v: Tensor  # [d_attn]
    eps_var: float = 1e-8

    @classmethod
    def init(cls, d_in: int, d_attn: int, rng: RngState) -> "PoolingParams":
        return cls(
            w=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d_attn)), requires_grad=True),
            b=Tensor(np.zeros(d_attn), requires_grad=True),
            v=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_attn), (d_attn,)), requires_grad=True),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b, f"{prefix}.v": self.v}


def attentive_stats_pool(h: Tensor, params: PoolingParams) -> Tensor:
    """Weighted mean and std over time: [B,N,d] -> [B,2d].

    Weights are softmax over t of v . tanh(W h_t + b); the variance is
    floored at eps_var before the square root, so std >= sqrt(eps_var).
    """
    if h.ndim != 3 or h.shape[1] < 1:
        raise ShapeError(f"pooling expects a nonempty [B,N,d] input, got {h.shape}")
    d_attn = params.v.shape[0]
    scores = tz.matmul(tz.tanh(tz.linear(h, params.w, params.b)), params.v.reshape((d_attn, 1)))
    alpha = tz.softmax(scores.reshape(scores.shape[:2]))  # [B,N], softmax over time
    alpha = alpha.reshape((*alpha.shape, 1))
    mu = tz.sum_(alpha * h, axis=1)
    second = tz.sum_(alpha * h * h, axis=1)
    sigma = tz.sqrt(tz.clamp_min(second - mu * mu, params.eps_var))
    return tz.concat([mu, sigma], axis=-1)


def _dense(rng: RngState, d_in: int, d_out: int) -> tuple[Tensor, Tensor]:
    w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d_out)), requires_grad=True)
    return w, Tensor(np.zeros(d_out), requires_grad=True)


@dataclass
class SpeakerModel:
    """All parameters for one configured variant, plus the forward pass."""

    config: ModelConfig
    prenet_params: PrenetParams
    encoder_layers: list[EncoderLayerParams]
    encoder_norm: LayerNormParams
    decoder_layers: list[DecoderLayerParams]
    decoder_norm: LayerNormParams | None
    cls_token: Tensor | None
    pre_pool_w: Tensor | None
    pre_pool_b: Tensor | None
    pooling: PoolingParams | None
    hidden1_w: Tensor | None
    hidden1_b: Tensor | None
    hidden2_w: Tensor | None
    hidden2_b: Tensor | None
    projection_w: Tensor | None
    projection_b: Tensor | None
    classifier_w: Tensor
    classifier_b: Tensor

    @classmethod
    def build(cls, config: ModelConfig, rng: RngState) -> "SpeakerModel":
        config.validate()
        c = config
        decoder_layers: list[DecoderLayerParams] = []
        decoder_norm = None
        if c.uses_decoder:
            decoder_layers = [DecoderLayerParams.init(c, rng) for _ in range(c.n_decoder_layers)]
            decoder_norm = LayerNormParams.init(c.d_model)
        cls_token = None
        if c.uses_cls:
            cls_token = Tensor(rng.normal(0.0, 1.0 / np.sqrt(c.d_model), (c.d_model,)), requires_grad=True)
        pre_pool_w = pre_pool_b = pooling = None
        hidden1_w = hidden1_b = hidden2_w = hidden2_b = None
        projection_w = projection_b = None
        if c.variant == "e":
            pre_pool_w, pre_pool_b = _dense(rng, c.d_model, c.d_model)
            pooling = PoolingParams.init(c.d_model, c.d_model, rng)
            hidden1_w, hidden1_b = _dense(rng, 2 * c.d_model, c.embedding_dim)
            hidden2_w, hidden2_b = _dense(rng, c.embedding_dim, c.embedding_dim)
        elif c.variant in ("a", "b", "d"):
            projection_w, projection_b = _dense(rng, c.d_model, c.embedding_dim)
        classifier_w, classifier_b = _dense(rng, c.embedding_dim, c.n_speakers)
        return cls(
            config=c,
            prenet_params=PrenetParams.init(c.feature_dim, c.d_model, rng),
            encoder_layers=[EncoderLayerParams.init(c, rng) for _ in range(c.n_encoder_layers)],
            encoder_norm=LayerNormParams.init(c.d_model),
            decoder_layers=decoder_layers,
            decoder_norm=decoder_norm,
            cls_token=cls_token,
            pre_pool_w=pre_pool_w,
            pre_pool_b=pre_pool_b,
            pooling=pooling,
            hidden1_w=hidden1_w,
            hidden1_b=hidden1_b,
            hidden2_w=hidden2_w,
            hidden2_b=hidden2_b,
            projection_w=projection_w,
            projection_b=projection_b,
            classifier_w=classifier_w,
            classifier_b=classifier_b,
        )

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.prenet_params.named("prenet"))
        for i, layer in enumerate(self.encoder_layers):
            out.update(layer.named(f"encoder.{i}"))
        out.update(self.encoder_norm.named("encoder.final"))
        for i, layer in enumerate(self.decoder_layers):
            out.update(layer.named(f"decoder.{i}"))
        if self.decoder_norm is not None:
            out.update(self.decoder_norm.named("decoder.final"))
        if self.cls_token is not None:
            out["cls.token"] = self.cls_token
        if self.config.variant == "e":
            out["head.pre_pool.w"] = self.pre_pool_w
            out["head.pre_pool.b"] = self.pre_pool_b
            out.update(self.pooling.named("head.pool"))
            out["head.hidden1.w"] = self.hidden1_w
            out["head.hidden1.b"] = self.hidden1_b
            out["head.hidden2.w"] = self.hidden2_w
            out["head.hidden2.b"] = self.hidden2_b
        if self.projection_w is not None:
            out["head.projection.w"] = self.projection_w
            out["head.projection.b"] = self.projection_b
        out["head.classifier.w"] = self.classifier_w
        out["head.classifier.b"] = self.classifier_b
        return out

    # -- forward -------------------------------------------------------------

    def _cls_batch(self, batch: int) -> Tensor:
        d = self.config.d_model
        return Tensor(np.ones((batch, 1, 1))) * self.cls_token.reshape((1, 1, d))

    def _encode_frames(
        self, features: Tensor, rng: RngState | None, training: bool, cls_index: int | None = None
    ) -> EncodedSequence:
        c = self.config
        seq = prenet(self.prenet_params, features, c.positional_encoding, c.dropout, rng, training)
        if cls_index is not None:
            tokens = tz.concat([self._cls_batch(features.shape[0]), seq.tokens], axis=1)
            seq = EncodedSequence(tokens=tokens, n_steps=seq.n_steps + 1)
        masks = encoder_mask_sets(c, seq.n_steps, cls_index=cls_index)
        return encode(self.encoder_layers, self.encoder_norm, seq, c, masks, rng, training)

    def forward(
        self, features: Tensor, rng: RngState | None = None, training: bool = False
    ) -> tuple[Tensor, Tensor]:
        """Features [B,T,feature_dim] -> (embedding [B,embedding_dim], logits [B,n_speakers])."""
        c = self.config
        b = features.shape[0]
        if c.variant == "a":
            memory = self._encode_frames(features, rng, training)
            out = decode(self.decoder_layers, self.decoder_norm, self._cls_batch(b), memory, c, rng, training)
            embedding = tz.linear(out[:, 0], self.projection_w, self.projection_b)
            head_in = embedding
        elif c.variant == "b":
            memory = self._encode_frames(features, rng, training)
            target = tz.concat([memory.tokens, self._cls_batch(b)], axis=1)
            out = decode(self.decoder_layers, self.decoder_norm, target, memory, c, rng, training)
            embedding = tz.linear(out[:, memory.n_steps], self.projection_w, self.projection_b)
            head_in = embedding
        elif c.variant == "c":
            memory = self._encode_frames(features, rng, training)
            embedding = tz.mean_(memory.tokens, axis=1)
            head_in = embedding
        elif c.variant == "d":
            memory = self._encode_frames(features, rng, training, cls_index=0)
            embedding = tz.linear(memory.tokens[:, 0], self.projection_w, self.projection_b)
            head_in = embedding
        else:  # variant e
            memory = self._encode_frames(features, rng, training)
            h = tz.linear(memory.tokens, self.pre_pool_w, self.pre_pool_b)
            pooled = attentive_stats_pool(h, self.pooling)
            embedding = tz.linear(pooled, self.hidden1_w, self.hidden1_b)
            head_in = tz.relu(tz.linear(tz.relu(embedding), self.hidden2_w, self.hidden2_b))
        logits = tz.linear(head_in, self.classifier_w, self.classifier_b)
        return embedding, logits

    def embed(self, features: Tensor) -> np.ndarray:
        """Evaluation-mode embeddings as a plain [B, embedding_dim] array."""
        with tz.no_grad():
            embedding, _ = self.forward(features, rng=None, training=False)
        return embedding.data


def count_parameters(config: ModelConfig) -> tuple[int, dict[str, int]]:
    """Total learnable scalars and a per-module breakdown for one config."""
    model = SpeakerModel.build(config, RngState(seed=0))
    breakdown: dict[str, int] = {}
    for name, t in model.named_parameters().items():
        module = name.split(".", 1)[0]
        breakdown[module] = breakdown.get(module, 0) + int(t.data.size)
    return sum(breakdown.values()), breakdown


def save_model(path, model: SpeakerModel, extras: dict[str, str] | None = None) -> None:
    from .checkpoint import save_checkpoint

    save_checkpoint(path, model.config, model.named_parameters(), extras)


def load_model(path) -> tuple[SpeakerModel, dict[str, str]]:
    """Rebuild a model from a checkpoint; parameter sets must match exactly."""
    from .checkpoint import load_checkpoint

    config, extras, tensors = load_checkpoint(path)
    model = SpeakerModel.build(config, RngState(seed=0))
    params = model.named_parameters()
    missing = sorted(set(params) - set(tensors))
    surplus = sorted(set(tensors) - set(params))
    if missing or surplus:
        raise DataError(f"checkpoint parameter mismatch: missing {missing}, unexpected {surplus}")
    for name, t in params.items():
        if tensors[name].shape != t.data.shape:
            raise DataError(
                f"checkpoint tensor {name} has shape {tensors[name].shape}, model expects {t.data.shape}"
            )
        t.data = tensors[name]
    return model, extras
