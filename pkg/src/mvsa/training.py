"""Adam with decoupled weight decay, triangular cyclical LR, and the train loop.

The loop is supervised closed-set classification over speakers: crop or
cyclically pad every utterance to a fixed frame count, apply training-time
masking, minimize cross-entropy.  Everything (shuffling, cropping, masking,
dropout, init) draws from streams split off one seed, so a run is bitwise
reproducible.  One optimizer writer mutates parameters; gradient
computation happens between optimizer steps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .config import ScheduleConfig, TrainingConfig
from .errors import ConfigError, DataError, NumericError
from .features import FeatureMatrix, crop_or_pad, spec_augment
from .rng import RngState
from .tensor import Tensor
from .variants import SpeakerModel, save_model


def triangular_lr(step: int, schedule: ScheduleConfig) -> float:
    """Piecewise-linear cyclic rate: lr_min up to lr_max and back, per cycle.

    The value is computed as lr_min + (lr_max - lr_min) * frac; this exact
    expression reproduces the documented midpoint and endpoint values
    bit-for-bit, so do not refactor it into an averaged form.
    """
    if step < 0:
        raise ConfigError(f"step must be nonnegative, got {step}")
    pos = step % schedule.cycle_steps
    half = schedule.cycle_steps // 2
    frac = pos / half if pos <= half else (schedule.cycle_steps - pos) / half
    return schedule.lr_min + (schedule.lr_max - schedule.lr_min) * frac


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the true class, in log space."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise DataError(f"need [B,C] logits and [B] labels, got {logits.shape} and {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DataError(f"labels must lie in [0, {logits.shape[1]}), got range "
                        f"[{labels.min()}, {labels.max()}]")
    picked = tz.log_softmax(logits)[np.arange(labels.shape[0]), labels]
    return -tz.mean_(picked)


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus the shared hyperparameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1

    @classmethod
    def init(
        cls,
        params: dict[str, Tensor],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.1,
    ) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params.items()},
            v={name: np.zeros_like(t.data) for name, t in params.items()},
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            weight_decay=weight_decay,
        )


def adam_step(params: dict[str, Tensor], state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update; weight decay is applied to the parameter
    directly (decoupled from the gradient) before the Adam delta."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(grad).all():
            raise NumericError(f"non-finite gradient for parameter {name!r} at optimizer step {t}")
        if state.weight_decay:
            p.data = p.data - lr * state.weight_decay * p.data
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        p.data = p.data - lr * (state.m[name] / bc1) / (np.sqrt(state.v[name] / bc2) + state.eps)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class TrainResult:
    model: SpeakerModel
    speakers: list[str]
    metrics_lines: list[str] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    checkpoint_path: str | None = None
    wall_seconds: float = 0.0


class _EpochSampler:
    """Walks reshuffled permutations of the dataset, one index at a time."""

    def __init__(self, n: int, rng: RngState):
        self._n = n
        self._rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def take(self, count: int) -> list[int]:
        out: list[int] = []
        while len(out) < count:
            if self._pos == self._n:
                self._order = self._rng.permutation(self._n)
                self._pos = 0
            out.append(int(self._order[self._pos]))
            self._pos += 1
        return out


def speaker_table(train_set: list[FeatureMatrix], n_speakers: int) -> tuple[list[str], dict[str, int]]:
    """Sorted speaker list and label map; the set must fit the classifier."""
    speakers = sorted({mat.speaker_id for mat in train_set})
    if len(speakers) < 2:
        raise DataError(f"training needs at least 2 speakers, got {len(speakers)}")
    if len(speakers) > n_speakers:
        raise DataError(f"dataset has {len(speakers)} speakers but the model classifies {n_speakers}")
    return speakers, {spk: i for i, spk in enumerate(speakers)}


def train(
    config: TrainingConfig,
    train_set: list[FeatureMatrix],
    seed: int,
    out_dir=None,
) -> TrainResult:
    """Run the full training loop; returns the model and its metrics trace.

    When out_dir is given, metrics.log is appended line by line and a
    checkpoint is (over)written every checkpoint_interval steps and at the
    end.  On divergence a numeric error is raised without touching the
    checkpoint, so the last good snapshot survives.
    """
    config.validate()
    if not train_set:
        raise DataError("training set is empty")
    speakers, label_of = speaker_table(train_set, config.model.n_speakers)
    labels_all = np.array([label_of[mat.speaker_id] for mat in train_set], dtype=np.int64)

    root = RngState(seed)
    model = SpeakerModel.build(config.model, root.split(1))
    params = model.named_parameters()
    state = OptimizerState.init(
        params, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps, weight_decay=config.weight_decay
    )
    sampler = _EpochSampler(len(train_set), root.split(2))
    augment_rng = root.split(3)
    dropout_rng = root.split(4)

    out_dir = None if out_dir is None else str(out_dir)
    metrics_path = checkpoint_path = None
    log_fh = None
    if out_dir is not None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.log")
        checkpoint_path = os.path.join(out_dir, "checkpoint.mvsa")
        log_fh = open(metrics_path, "w", encoding="utf-8", newline="\n")

    def write_checkpoint(step_done: int) -> None:
        if checkpoint_path is not None:
            extras = {"speakers": ",".join(speakers), "seed": str(seed), "step": str(step_done)}
            save_model(checkpoint_path, model, extras)

    result = TrainResult(model=model, speakers=speakers, checkpoint_path=checkpoint_path)
    started = time.perf_counter()
    total = config.total_steps
    micro = max(1, config.batch_size // config.grad_accum)
    try:
        for step in range(total):
            lr = triangular_lr(step, config.schedule)
            step_loss = 0.0
            hits = 0
            seen = 0
            for _ in range(config.grad_accum):
                idx = sampler.take(micro)
                batch = np.stack(
                    [
                        spec_augment(crop_or_pad(train_set[i].frames, config.crop_frames, augment_rng), augment_rng)
                        if config.spec_augment
                        else crop_or_pad(train_set[i].frames, config.crop_frames, augment_rng)
                        for i in idx
                    ]
                )
                labels = labels_all[idx]
                _, logits = model.forward(Tensor(batch), rng=dropout_rng, training=True)
                loss = cross_entropy(logits, labels)
                if config.grad_accum > 1:
                    loss = loss * (1.0 / config.grad_accum)
                if not np.isfinite(loss.data):
                    raise NumericError(f"loss diverged (non-finite) at step {step}")
                loss.backward()
                step_loss += float(loss.data)
                hits += int(np.sum(np.argmax(logits.data, axis=1) == labels))
                seen += len(idx)
            if config.grad_clip > 0:
                clip_gradients(params, config.grad_clip)
            adam_step(params, state, lr)
            for p in params.values():
                p.zero_grad()
            result.losses.append(step_loss)
            if step % config.log_interval == 0 or step == total - 1:
                acc = 100.0 * hits / seen
                line = f"step={step} lr={lr!r} loss={step_loss!r} acc={acc!r}"
                result.metrics_lines.append(line)
                if log_fh is not None:
                    log_fh.write(line + "\n")
                    log_fh.flush()
            if (step + 1) % config.checkpoint_interval == 0:
                write_checkpoint(step + 1)
        write_checkpoint(total)
    finally:
        if log_fh is not None:
            log_fh.close()
    result.wall_seconds = time.perf_counter() - started
    return result
