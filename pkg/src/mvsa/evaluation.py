"""Identification accuracy, verification scoring, and equal error rate.

Scoring uses cosine similarity between embeddings extracted from the whole
utterance (no cropping) with dropout and masking augmentation off.  The
equal error rate sweeps a decision threshold over every distinct score:
the false-acceptance rate (nontargets scored at or above the threshold)
falls as the threshold rises while the false-rejection rate (targets
scored below it) rises, and the EER is their value at the crossing,
linearly interpolated between adjacent sweep points when they do not meet
exactly.

Scoring is embarrassingly parallel over trials; the sweep itself is a
single pass over the sorted score list.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import DataError
from .features import FeatureMatrix
from .tensor import Tensor
from .variants import SpeakerModel


def cosine_score(e1: np.ndarray, e2: np.ndarray) -> float:
    """dot(e1, e2) / (|e1| |e2|), in [-1, 1]."""
    e1 = np.asarray(e1, dtype=np.float64).ravel()
    e2 = np.asarray(e2, dtype=np.float64).ravel()
    if e1.shape != e2.shape:
        raise DataError(f"embedding dimensions differ: {e1.shape} vs {e2.shape}")
    n1 = float(np.linalg.norm(e1))
    n2 = float(np.linalg.norm(e2))
    if n1 == 0.0 or n2 == 0.0:
        raise DataError("cannot score a zero embedding")
    return float(np.dot(e1, e2) / (n1 * n2))


def top1_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Percentage of rows whose argmax matches the label (ties -> lowest index)."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],) or logits.shape[0] == 0:
        raise DataError(f"need nonempty [B,C] logits and [B] labels, got {logits.shape} and {labels.shape}")
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == labels))


def eer(labels, scores) -> tuple[float, float]:
    """Equal error rate (percent) and its threshold from labeled scores.

    labels are 1 for target trials, 0 for nontarget; at least one of each
    is required.  FAR(t) = fraction of nontargets >= t, FRR(t) = fraction
    of targets < t, swept over all distinct scores plus a sentinel above
    the maximum.
    """
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise DataError(f"labels and scores must be matching 1-D lists, got {labels.shape} and {scores.shape}")
    if not np.isfinite(scores).all():
        raise DataError("scores contain non-finite values")
    targets = scores[labels == 1]
    nontargets = scores[labels == 0]
    if targets.size == 0 or nontargets.size == 0:
        raise DataError(
            f"equal error rate needs both trial classes, got {targets.size} targets "
            f"and {nontargets.size} nontargets"
        )
    thresholds = np.unique(scores)
    thresholds = np.append(thresholds, thresholds[-1] + 1.0)
    # vectorized counts via sorted positions
    far = 1.0 - np.searchsorted(np.sort(nontargets), thresholds, side="left") / nontargets.size
    frr = np.searchsorted(np.sort(targets), thresholds, side="left") / targets.size
    diff = far - frr
    i = int(np.argmax(diff <= 0.0))  # first index where FAR falls to/below FRR
    if diff[i] == 0.0 or i == 0:
        return float(100.0 * far[i]), float(thresholds[i])
    t = diff[i - 1] / (diff[i - 1] - diff[i])
    value = far[i - 1] + t * (far[i] - far[i - 1])
    threshold = thresholds[i - 1] + t * (thresholds[i] - thresholds[i - 1])
    return float(100.0 * value), float(threshold)


@dataclass
class ScoredTrial:
    label: int
    enroll: str
    test: str
    score: float


def extract_embeddings(model: SpeakerModel, mats: list[FeatureMatrix]) -> dict[str, np.ndarray]:
    """Evaluation-mode embeddings from full-length utterances, one at a time."""
    out: dict[str, np.ndarray] = {}
    for mat in mats:
        out[mat.utterance_id] = model.embed(Tensor(mat.frames[None, :, :]))[0]
    return out


def evaluate_identification(model: SpeakerModel, test_set: list[FeatureMatrix], speakers: list[str]) -> float:
    """Top-1 accuracy (percent) of the classifier head over full utterances."""
    if not test_set:
        raise DataError("identification needs a nonempty test set")
    label_of = {spk: i for i, spk in enumerate(speakers)}
    rows = []
    labels = []
    for mat in test_set:
        if mat.speaker_id not in label_of:
            raise DataError(f"utterance {mat.utterance_id!r} has speaker {mat.speaker_id!r} "
                            f"outside the model's speaker set")
        with tz.no_grad():
            _, logits = model.forward(Tensor(mat.frames[None, :, :]), rng=None, training=False)
        rows.append(logits.data[0])
        labels.append(label_of[mat.speaker_id])
    return top1_accuracy(np.stack(rows), np.array(labels))


def evaluate_verification(
    model: SpeakerModel,
    features: dict[str, FeatureMatrix],
    trials: list[tuple[int, str, str]],
) -> tuple[float, float, list[ScoredTrial]]:
    """Score every trial with cosine similarity and report (EER%, threshold, scores)."""
    if not trials:
        raise DataError("trial list is empty")
    needed: list[str] = []
    seen = set()
    for _, enroll, test in trials:
        for utt in (enroll, test):
            if utt not in seen:
                if utt not in features:
                    raise DataError(f"trial references unknown utterance {utt!r}")
                seen.add(utt)
                needed.append(utt)
    embeddings = extract_embeddings(model, [features[utt] for utt in needed])
    scored = [
        ScoredTrial(label, enroll, test, cosine_score(embeddings[enroll], embeddings[test]))
        for label, enroll, test in trials
    ]
    value, threshold = eer([s.label for s in scored], [s.score for s in scored])
    return value, threshold, scored


def write_scores(path, scored: list[ScoredTrial]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in scored:
            fh.write(f"{s.label} {s.enroll} {s.test} {s.score!r}\n")


def read_metrics_log(path) -> dict[str, list[float]]:
    """Parse `step=.. lr=.. loss=.. acc=..` lines into column arrays."""
    columns: dict[str, list[float]] = {"step": [], "lr": [], "loss": [], "acc": []}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = dict(part.split("=", 1) for part in line.split() if "=" in part)
            try:
                for key in columns:
                    columns[key].append(float(fields[key]))
            except (KeyError, ValueError):
                raise DataError(f"{path}:{lineno}: malformed metrics line {line!r}") from None
    return columns


def render_report(columns: dict[str, list[float]], out_path) -> None:
    """Loss, learning-rate, and accuracy curves as one SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = columns["step"]
    fig, axes = plt.subplots(3, 1, figsize=(7, 8), sharex=True)
    axes[0].plot(steps, columns["loss"], color="tab:red")
    axes[0].set_ylabel("loss")
    axes[1].plot(steps, columns["lr"], color="tab:blue")
    axes[1].set_ylabel("learning rate")
    axes[2].plot(steps, columns["acc"], color="tab:green")
    axes[2].set_ylabel("train acc (%)")
    axes[2].set_xlabel("step")
    for ax in axes:
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
