"""Acoustic feature frontend and a deterministic synthetic speaker corpus.

The frontend turns 16 kHz mono waveforms into log mel-filterbank frames
(64 ms window, 16 ms hop, 80 banks), normalizes them with a sliding-window
mean/variance scheme, and applies training-time time/frequency masking.
The synthetic corpus replaces real speech for desk-scale experiments: each
speaker is a fixed spectral template plus a slow sinusoidal modulation, so
identity is linearly recoverable and learnability tests are cheap.

Feature extraction is pure per utterance; RNG streams are split per
utterance so parallel loading cannot perturb determinism.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .rng import RngState

SAMPLE_RATE = 16000
STFT_WINDOW = 1024  # 64 ms at 16 kHz
STFT_HOP = 256  # 16 ms
N_MELS = 80
MEL_F_MIN = 20.0
MEL_F_MAX = 7600.0
LOG_FLOOR = 1e-10
CMVN_WINDOW = 200
CMVN_VAR_FLOOR = 1e-8


@dataclass
class FeatureMatrix:
    """One utterance's frames: [T, n_banks] float array plus identity."""

    frames: np.ndarray
    utterance_id: str
    speaker_id: str


@dataclass
class SynthSpeakerProfile:
    """Generator settings for one synthetic speaker."""

    speaker_id: str
    spectral_template: np.ndarray  # nonnegative, unit sum
    modulation_rate: float  # Hz
    jitter_scale: float


def speaker_of(utterance_id: str) -> str:
    """Utterance ids carry their speaker as the prefix before '_'."""
    return utterance_id.split("_", 1)[0]


# -- mel filterbank frontend --------------------------------------------------


def _mel_of_hz(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _hz_of_mel(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _mel_points(n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    return _hz_of_mel(np.linspace(_mel_of_hz(f_min), _mel_of_hz(f_max), n_mels + 2))


def mel_filter_centers(n_mels: int = N_MELS, f_min: float = MEL_F_MIN, f_max: float = MEL_F_MAX) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    return _mel_points(n_mels, f_min, f_max)[1:-1]


def mel_filter_matrix(
    n_mels: int = N_MELS,
    n_fft: int = STFT_WINDOW,
    sample_rate: int = SAMPLE_RATE,
    f_min: float = MEL_F_MIN,
    f_max: float = MEL_F_MAX,
) -> np.ndarray:
    """Triangular filters on the mel scale, [n_mels, n_fft//2 + 1]."""
    points = _mel_points(n_mels, f_min, f_max)
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    left, center, right = points[:-2, None], points[1:-1, None], points[2:, None]
    rising = (freqs[None, :] - left) / (center - left)
    falling = (right - freqs[None, :]) / (right - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_features(waveform: np.ndarray, utterance_id: str = "", speaker_id: str = "") -> FeatureMatrix:
    """Log mel-filterbank frames from a 16 kHz waveform.

    Magnitude STFT with a 1024-sample Hann window and 256-sample hop;
    80 triangles spanning 20-7600 Hz; log with floor 1e-10.
    """
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1:
        raise DataError(f"waveform must be mono 1-D, got shape {waveform.shape}")
    if waveform.shape[0] < STFT_WINDOW:
        raise DataError(
            f"waveform too short: {waveform.shape[0]} samples < one {STFT_WINDOW}-sample window"
        )
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(STFT_WINDOW) / STFT_WINDOW)
    frames = np.lib.stride_tricks.sliding_window_view(waveform, STFT_WINDOW)[::STFT_HOP]
    spectrum = np.abs(np.fft.rfft(frames * window, axis=-1))
    banks = spectrum @ mel_filter_matrix().T
    out = np.log(np.maximum(banks, LOG_FLOOR))
    return FeatureMatrix(frames=out, utterance_id=utterance_id, speaker_id=speaker_id or speaker_of(utterance_id))


def cmvn(frames: np.ndarray, window: int = CMVN_WINDOW) -> np.ndarray:
    """Per-dimension mean/variance normalization over a sliding window.

    Each frame is normalized by statistics of the centered `window`-frame
    span around it, truncated at the utterance edges; utterances shorter
    than the window fall back to full-utterance statistics.  Variance is
    floored at 1e-8.
    """
    frames = np.asarray(frames, dtype=np.float64)
    t_len = frames.shape[0]
    if t_len < 1:
        raise DataError("cmvn needs at least one frame")
    if t_len <= window:
        lo = np.zeros(t_len, dtype=np.int64)
        hi = np.full(t_len, t_len, dtype=np.int64)
    else:
        idx = np.arange(t_len)
        half = window // 2
        lo = np.clip(idx - half, 0, None)
        hi = np.clip(idx + (window - half), None, t_len)
    zero_row = np.zeros((1, frames.shape[1]))
    csum = np.concatenate([zero_row, np.cumsum(frames, axis=0)])
    csq = np.concatenate([zero_row, np.cumsum(frames * frames, axis=0)])
    counts = (hi - lo).astype(np.float64)[:, None]
    mean = (csum[hi] - csum[lo]) / counts
    var = (csq[hi] - csq[lo]) / counts - mean * mean
    return (frames - mean) / np.sqrt(np.maximum(var, CMVN_VAR_FLOOR))


def spec_augment(
    frames: np.ndarray,
    rng: RngState,
    max_time_width: int = 20,
    max_freq_width: int = 10,
    max_masks: int = 2,
) -> np.ndarray:
    """Zero out 1-2 random time spans (width <= 20) and 1-2 bank spans (width <= 10).

    Widths are drawn uniformly including 0 (a zero-width mask changes
    nothing) and clipped to the utterance size.  Deterministic given rng.
    """
    out = np.array(frames, dtype=np.float64, copy=True)
    t_len, n_banks = out.shape
    n_time = int(rng.integers(1, max_masks + 1))
    for _ in range(n_time):
        lo, hi = _mask_span(rng, t_len, max_time_width)
        out[lo:hi, :] = 0.0
    n_freq = int(rng.integers(1, max_masks + 1))
    for _ in range(n_freq):
        lo, hi = _mask_span(rng, n_banks, max_freq_width)
        out[:, lo:hi] = 0.0
    return out


def _mask_span(rng: RngState, size: int, max_width: int) -> tuple[int, int]:
    width = min(int(rng.integers(0, max_width + 1)), size)
    start = int(rng.integers(0, size - width + 1))
    return start, start + width


def crop_or_pad(frames: np.ndarray, target: int, rng: RngState) -> np.ndarray:
    """Random contiguous crop to `target` frames, or cyclic repetition up to it."""
    t_len = frames.shape[0]
    if t_len == target:
        return frames
    if t_len > target:
        start = int(rng.integers(0, t_len - target + 1))
        return frames[start : start + target]
    reps = -(-target // t_len)
    return np.tile(frames, (reps, 1))[:target]


# -- synthetic corpus ---------------------------------------------------------


@dataclass
class SynthCorpus:
    train: list[FeatureMatrix]
    test: list[FeatureMatrix]
    trials: list[tuple[int, str, str]]
    profiles: list[SynthSpeakerProfile]

    @property
    def speakers(self) -> list[str]:
        return [p.speaker_id for p in self.profiles]


def synth_utterance(profile: SynthSpeakerProfile, n_frames: int, rng: RngState, n_banks: int = N_MELS) -> np.ndarray:
    """One utterance: scaled template + slow sinusoid + per-cell noise."""
    t = np.arange(n_frames, dtype=np.float64)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    modulation = 0.3 * np.sin(2.0 * np.pi * profile.modulation_rate * t * 0.016 + phase)
    noise = rng.normal(0.0, profile.jitter_scale, (n_frames, n_banks)) if profile.jitter_scale > 0 else 0.0
    return 80.0 * profile.spectral_template[None, :] + modulation[:, None] + noise


def synth_corpus(
    n_speakers: int,
    utts_per_speaker: int,
    frames_per_utt: int,
    seed: int,
    n_banks: int = N_MELS,
    jitter_scale: float = 0.05,
    test_fraction: float = 0.2,
) -> SynthCorpus:
    """Deterministic template-based corpus with a train/test split and trials.

    Every speaker contributes exactly utts_per_speaker utterances; the last
    ceil(test_fraction * utts_per_speaker) of each speaker's utterances form
    the held-out split.  Verification trials pair held-out utterances:
    all within-speaker pairs as targets and an equal count of cross-speaker
    pairs as nontargets.
    """
    if n_speakers < 2:
        raise DataError(f"need at least 2 speakers, got {n_speakers}")
    if utts_per_speaker < 1 or frames_per_utt < 1:
        raise DataError("utts_per_speaker and frames_per_utt must be positive")
    base = RngState(seed)
    profiles = []
    for s in range(n_speakers):
        prof_rng = base.split(s + 1)
        template = np.abs(prof_rng.normal(0.0, 1.0, (n_banks,)))
        template /= template.sum()
        profiles.append(
            SynthSpeakerProfile(
                speaker_id=f"spk{s:04d}",
                spectral_template=template,
                modulation_rate=float(prof_rng.uniform(0.5, 4.0)),
                jitter_scale=jitter_scale,
            )
        )
    n_test = int(np.ceil(test_fraction * utts_per_speaker)) if test_fraction > 0 else 0
    if n_test >= utts_per_speaker:
        n_test = max(0, utts_per_speaker - 1)
    train: list[FeatureMatrix] = []
    test: list[FeatureMatrix] = []
    for s, profile in enumerate(profiles):
        for u in range(utts_per_speaker):
            utt_rng = base.split((s + 1) * 1_000_000 + u + 1)
            frames = synth_utterance(profile, frames_per_utt, utt_rng, n_banks)
            mat = FeatureMatrix(
                frames=frames,
                utterance_id=f"{profile.speaker_id}_utt{u:04d}",
                speaker_id=profile.speaker_id,
            )
            (test if u >= utts_per_speaker - n_test else train).append(mat)
    trials = _balanced_trials(test, base.split(999_999_999)) if n_test > 0 else []
    return SynthCorpus(train=train, test=test, trials=trials, profiles=profiles)


def _balanced_trials(test: list[FeatureMatrix], rng: RngState) -> list[tuple[int, str, str]]:
    by_speaker: dict[str, list[str]] = {}
    for mat in test:
        by_speaker.setdefault(mat.speaker_id, []).append(mat.utterance_id)
    targets = [
        (1, utts[i], utts[j])
        for utts in by_speaker.values()
        for i in range(len(utts))
        for j in range(i + 1, len(utts))
    ]
    all_ids = [mat.utterance_id for mat in test]
    nontargets: list[tuple[int, str, str]] = []
    seen: set[tuple[str, str]] = set()
    while len(nontargets) < len(targets):
        i = int(rng.integers(0, len(all_ids)))
        j = int(rng.integers(0, len(all_ids)))
        pair = (all_ids[i], all_ids[j])
        if speaker_of(pair[0]) == speaker_of(pair[1]) or pair in seen:
            continue
        seen.add(pair)
        nontargets.append((0, pair[0], pair[1]))
    trials = targets + nontargets
    order = rng.permutation(len(trials))
    return [trials[i] for i in order]


# -- file formats -------------------------------------------------------------


def write_feature_records(path, mats: list[FeatureMatrix]) -> None:
    """Concatenated binary records: id (length-prefixed utf-8), T, F, f32 rows."""
    with open(path, "wb") as fh:
        for mat in mats:
            idb = mat.utterance_id.encode("utf-8")
            t_len, n_banks = mat.frames.shape
            fh.write(struct.pack("<I", len(idb)))
            fh.write(idb)
            fh.write(struct.pack("<II", t_len, n_banks))
            fh.write(np.ascontiguousarray(mat.frames, dtype="<f4").tobytes())


def read_feature_records(path) -> list[FeatureMatrix]:
    mats: list[FeatureMatrix] = []
    with open(path, "rb") as fh:
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise DataError(f"{path}: truncated record header")
            (id_len,) = struct.unpack("<I", head)
            idb = fh.read(id_len)
            dims = fh.read(8)
            if len(idb) != id_len or len(dims) != 8:
                raise DataError(f"{path}: truncated record")
            t_len, n_banks = struct.unpack("<II", dims)
            if t_len < 1 or n_banks < 1:
                raise DataError(f"{path}: record {idb!r} has empty shape {t_len}x{n_banks}")
            raw = fh.read(4 * t_len * n_banks)
            if len(raw) != 4 * t_len * n_banks:
                raise DataError(f"{path}: truncated frame data for {idb!r}")
            frames = np.frombuffer(raw, dtype="<f4").reshape(t_len, n_banks).astype(np.float64)
            if not np.isfinite(frames).all():
                raise DataError(f"{path}: non-finite values in record {idb!r}")
            utt = idb.decode("utf-8")
            mats.append(FeatureMatrix(frames=frames, utterance_id=utt, speaker_id=speaker_of(utt)))
    return mats


def write_trials(path, trials: list[tuple[int, str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for label, enroll, test in trials:
            fh.write(f"{label} {enroll} {test}\n")


def read_trials(path) -> list[tuple[int, str, str]]:
    trials: list[tuple[int, str, str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: expected `label enroll test` with label 0/1, got {line!r}")
            trials.append((int(parts[0]), parts[1], parts[2]))
    return trials


def read_wav(path) -> np.ndarray:
    """Mono 16-bit PCM at 16 kHz -> float64 samples in [-1, 1]."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise DataError(f"{path}: expected mono audio, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise DataError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        if fh.getframerate() != SAMPLE_RATE:
            raise DataError(f"{path}: expected {SAMPLE_RATE} Hz, got {fh.getframerate()}")
        raw = fh.readframes(fh.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
