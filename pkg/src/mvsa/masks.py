"""Per-head sliding-window attention masks.

Each attention head h gets a symmetric band mask of window size w_h: token t
may attend token u iff |t - u| <= (w_h - 1)/2.  The default schedule gives
head 0 a self-only window and doubles the reach per head after that
(w_i = 2^i + 1), so an 8-head layer sees windows {1,3,5,9,17,33,65,129}.
Masks are materialized as dense 0/1 float matrices; at the sequence lengths
this package targets a banded representation would buy nothing observable.

MaskSet instances are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


def head_window(i: int) -> int:
    """Window size for head i: 1 for head 0, otherwise 2^i + 1 (always odd)."""
    if i < 0:
        raise IndexError(f"head index must be nonnegative, got {i}")
    return 1 if i == 0 else 2**i + 1


@dataclass(frozen=True)
class WindowSchedule:
    """Odd per-head window sizes for one attention layer."""

    per_head_window: tuple[int, ...]

    def __post_init__(self):
        if len(self.per_head_window) < 1:
            raise ConfigError("schedule needs at least one head")
        for w in self.per_head_window:
            if w < 1 or w % 2 == 0:
                raise ConfigError(f"window sizes must be odd positive integers, got {self.per_head_window}")

    @property
    def heads(self) -> int:
        return len(self.per_head_window)

    @classmethod
    def exponential(cls, heads: int) -> "WindowSchedule":
        """The doubling schedule: w_0 = 1, w_i = 2^i + 1 for i >= 1."""
        return cls(tuple(head_window(i) for i in range(heads)))

    @classmethod
    def full(cls, heads: int, n_steps: int) -> "WindowSchedule":
        """Every head sees everything: window 2N-1 covers any N-step sequence."""
        w = max(2 * n_steps - 1, 1)
        if w % 2 == 0:
            w += 1
        return cls((w,) * heads)

    def window_size(self, head_index: int) -> int:
        if not 0 <= head_index < self.heads:
            raise IndexError(f"head index {head_index} out of range for {self.heads} heads")
        return self.per_head_window[head_index]


@dataclass(frozen=True)
class MaskSet:
    """Dense binary masks, one N x N matrix per head (broadcast over batch)."""

    masks: np.ndarray  # [H, N, N] of 0.0/1.0
    n_steps: int
    cls_policy: str = "windowed"

    def __post_init__(self):
        self.masks.setflags(write=False)

    @property
    def heads(self) -> int:
        return self.masks.shape[0]

    def is_all_ones(self) -> bool:
        return bool((self.masks == 1.0).all())


def band_mask(n_steps: int, window: int) -> np.ndarray:
    """N x N matrix with 1 where |t - u| <= (window - 1)/2."""
    half = (window - 1) // 2
    idx = np.arange(n_steps)
    return (np.abs(idx[:, None] - idx[None, :]) <= half).astype(np.float64)


def build_mask_set(
    schedule: WindowSchedule,
    n_steps: int,
    cls_index: int | None = None,
    cls_policy: str = "windowed",
) -> MaskSet:
    """Construct the per-head band masks for an N-step sequence.

    A head whose window reaches 2N-1 or more degenerates to full attention.
    When a [CLS] position exists, cls_policy chooses between masking it like
    any other token ("windowed") or opening its row and column in every head
    ("global").
    """
    if n_steps < 1:
        raise ConfigError(f"n_steps must be >= 1, got {n_steps}")
    if cls_policy not in ("windowed", "global"):
        raise ConfigError(f"unknown cls_policy {cls_policy!r}")
    masks = np.stack([band_mask(n_steps, w) for w in schedule.per_head_window])
    if cls_index is not None and cls_policy == "global":
        if not 0 <= cls_index < n_steps:
            raise ConfigError(f"cls_index {cls_index} out of range for {n_steps} steps")
        masks[:, cls_index, :] = 1.0
        masks[:, :, cls_index] = 1.0
    return MaskSet(masks=masks, n_steps=n_steps, cls_policy=cls_policy)


def receptive_field_bounds(layer: int, schedule: WindowSchedule) -> tuple[int, int]:
    """Schedule-level receptive-field extent after `layer` stacked layers.

    Returns (layer * smallest window, layer * largest window); this bound is
    not clipped by any particular sequence length.
    """
    if layer < 1:
        raise ConfigError(f"layer must be >= 1, got {layer}")
    return (layer * min(schedule.per_head_window), layer * max(schedule.per_head_window))


def reachability_oracle(schedule: WindowSchedule, n_layers: int, n_steps: int) -> np.ndarray:
    """Boolean reachability after stacking n_layers of each head's band mask.

    Composes each head's single-layer mask with itself via boolean matrix
    products, answering which input positions can influence which outputs.
    Intended for small verification instances (N <= 64, layers <= 8).
    """
    if n_layers < 1:
        raise ConfigError(f"n_layers must be >= 1, got {n_layers}")
    out = np.zeros((schedule.heads, n_steps, n_steps), dtype=bool)
    for h, w in enumerate(schedule.per_head_window):
        single = band_mask(n_steps, w) != 0.0
        reach = single
        for _ in range(n_layers - 1):
            reach = (reach.astype(np.int64) @ single.astype(np.int64)) > 0
        out[h] = reach
    return out


def render_mask_grid(mask_set: MaskSet, schedule: WindowSchedule) -> str:
    """Plain-text 0/1 grid per head, for the CLI."""
    lines = []
    for h in range(mask_set.heads):
        lines.append(f"head {h}  window {schedule.window_size(h)}")
        for row in mask_set.masks[h]:
            lines.append("".join("1" if v else "0" for v in row))
        lines.append("")
    return "\n".join(lines)


def render_mask_rows(mask_set: MaskSet, schedule: WindowSchedule) -> str:
    """Machine-readable rows: `head window t u value`, one entry per line."""
    lines = []
    for h in range(mask_set.heads):
        w = schedule.window_size(h)
        for t in range(mask_set.n_steps):
            for u in range(mask_set.n_steps):
                lines.append(f"{h} {w} {t} {u} {int(mask_set.masks[h, t, u])}")
    return "\n".join(lines)
