"""View transforms for multichannel windows and the multiview sampler.

Four transforms: channel permutation, temporal masking, channel dropout,
and temporal crop-and-resize. All are pure, preserve the channels x time
shape, and return float64 copies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TRANSFORM_KINDS = ("permutation", "mask", "dropout", "crop")


@dataclass(frozen=True)
class AugPolicy:
    """Stochastic augmentation policy emitting ``views_t`` views.

    Transform assignment round-robins over the four kinds in the order
    of ``TRANSFORM_KINDS``; per-view parameters are drawn uniformly from
    the configured ranges. ``swap_fraction`` is the fraction of the
    C(C-1)/2 unordered channel pairs applied as sequential swaps.
    """

    views_t: int = 4
    swap_fraction: float = 0.1
    mask_ratio_range: tuple[float, float] = (0.05, 0.2)
    dropout_fraction_range: tuple[float, float] = (0.05, 0.2)
    crop_ratio_range: tuple[float, float] = (0.5, 0.95)

    def validate(self) -> None:
        if self.views_t < 2:
            raise ValueError("views_t must be at least 2")
        if not 0.0 <= self.swap_fraction <= 1.0:
            raise ValueError("swap_fraction must lie in [0, 1]")
        for name, (lo, hi), low, high in (
            ("mask_ratio_range", self.mask_ratio_range, 0.0, 1.0),
            ("dropout_fraction_range", self.dropout_fraction_range, 0.0, 1.0),
            ("crop_ratio_range", self.crop_ratio_range, 0.0, 1.0),
        ):
            if not (low <= lo <= hi):
                raise ValueError(f"{name} must be well-ordered within [{low}, {high}]")
            if name == "crop_ratio_range":
                if lo <= 0.0 or hi > 1.0:
                    raise ValueError("crop_ratio_range must lie in (0, 1]")
            elif hi >= 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")


def identity_policy(views_t: int = 4) -> AugPolicy:
    """Degenerate policy whose views reproduce the input."""
    return AugPolicy(
        views_t=views_t,
        swap_fraction=0.0,
        mask_ratio_range=(0.0, 0.0),
        dropout_fraction_range=(0.0, 0.0),
        crop_ratio_range=(1.0, 1.0),
    )


@dataclass(frozen=True)
class ViewSet:
    """The augmented views of one source segment."""

    views: tuple[np.ndarray, ...]
    source_index: int
    kinds: tuple[str, ...]


def _samples_of(seg) -> np.ndarray:
    x = seg.samples if hasattr(seg, "samples") else seg
    return np.asarray(x, dtype=np.float64)


def channel_permutation(seg, perm) -> np.ndarray:
    """Row i of the output is row perm[i] of the input."""
    x = _samples_of(seg)
    p = np.asarray(perm, dtype=np.intp)
    if sorted(p.tolist()) != list(range(x.shape[0])):
        raise ValueError(f"not a valid permutation of {x.shape[0]} channels")
    return x[p].copy()


def temporal_mask(seg, start: int, length: int) -> np.ndarray:
    """Zero samples [start, start+length) on every channel."""
    x = _samples_of(seg)
    time = x.shape[1]
    if start < 0 or length < 0 or start + length > time:
        raise ValueError(f"mask window [{start}, {start + length}) outside [0, {time})")
    out = x.copy()
    out[:, start : start + length] = 0.0
    return out


def channel_dropout(seg, channels) -> np.ndarray:
    """Zero the listed channel rows."""
    x = _samples_of(seg)
    idx = np.asarray(sorted(set(int(c) for c in channels)), dtype=np.intp)
    if idx.size and (idx[0] < 0 or idx[-1] >= x.shape[0]):
        raise ValueError(f"channel index out of range 0..{x.shape[0] - 1}")
    out = x.copy()
    out[idx] = 0.0
    return out


def crop_resize(seg, start: int, length: int) -> np.ndarray:
    """Crop [start, start+length) and linearly resample to the full width.

    Output position i reads source position start + i*(length-1)/(time-1).
    """
    x = _samples_of(seg)
    time = x.shape[1]
    if length < 2:
        raise ValueError("crop length must be at least 2")
    if start < 0 or start + length > time:
        raise ValueError(f"crop window [{start}, {start + length}) outside [0, {time})")
    pos = start + np.arange(time) * (length - 1) / (time - 1)
    left = np.minimum(pos.astype(np.intp), time - 2)
    frac = pos - left
    return x[:, left] * (1.0 - frac) + x[:, left + 1] * frac


def _draw_permutation(rng: np.random.Generator, channels: int, swap_fraction: float):
    pairs = channels * (channels - 1) // 2
    swaps = int(round(swap_fraction * pairs))
    perm = np.arange(channels)
    for _ in range(swaps):
        a = int(rng.integers(channels))
        b = int(rng.integers(channels - 1))
        if b >= a:
            b += 1
        perm[a], perm[b] = perm[b], perm[a]
    return perm


def sample_views(seg, policy: AugPolicy, rng: np.random.Generator, source_index: int = -1) -> ViewSet:
    """Draw ``policy.views_t`` views; deterministic given the rng state."""
    policy.validate()
    x = _samples_of(seg)
    channels, time = x.shape
    views = []
    kinds = []
    for v in range(policy.views_t):
        kind = TRANSFORM_KINDS[v % len(TRANSFORM_KINDS)]
        if kind == "permutation":
            perm = _draw_permutation(rng, channels, policy.swap_fraction)
            view = channel_permutation(x, perm)
        elif kind == "mask":
            ratio = rng.uniform(*policy.mask_ratio_range)
            length = int(round(ratio * time))
            start = int(rng.integers(time - length + 1))
            view = temporal_mask(x, start, length)
        elif kind == "dropout":
            fraction = rng.uniform(*policy.dropout_fraction_range)
            count = int(round(fraction * channels))
            dropped = rng.permutation(channels)[:count]
            view = channel_dropout(x, dropped)
        else:
            ratio = rng.uniform(*policy.crop_ratio_range)
            length = min(max(2, int(round(ratio * time))), time)
            start = int(rng.integers(time - length + 1))
            view = crop_resize(x, start, length)
        views.append(view)
        kinds.append(kind)
    return ViewSet(views=tuple(views), source_index=source_index, kinds=tuple(kinds))
