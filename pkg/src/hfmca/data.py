"""Signal data model, binary dataset storage, synthesis, and LOSO splits.

A dataset is a directory with a ``manifest`` text file (one line per
segment: file name, subject id, trial id, label or -1, channels,
samples, rate) plus one binary file per segment: magic ``HFMC``, a
version byte, then channels x samples little-endian float32 in
channel-major order. Samples are stored as float32 throughout; training
code promotes to float64 on entry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .seeding import STREAM_SYNTH, derive_rng

MAGIC = b"HFMC"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest"
MIN_WINDOW = 8


class DatasetError(Exception):
    """Malformed dataset directory or recording file."""


@dataclass
class EegSegment:
    """One fixed-length multichannel window.

    ``samples`` is channels x time float32; ``label`` is a class index
    or None for unlabeled segments.
    """

    samples: np.ndarray
    rate_hz: float
    subject_id: int
    label: int | None
    trial_id: int

    def validate(self) -> None:
        if self.samples.ndim != 2:
            raise ValueError(f"samples must be 2-D, got shape {self.samples.shape}")
        channels, time = self.samples.shape
        if channels < 1:
            raise ValueError("segment needs at least one channel")
        if time < MIN_WINDOW:
            raise ValueError(f"segment needs at least {MIN_WINDOW} samples, got {time}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("non-finite sample")
        if self.rate_hz <= 0:
            raise ValueError("rate_hz must be positive")
        if self.label is not None and self.label < 0:
            raise ValueError("label must be a non-negative class index or None")


@dataclass
class Dataset:
    """Homogeneous collection of segments sharing shape and rate."""

    segments: tuple[EegSegment, ...]
    class_count: int
    subject_ids: tuple[int, ...]

    @classmethod
    def from_segments(cls, segments: Sequence[EegSegment]) -> "Dataset":
        segs = tuple(segments)
        labels = []
        for i, seg in enumerate(segs):
            seg.validate()
            if seg.samples.shape != segs[0].samples.shape:
                raise ValueError(
                    f"segment {i} shape {seg.samples.shape} differs from "
                    f"{segs[0].samples.shape}"
                )
            if seg.rate_hz != segs[0].rate_hz:
                raise ValueError(f"segment {i} rate differs")
            if seg.label is not None:
                labels.append(seg.label)
        class_count = max(labels) + 1 if labels else 0
        subject_ids = tuple(sorted({seg.subject_id for seg in segs}))
        return cls(segments=segs, class_count=class_count, subject_ids=subject_ids)

    @property
    def channels(self) -> int:
        return self.segments[0].samples.shape[0]

    @property
    def window(self) -> int:
        return self.segments[0].samples.shape[1]

    @property
    def rate_hz(self) -> float:
        return self.segments[0].rate_hz


@dataclass(frozen=True)
class LosoSplit:
    """Index partition holding one subject out for evaluation."""

    held_out_subject: int
    train_indices: tuple[int, ...]
    test_indices: tuple[int, ...]


def window_samples(rate_hz: float, seconds: float) -> int:
    """Window length in samples for a duration at a sampling rate."""
    return int(round(rate_hz * seconds))


def segment_trials(
    recording: np.ndarray,
    window: int,
    *,
    rate_hz: float,
    subject_id: int,
    label: int | None = None,
    trial_id: int = 0,
) -> list[EegSegment]:
    """Cut a channels x T recording into consecutive non-overlapping windows.

    Produces floor(T / window) segments; the trailing remainder is
    dropped. A recording shorter than the window yields an empty list.
    Samples are stored as float32.
    """
    if window < MIN_WINDOW:
        raise ValueError(f"window must be >= {MIN_WINDOW}, got {window}")
    rec = np.asarray(recording, dtype=np.float32)
    if rec.ndim != 2:
        raise ValueError(f"recording must be 2-D, got shape {rec.shape}")
    count = rec.shape[1] // window
    out = []
    for k in range(count):
        seg = EegSegment(
            samples=rec[:, k * window : (k + 1) * window].copy(),
            rate_hz=rate_hz,
            subject_id=subject_id,
            label=label,
            trial_id=trial_id,
        )
        seg.validate()
        out.append(seg)
    return out


def zscore_channels(samples: np.ndarray) -> np.ndarray:
    """Per-channel standardization to mean 0 / unit variance (float32 out).

    Channels with near-zero spread are only centered, never divided.
    """
    x = np.asarray(samples, dtype=np.float64)
    mean = x.mean(axis=1, keepdims=True)
    std = x.std(axis=1, keepdims=True)
    std = np.where(std > 1e-8, std, 1.0)
    return ((x - mean) / std).astype(np.float32)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset directory; byte-stable across identical calls."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, seg in enumerate(dataset.segments):
        name = f"rec_{i:05d}.bin"
        payload = np.ascontiguousarray(seg.samples, dtype="<f4").tobytes()
        (root / name).write_bytes(MAGIC + bytes([FORMAT_VERSION]) + payload)
        label = -1 if seg.label is None else seg.label
        channels, time = seg.samples.shape
        lines.append(
            f"{name} {seg.subject_id} {seg.trial_id} {label} "
            f"{channels} {time} {seg.rate_hz!r}"
        )
    (root / MANIFEST_NAME).write_text("".join(line + "\n" for line in lines))


def load_dataset(path: str | Path, normalize: bool = True) -> Dataset:
    """Read a dataset directory written by :func:`save_dataset`.

    Validates magic bytes, version, payload size against the manifest
    shape, and sample finiteness. ``normalize`` applies per-channel
    z-scoring to every segment (on by default; raw amplitudes vary per
    subject and carry little class signal).
    """
    root = Path(path)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise DatasetError(f"missing manifest: {manifest}")
    segments = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7:
            raise DatasetError(f"manifest line {lineno}: expected 7 fields, got {len(parts)}")
        name, subject_id, trial_id, label, channels, time, rate_hz = parts
        channels, time = int(channels), int(time)
        rec_path = root / name
        if not rec_path.is_file():
            raise DatasetError(f"missing recording file: {name}")
        blob = rec_path.read_bytes()
        if blob[: len(MAGIC)] != MAGIC:
            raise DatasetError(f"{name}: bad magic bytes")
        if blob[len(MAGIC)] != FORMAT_VERSION:
            raise DatasetError(f"{name}: unsupported format version {blob[len(MAGIC)]}")
        payload = blob[len(MAGIC) + 1 :]
        expected = channels * time * 4
        if len(payload) != expected:
            raise DatasetError(
                f"{name}: shape mismatch, expected {expected} payload bytes, "
                f"got {len(payload)}"
            )
        samples = np.frombuffer(payload, dtype="<f4").reshape(channels, time).copy()
        if not np.all(np.isfinite(samples)):
            raise DatasetError(f"{name}: non-finite sample")
        if normalize:
            samples = zscore_channels(samples)
        segments.append(
            EegSegment(
                samples=samples,
                rate_hz=float(rate_hz),
                subject_id=int(subject_id),
                label=None if int(label) < 0 else int(label),
                trial_id=int(trial_id),
            )
        )
    return Dataset.from_segments(segments)


@dataclass(frozen=True)
class SynthConfig:
    """Sinusoid-plus-noise generator settings.

    Class ``k`` on channel ``c`` carries a sinusoid at
    ``freq_base + k*freq_class_step + c*freq_channel_step`` Hz with a
    per-(subject, channel) amplitude jitter, a random phase per segment
    and channel, and additive Gaussian noise. Classes are therefore
    separated by frequency content, which survives per-channel
    z-scoring.
    """

    class_count: int = 3
    subjects: int = 4
    segments_per_class: int = 12
    channels: int = 8
    window: int = 400
    rate_hz: float = 200.0
    noise_sigma: float = 0.5
    amplitude: float = 1.0
    amplitude_jitter: float = 0.2
    freq_base_hz: float = 6.0
    freq_class_step_hz: float = 8.0
    freq_channel_step_hz: float = 0.5

    def validate(self) -> None:
        if self.class_count < 2:
            raise ValueError("class_count must be at least 2")
        if self.subjects < 1:
            raise ValueError("subjects must be at least 1")
        if self.segments_per_class < 1:
            raise ValueError("segments_per_class must be at least 1")
        if self.channels < 1:
            raise ValueError("channels must be at least 1")
        if self.window < MIN_WINDOW:
            raise ValueError(f"window must be >= {MIN_WINDOW}")
        if self.rate_hz <= 0:
            raise ValueError("rate_hz must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.amplitude <= 0:
            raise ValueError("amplitude must be positive")
        if not 0 <= self.amplitude_jitter < 1:
            raise ValueError("amplitude_jitter must lie in [0, 1)")
        top = self.class_frequency(self.class_count - 1, self.channels - 1)
        if top >= self.rate_hz / 2:
            raise ValueError(
                f"top frequency {top} Hz exceeds the Nyquist limit {self.rate_hz / 2} Hz"
            )

    def class_frequency(self, class_index: int, channel: int) -> float:
        return (
            self.freq_base_hz
            + class_index * self.freq_class_step_hz
            + channel * self.freq_channel_step_hz
        )


def synth_dataset(cfg: SynthConfig, seed: int) -> Dataset:
    """Generate a labeled synthetic dataset; bit-identical for equal seeds."""
    cfg.validate()
    rng = derive_rng(seed, STREAM_SYNTH)
    amp_factor = 1.0 + cfg.amplitude_jitter * rng.uniform(
        -1.0, 1.0, size=(cfg.subjects, cfg.channels)
    )
    t = np.arange(cfg.window) / cfg.rate_hz
    segments = []
    trial = 0
    for subject in range(cfg.subjects):
        for klass in range(cfg.class_count):
            freqs = np.array(
                [cfg.class_frequency(klass, c) for c in range(cfg.channels)]
            )
            for _ in range(cfg.segments_per_class):
                phase = rng.uniform(0.0, 2.0 * math.pi, size=(cfg.channels, 1))
                clean = (
                    cfg.amplitude
                    * amp_factor[subject][:, None]
                    * np.sin(2.0 * math.pi * freqs[:, None] * t[None, :] + phase)
                )
                noise = (
                    rng.normal(0.0, cfg.noise_sigma, size=(cfg.channels, cfg.window))
                    if cfg.noise_sigma > 0
                    else 0.0
                )
                segments.append(
                    EegSegment(
                        samples=(clean + noise).astype(np.float32),
                        rate_hz=cfg.rate_hz,
                        subject_id=subject,
                        label=klass,
                        trial_id=trial,
                    )
                )
                trial += 1
    return Dataset.from_segments(segments)


def loso_splits(dataset: Dataset) -> list[LosoSplit]:
    """One split per subject: train on the others, test on its labeled segments."""
    if len(dataset.subject_ids) < 2:
        raise ValueError("leave-one-subject-out needs at least two subjects")
    splits = []
    for subject in dataset.subject_ids:
        train = tuple(
            i for i, seg in enumerate(dataset.segments) if seg.subject_id != subject
        )
        test = tuple(
            i
            for i, seg in enumerate(dataset.segments)
            if seg.subject_id == subject and seg.label is not None
        )
        splits.append(
            LosoSplit(held_out_subject=subject, train_indices=train, test_indices=test)
        )
    return splits
