"""Hierarchical multiview self-supervised learning for multichannel time series.

Implements the HFMCA objective (maximize statistical dependence between
per-view encoder features and their fused summary via correlation-matrix
log-determinants) and its HFMCA++ extension (an added cross-instance
contrastive regularizer), together with EEG-style view augmentations, a
synthetic labeled-signal generator, a deterministic training loop, and
frozen-encoder linear probing under leave-one-subject-out splits.
"""

__version__ = "0.1.0"

from . import augment, data, linalg, model, objective, probe, training  # noqa: F401
