"""Frozen-encoder evaluation: feature extraction and a linear probe.

The probe is multinomial logistic regression trained by full-batch
gradient descent from a zero initialization, so fitting is fully
deterministic. Features come from the encoder applied to raw
(unaugmented) segments; the projector plays no role in evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import model as model_mod
from .data import Dataset, loso_splits
from .model import ModelParams


@dataclass(frozen=True)
class ProbeConfig:
    l2: float = 1e-3
    max_iters: int = 500
    lr: float = 0.1
    tol: float = 1e-7

    def validate(self) -> None:
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass
class ProbeModel:
    weights: np.ndarray  # (classes, d)
    bias: np.ndarray     # (classes,)
    loss_history: np.ndarray


def extract_features(params: ModelParams, segments: Sequence) -> np.ndarray:
    """Encoder features for raw segments, shape (N, d_low).

    Pure: the parameters are read-only and left untouched.
    """
    stack = np.stack(
        [np.asarray(seg.samples if hasattr(seg, "samples") else seg, dtype=np.float64)
         for seg in segments]
    )
    features, _ = model_mod.encoder_forward_batch(params, stack)
    return features


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def fit_logistic(features: np.ndarray, labels: np.ndarray, cfg: ProbeConfig) -> ProbeModel:
    """Minimize softmax cross-entropy + (l2/2)*||W||^2 by gradient descent.

    Zero-initialized, full batch, fixed learning rate; stops when the
    loss delta falls below the tolerance or at the iteration cap.
    """
    cfg.validate()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"features {x.shape} and labels {y.shape} are inconsistent")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite feature")
    if np.unique(y).size < 2:
        raise ValueError("probe needs at least two classes present")
    n, d = x.shape
    classes = int(y.max()) + 1
    onehot = np.zeros((n, classes))
    onehot[np.arange(n), y] = 1.0
    w = np.zeros((classes, d))
    b = np.zeros(classes)
    history = []
    prev = np.inf
    for _ in range(cfg.max_iters):
        probs = _softmax(x @ w.T + b)
        loss = float(
            -np.mean(np.log(np.maximum(probs[np.arange(n), y], 1e-300)))
            + 0.5 * cfg.l2 * np.sum(w * w)
        )
        history.append(loss)
        if abs(prev - loss) < cfg.tol:
            break
        prev = loss
        delta = (probs - onehot) / n
        w -= cfg.lr * (delta.T @ x + cfg.l2 * w)
        b -= cfg.lr * delta.sum(axis=0)
    return ProbeModel(weights=w, bias=b, loss_history=np.array(history))


def evaluate(model: ProbeModel, features: np.ndarray, labels: np.ndarray):
    """Accuracy, per-class accuracy, and the confusion matrix.

    Predictions are argmax logits; exact ties resolve to the lowest
    class index. Confusion rows are true classes, columns predictions.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    classes = model.weights.shape[0]
    preds = np.argmax(x @ model.weights.T + model.bias, axis=1)
    confusion = np.zeros((classes, classes), dtype=np.int64)
    for truth, pred in zip(y, preds):
        confusion[truth, pred] += 1
    counts = confusion.sum(axis=1)
    per_class = np.where(counts > 0, np.diag(confusion) / np.maximum(counts, 1), 0.0)
    accuracy = float(np.mean(preds == y))
    return accuracy, per_class, confusion


@dataclass
class ProbeReport:
    subjects: tuple[int, ...]
    accuracies: tuple[float, ...]
    mean: float
    std: float


def loso_evaluate(
    dataset: Dataset,
    params_by_subject: Mapping[int, ModelParams],
    cfg: ProbeConfig,
) -> ProbeReport:
    """Per-subject probe accuracy table plus the unweighted mean.

    For each split: extract features for the labeled training segments,
    fit the probe, and score the held-out subject's segments with the
    split's (frozen) encoder parameters.
    """
    subjects = []
    accuracies = []
    for split in loso_splits(dataset):
        params = params_by_subject[split.held_out_subject]
        train_idx = [
            i for i in split.train_indices if dataset.segments[i].label is not None
        ]
        train_feats = extract_features(params, [dataset.segments[i] for i in train_idx])
        train_labels = np.array([dataset.segments[i].label for i in train_idx])
        probe = fit_logistic(train_feats, train_labels, cfg)
        test_feats = extract_features(
            params, [dataset.segments[i] for i in split.test_indices]
        )
        test_labels = np.array(
            [dataset.segments[i].label for i in split.test_indices]
        )
        accuracy, _, _ = evaluate(probe, test_feats, test_labels)
        subjects.append(split.held_out_subject)
        accuracies.append(accuracy)
    return ProbeReport(
        subjects=tuple(subjects),
        accuracies=tuple(accuracies),
        mean=float(np.mean(accuracies)),
        std=float(np.std(accuracies)),
    )
