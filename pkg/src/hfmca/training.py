"""Pretraining loop: batching, augmentation, optimization, checkpoints.

Deterministic end to end: shuffling derives from (seed, epoch), the view
sampler for instance i derives from (seed, epoch, i), so runs with equal
seeds produce bit-identical parameters and metrics regardless of worker
count. Labels are never read here; only ``segment.samples`` is touched.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as model_mod
from . import objective
from .augment import AugPolicy, sample_views
from .data import Dataset, loso_splits
from .model import ModelConfig, ModelParams, PARAM_FIELDS
from .objective import FeatureBatch, LossConfig
from .seeding import STREAM_SHUFFLE, STREAM_VIEWS, derive_rng

METRICS_NAME = "metrics.jsonl"
CHECKPOINT_NAME = "checkpoint.bin"

METRIC_KEYS = (
    "loss_total",
    "loss_logdet",
    "loss_cont",
    "rho_max",
    "offdiag_rms_r1",
    "offdiag_rms_r2",
    "z_var_min",
    "cca_residual",
)


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient during training."""

    def __init__(self, step: int, checkpoint_path: str | None = None):
        self.step = step
        self.checkpoint_path = checkpoint_path
        suffix = f"; last good checkpoint: {checkpoint_path}" if checkpoint_path else ""
        super().__init__(f"divergence at step {step}{suffix}")


@dataclass(frozen=True)
class TrainConfig:
    """Pretraining settings; nested configs carry their own validation."""

    model: ModelConfig
    loss: LossConfig = field(default_factory=LossConfig)
    policy: AugPolicy = field(default_factory=AugPolicy)
    batch_size: int = 32
    epochs: int = 30
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    opt_eps: float = 1e-8
    grad_clip: float = 5.0
    seed: int = 0
    checkpoint_interval: int = 10
    workers: int = 1

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        self.policy.validate()
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("moment decays must lie in [0, 1)")
        if self.opt_eps <= 0:
            raise ValueError("opt_eps must be positive")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be at least 1")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.policy.views_t != self.model.views:
            raise ValueError("policy views_t must match the model view count")


@dataclass
class OptimizerState:
    """Adaptive-moment accumulators plus the step counter."""

    m: ModelParams
    v: ModelParams
    step: int = 0


def init_optimizer_state(params: ModelParams) -> OptimizerState:
    return OptimizerState(
        m=model_mod.zeros_like_params(params),
        v=model_mod.zeros_like_params(params),
        step=0,
    )


def optimizer_step(
    params: ModelParams,
    grads: ModelParams,
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One bias-corrected adaptive-moment update; returns new (params, state)."""
    t = state.step + 1
    new_params = {}
    new_m = {}
    new_v = {}
    for name in PARAM_FIELDS:
        g = getattr(grads, name)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(state.step)
        m = beta1 * getattr(state.m, name) + (1.0 - beta1) * g
        v = beta2 * getattr(state.v, name) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params[name] = getattr(params, name) - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return (
        ModelParams(cfg=params.cfg, **new_params),
        OptimizerState(
            m=ModelParams(cfg=params.cfg, **new_m),
            v=ModelParams(cfg=params.cfg, **new_v),
            step=t,
        ),
    )


def clip_global_norm(grads: ModelParams, max_norm: float) -> float:
    """Scale all gradient tensors in place so the global norm is <= max_norm."""
    total = 0.0
    for arr in grads.arrays():
        total += float(np.sum(arr * arr))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for arr in grads.arrays():
            arr *= scale
    return norm


def _sample_batch_views(
    segments: Sequence, indices: np.ndarray, cfg: TrainConfig, epoch: int
) -> np.ndarray:
    def one(i: int) -> np.ndarray:
        rng = derive_rng(cfg.seed, STREAM_VIEWS, epoch, int(i))
        vs = sample_views(segments[int(i)], cfg.policy, rng, source_index=int(i))
        return np.stack(vs.views)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            stacked = list(pool.map(one, indices))
    else:
        stacked = [one(i) for i in indices]
    return np.stack(stacked)


def _optimizer_extras(state: OptimizerState, epochs_done: int) -> dict[str, np.ndarray]:
    extras = {"opt_step": np.array(float(state.step)), "epochs_done": np.array(float(epochs_done))}
    for name in PARAM_FIELDS:
        extras[f"adam_m_{name}"] = getattr(state.m, name)
        extras[f"adam_v_{name}"] = getattr(state.v, name)
    return extras


def _optimizer_from_extras(params: ModelParams, extras: dict) -> tuple[OptimizerState, int]:
    m_fields = {name: extras[f"adam_m_{name}"].copy() for name in PARAM_FIELDS}
    v_fields = {name: extras[f"adam_v_{name}"].copy() for name in PARAM_FIELDS}
    state = OptimizerState(
        m=ModelParams(cfg=params.cfg, **m_fields),
        v=ModelParams(cfg=params.cfg, **v_fields),
        step=int(extras["opt_step"].reshape(-1)[0]),
    )
    return state, int(extras["epochs_done"].reshape(-1)[0])


def save_training_checkpoint(
    path: str | Path, params: ModelParams, state: OptimizerState, epochs_done: int
) -> None:
    model_mod.save_checkpoint(path, params, _optimizer_extras(state, epochs_done))


def load_training_checkpoint(path: str | Path):
    """Returns (params, optimizer state, completed epoch count)."""
    params, extras = model_mod.load_checkpoint(path)
    state, epochs_done = _optimizer_from_extras(params, extras)
    return params, state, epochs_done


def pretrain(
    segments: Sequence,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
):
    """Self-supervised pretraining over unlabeled segments.

    Per epoch: seeded shuffle, then for each full batch (incomplete
    trailing batches are dropped) sample views per instance, run the
    forward pass, evaluate the loss, backpropagate, clip, and step the
    optimizer. Emits one metrics record per step and writes checkpoints
    every ``checkpoint_interval`` epochs plus a final one when
    ``out_dir`` is given. Returns (params, metrics rows).

    Only ``segment.samples`` is accessed; labels and subject ids are
    never read.
    """
    cfg.validate()
    n = len(segments)
    if n == 0:
        raise ValueError("dataset is empty")
    if n < cfg.batch_size:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds the {n} segments")

    if resume_from is not None:
        params, state, start_epoch = load_training_checkpoint(resume_from)
        if params.cfg != cfg.model:
            raise model_mod.CheckpointError(
                "resume checkpoint was trained with a different model config"
            )
    else:
        params = model_mod.init_params(cfg.model, cfg.seed)
        state = init_optimizer_state(params)
        start_epoch = 0

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        writer = open(out / METRICS_NAME, "a" if resume_from else "w")

    metrics: list[dict] = []
    last_checkpoint: str | None = str(resume_from) if resume_from else None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            order = derive_rng(cfg.seed, STREAM_SHUFFLE, epoch).permutation(n)
            for b in range(n // cfg.batch_size):
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                views = _sample_batch_views(segments, idx, cfg, epoch)
                s, z, trace = model_mod.forward_views(params, views)
                batch = FeatureBatch.from_features(s, z)
                total, (l_logdet, l_cont) = objective.total_loss(batch, cfg.loss)
                if not np.isfinite(total):
                    raise DivergenceError(state.step, last_checkpoint)
                grad_s, grad_z = objective.loss_gradients(batch, cfg.loss)
                grads = model_mod.model_backward(params, trace, grad_s, grad_z)
                clip_global_norm(grads, cfg.grad_clip)
                try:
                    params, state = optimizer_step(
                        params, grads, state, cfg.lr,
                        beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.opt_eps,
                    )
                except DivergenceError as err:
                    raise DivergenceError(err.step, last_checkpoint) from None
                diag = objective.diagnostics(batch, cfg.loss)
                row = {
                    "epoch": epoch,
                    "step": state.step - 1,
                    "lr": cfg.lr,
                    "loss_total": float(total),
                    "loss_logdet": float(l_logdet),
                    "loss_cont": float(l_cont),
                    "rho_max": diag["rho_max"],
                    "offdiag_rms_r1": diag["offdiag_rms_r1"],
                    "offdiag_rms_r2": diag["offdiag_rms_r2"],
                    "z_var_min": diag["z_var_min"],
                    "cca_residual": diag["cca_residual"],
                }
                metrics.append(row)
                if writer is not None:
                    writer.write(json.dumps(row) + "\n")
                    writer.flush()
            if (
                out is not None
                and (epoch + 1) % cfg.checkpoint_interval == 0
                and epoch + 1 < cfg.epochs
            ):
                path = out / f"checkpoint_ep{epoch + 1:04d}.bin"
                save_training_checkpoint(path, params, state, epoch + 1)
                last_checkpoint = str(path)
        if out is not None:
            final = out / CHECKPOINT_NAME
            save_training_checkpoint(final, params, state, cfg.epochs)
    finally:
        if writer is not None:
            writer.close()
    return params, metrics


@dataclass
class LosoPretrainResult:
    params_by_subject: dict[int, ModelParams]
    metrics_by_subject: dict[int, list[dict]]


def pretrain_loso(
    dataset: Dataset, cfg: TrainConfig, out_dir: str | Path | None = None
) -> LosoPretrainResult:
    """Pretrain once per leave-one-subject-out split.

    Each run sees only the training-side segments of its split, passed
    in ascending dataset order; held-out segments are never handed to
    :func:`pretrain`.
    """
    params_by: dict[int, ModelParams] = {}
    metrics_by: dict[int, list[dict]] = {}
    for split in loso_splits(dataset):
        train_segments = [dataset.segments[i] for i in split.train_indices]
        sub_out = None
        if out_dir is not None:
            sub_out = Path(out_dir) / f"split_{split.held_out_subject}"
        params, metrics = pretrain(train_segments, cfg, out_dir=sub_out)
        params_by[split.held_out_subject] = params
        metrics_by[split.held_out_subject] = metrics
    return LosoPretrainResult(params_by_subject=params_by, metrics_by_subject=metrics_by)
