"""Weight-sharing encoder, fusion projector, and explicit backprop.

The encoder maps one channels x time view to a d_low feature vector:
temporal convolution across all channels, rectifier, average pooling,
flatten, then a one-hidden-layer MLP. The projector maps the
concatenation of all T view features to a d_high summary through a
3-layer MLP (rectifiers after layers 1 and 2).

Gradients are computed by hand-written reverse mode over cached forward
traces, so they can be checked independently against finite differences.
All tensors are float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .seeding import STREAM_INIT, derive_rng

CHECKPOINT_MAGIC = b"HFMP"
CHECKPOINT_VERSION = 1

# Serialization and optimizer traversal follow this declaration order.
PARAM_FIELDS = (
    "conv_w",
    "conv_b",
    "enc_w1",
    "enc_b1",
    "enc_w2",
    "enc_b2",
    "proj_w1",
    "proj_b1",
    "proj_w2",
    "proj_b2",
    "proj_w3",
    "proj_b3",
)


class CheckpointError(Exception):
    """Unreadable checkpoint or one inconsistent with the requested shapes."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``d_low`` must equal ``d_high``: the contrastive regularizer takes a
    dot product between averaged view features and summaries.
    """

    channels: int
    time: int
    views: int
    d_low: int = 32
    d_high: int = 32
    conv_width: int = 25
    conv_maps: int = 16
    pool: int = 4
    enc_hidden: int = 128
    proj_hidden: int = 512

    def validate(self) -> None:
        for name in ("channels", "time", "views", "d_low", "d_high", "conv_width",
                     "conv_maps", "pool", "enc_hidden", "proj_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.views < 2:
            raise ValueError("views must be at least 2")
        if self.d_low != self.d_high:
            raise ValueError("d_low must equal d_high")
        if self.conv_width > self.time:
            raise ValueError("conv_width exceeds the window length")
        if self.pooled_len < 1:
            raise ValueError("pooling leaves no output samples")

    @property
    def conv_out_len(self) -> int:
        return self.time - self.conv_width + 1

    @property
    def pooled_len(self) -> int:
        return self.conv_out_len // self.pool

    @property
    def flat_len(self) -> int:
        return self.pooled_len * self.conv_maps


@dataclass
class ModelParams:
    """Encoder + projector tensors; also used as the gradient container."""

    cfg: ModelConfig
    conv_w: np.ndarray  # (maps, channels, width)
    conv_b: np.ndarray  # (maps,)
    enc_w1: np.ndarray  # (enc_hidden, flat_len)
    enc_b1: np.ndarray  # (enc_hidden,)
    enc_w2: np.ndarray  # (d_low, enc_hidden)
    enc_b2: np.ndarray  # (d_low,)
    proj_w1: np.ndarray  # (proj_hidden, views * d_low)
    proj_b1: np.ndarray  # (proj_hidden,)
    proj_w2: np.ndarray  # (proj_hidden, proj_hidden)
    proj_b2: np.ndarray  # (proj_hidden,)
    proj_w3: np.ndarray  # (d_high, proj_hidden)
    proj_b3: np.ndarray  # (d_high,)

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in PARAM_FIELDS]


def _tensor_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {
        "conv_w": (cfg.conv_maps, cfg.channels, cfg.conv_width),
        "conv_b": (cfg.conv_maps,),
        "enc_w1": (cfg.enc_hidden, cfg.flat_len),
        "enc_b1": (cfg.enc_hidden,),
        "enc_w2": (cfg.d_low, cfg.enc_hidden),
        "enc_b2": (cfg.d_low,),
        "proj_w1": (cfg.proj_hidden, cfg.views * cfg.d_low),
        "proj_b1": (cfg.proj_hidden,),
        "proj_w2": (cfg.proj_hidden, cfg.proj_hidden),
        "proj_b2": (cfg.proj_hidden,),
        "proj_w3": (cfg.d_high, cfg.proj_hidden),
        "proj_b3": (cfg.d_high,),
    }


def zeros_like_params(params: ModelParams) -> ModelParams:
    fields = {name: np.zeros_like(getattr(params, name)) for name in PARAM_FIELDS}
    return ModelParams(cfg=params.cfg, **fields)


def _glorot_fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if name == "conv_w":
        maps, channels, width = shape
        return channels * width, maps * width
    out_dim, in_dim = shape
    return in_dim, out_dim


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out)); zero biases."""
    cfg.validate()
    rng = derive_rng(seed, STREAM_INIT)
    fields = {}
    for name, shape in _tensor_shapes(cfg).items():
        if name.split("_")[1].startswith("b"):
            fields[name] = np.zeros(shape)
            continue
        fan_in, fan_out = _glorot_fans(name, shape)
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        fields[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(cfg=cfg, **fields)


@dataclass
class EncoderTrace:
    params: ModelParams
    cols: np.ndarray   # (B, U, channels*width) convolution input windows
    mask1: np.ndarray  # (B, U, maps) rectifier mask after the convolution
    flat: np.ndarray   # (B, flat_len) pooled activations, MLP input
    mask3: np.ndarray  # (B, enc_hidden) rectifier mask in the MLP
    a3: np.ndarray     # (B, enc_hidden) hidden activations


@dataclass
class ProjectorTrace:
    params: ModelParams
    fused: np.ndarray  # (N, views*d_low) concatenated view features
    mask1: np.ndarray
    a1: np.ndarray
    mask2: np.ndarray
    a2: np.ndarray


@dataclass
class ForwardTrace:
    """Cached activations for one batch, consumed by :func:`model_backward`."""

    encoder: EncoderTrace
    projector: ProjectorTrace


def encoder_forward_batch(params: ModelParams, views: np.ndarray):
    """Encode a (B, channels, time) stack of views to (B, d_low) features."""
    cfg = params.cfg
    x = np.asarray(views, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (cfg.channels, cfg.time):
        raise ValueError(
            f"expected views of shape (B, {cfg.channels}, {cfg.time}), got {x.shape}"
        )
    batch = x.shape[0]
    u_len = cfg.conv_out_len
    cols = sliding_window_view(x, cfg.conv_width, axis=2)  # (B, C, U, W)
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(
        batch, u_len, cfg.channels * cfg.conv_width
    )
    kernel = params.conv_w.reshape(cfg.conv_maps, -1)
    pre1 = cols @ kernel.T + params.conv_b
    mask1 = pre1 > 0.0
    act1 = np.where(mask1, pre1, 0.0)
    v_len = cfg.pooled_len
    pooled = act1[:, : v_len * cfg.pool, :].reshape(
        batch, v_len, cfg.pool, cfg.conv_maps
    ).mean(axis=2)
    flat = pooled.reshape(batch, cfg.flat_len)
    pre3 = flat @ params.enc_w1.T + params.enc_b1
    mask3 = pre3 > 0.0
    act3 = np.where(mask3, pre3, 0.0)
    features = act3 @ params.enc_w2.T + params.enc_b2
    trace = EncoderTrace(
        params=params, cols=cols, mask1=mask1, flat=flat, mask3=mask3, a3=act3
    )
    return features, trace


def encoder_forward(params: ModelParams, view: np.ndarray):
    """Encode a single channels x time view to a d_low vector."""
    features, trace = encoder_forward_batch(params, np.asarray(view)[None])
    return features[0], trace


def projector_forward_batch(params: ModelParams, fused: np.ndarray):
    """Project (N, views*d_low) concatenated features to (N, d_high) summaries."""
    cfg = params.cfg
    x = np.asarray(fused, dtype=np.float64)
    want = cfg.views * cfg.d_low
    if x.ndim != 2 or x.shape[1] != want:
        raise ValueError(f"expected fused features of shape (N, {want}), got {x.shape}")
    pre1 = x @ params.proj_w1.T + params.proj_b1
    mask1 = pre1 > 0.0
    act1 = np.where(mask1, pre1, 0.0)
    pre2 = act1 @ params.proj_w2.T + params.proj_b2
    mask2 = pre2 > 0.0
    act2 = np.where(mask2, pre2, 0.0)
    summary = act2 @ params.proj_w3.T + params.proj_b3
    trace = ProjectorTrace(
        params=params, fused=x, mask1=mask1, a1=act1, mask2=mask2, a2=act2
    )
    return summary, trace


def projector_forward(params: ModelParams, fused: np.ndarray):
    """Project a single concatenated feature vector to a d_high summary."""
    summary, trace = projector_forward_batch(params, np.asarray(fused)[None])
    return summary[0], trace


def forward_views(params: ModelParams, views: np.ndarray):
    """Full forward pass over a (N, T, channels, time) batch of view sets.

    Returns per-view features s (N, T, d_low), summaries z (N, d_high),
    and the trace needed for :func:`model_backward`. View features of
    one instance are concatenated in view order before projection.
    """
    cfg = params.cfg
    x = np.asarray(views, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != cfg.views:
        raise ValueError(
            f"expected views of shape (N, {cfg.views}, {cfg.channels}, {cfg.time}), "
            f"got {x.shape}"
        )
    n = x.shape[0]
    flat_views = x.reshape(n * cfg.views, cfg.channels, cfg.time)
    features, enc_trace = encoder_forward_batch(params, flat_views)
    s = features.reshape(n, cfg.views, cfg.d_low)
    fused = s.reshape(n, cfg.views * cfg.d_low)
    z, proj_trace = projector_forward_batch(params, fused)
    return s, z, ForwardTrace(encoder=enc_trace, projector=proj_trace)


def _projector_backward(params: ModelParams, trace: ProjectorTrace, grad_z: np.ndarray):
    d_w3 = grad_z.T @ trace.a2
    d_b3 = grad_z.sum(axis=0)
    d_a2 = (grad_z @ params.proj_w3) * trace.mask2
    d_w2 = d_a2.T @ trace.a1
    d_b2 = d_a2.sum(axis=0)
    d_a1 = (d_a2 @ params.proj_w2) * trace.mask1
    d_w1 = d_a1.T @ trace.fused
    d_b1 = d_a1.sum(axis=0)
    d_fused = d_a1 @ params.proj_w1
    grads = {
        "proj_w1": d_w1, "proj_b1": d_b1,
        "proj_w2": d_w2, "proj_b2": d_b2,
        "proj_w3": d_w3, "proj_b3": d_b3,
    }
    return grads, d_fused


def _encoder_backward(params: ModelParams, trace: EncoderTrace, grad_s: np.ndarray):
    cfg = params.cfg
    d_w2 = grad_s.T @ trace.a3
    d_b2 = grad_s.sum(axis=0)
    d_a3 = (grad_s @ params.enc_w2) * trace.mask3
    d_w1 = d_a3.T @ trace.flat
    d_b1 = d_a3.sum(axis=0)
    d_flat = d_a3 @ params.enc_w1
    batch = grad_s.shape[0]
    u_len = trace.mask1.shape[1]
    v_len = cfg.pooled_len
    d_pooled = d_flat.reshape(batch, v_len, cfg.conv_maps)
    d_act1 = np.zeros((batch, u_len, cfg.conv_maps))
    d_act1[:, : v_len * cfg.pool, :] = np.repeat(d_pooled / cfg.pool, cfg.pool, axis=1)
    d_pre1 = d_act1 * trace.mask1
    d_conv_w = (
        d_pre1.reshape(batch * u_len, cfg.conv_maps).T
        @ trace.cols.reshape(batch * u_len, -1)
    ).reshape(params.conv_w.shape)
    d_conv_b = d_pre1.sum(axis=(0, 1))
    return {
        "conv_w": d_conv_w, "conv_b": d_conv_b,
        "enc_w1": d_w1, "enc_b1": d_b1,
        "enc_w2": d_w2, "enc_b2": d_b2,
    }


def model_backward(
    params: ModelParams,
    trace: ForwardTrace,
    grad_s: np.ndarray,
    grad_z: np.ndarray,
) -> ModelParams:
    """Parameter gradients of sum(<grad_s, s>) + sum(<grad_z, z>).

    The summary-side gradient flows through the projector into the
    shared encoder; encoder gradients sum over all views of all
    instances (weight sharing).
    """
    if trace.encoder.params is not params or trace.projector.params is not params:
        raise ValueError("stale trace: it was produced by different parameters")
    cfg = params.cfg
    gs = np.asarray(grad_s, dtype=np.float64)
    gz = np.asarray(grad_z, dtype=np.float64)
    n = gs.shape[0]
    if gs.shape != (n, cfg.views, cfg.d_low):
        raise ValueError(f"grad_s shape {gs.shape} does not match the model config")
    if gz.shape != (n, cfg.d_high):
        raise ValueError(f"grad_z shape {gz.shape} does not match the model config")
    if trace.projector.fused.shape[0] != n or trace.encoder.flat.shape[0] != n * cfg.views:
        raise ValueError("stale trace: batch size mismatch")
    proj_grads, d_fused = _projector_backward(params, trace.projector, gz)
    total_grad_s = gs.reshape(n * cfg.views, cfg.d_low) + d_fused.reshape(
        n * cfg.views, cfg.d_low
    )
    enc_grads = _encoder_backward(params, trace.encoder, total_grad_s)
    return ModelParams(cfg=cfg, **enc_grads, **proj_grads)


def _config_blob(cfg: ModelConfig) -> bytes:
    return json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    extras: dict[str, np.ndarray] | None = None,
) -> None:
    """Serialize parameters (plus optional named extra tensors) to one file.

    Layout: magic, version byte, length-prefixed config JSON, parameter
    tensors as raw little-endian float64 in declaration order, then a
    sorted block of named extras. Byte-stable for identical inputs.
    """
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob.append(CHECKPOINT_VERSION)
    cfg_bytes = _config_blob(params.cfg)
    blob += struct.pack("<I", len(cfg_bytes))
    blob += cfg_bytes
    for name in PARAM_FIELDS:
        blob += np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes()
    extras = extras or {}
    blob += struct.pack("<I", len(extras))
    for name in sorted(extras):
        arr = np.ascontiguousarray(extras[name], dtype="<f8")
        encoded = name.encode()
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path):
    """Read a checkpoint; returns (params, extras dict)."""
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    off = len(CHECKPOINT_MAGIC)
    if raw[off] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {raw[off]}")
    off += 1
    (cfg_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    try:
        cfg = ModelConfig(**json.loads(raw[off : off + cfg_len].decode()))
        cfg.validate()
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad config block: {exc}") from None
    off += cfg_len
    fields = {}
    for name, shape in _tensor_shapes(cfg).items():
        count = int(np.prod(shape))
        end = off + count * 8
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        fields[name] = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape).copy()
        off = end
    params = ModelParams(cfg=cfg, **fields)
    (n_extras,) = struct.unpack_from("<I", raw, off)
    off += 4
    extras = {}
    for _ in range(n_extras):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = []
        for _ in range(ndim):
            (dim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape.append(dim)
        count = int(np.prod(shape)) if shape else 1
        end = off + count * 8
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated extra tensor {name}")
        extras[name] = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape).copy()
        off = end
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return params, extras
