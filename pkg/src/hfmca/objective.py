"""Correlation statistics, logdet loss, contrastive regularizer, gradients.

For a batch of N instances with T view features s (N, T, d_low) and
summaries z (N, d_high), the statistics are batch means

    r1  = (1/(N*T)) sum_{i,t} s_it s_it^T
    r2  = (1/N)     sum_i     z_i  z_i^T
    p12 = (1/N)     sum_i     s_bar_i z_i^T,   s_bar_i = (1/T) sum_t s_it

assembled into the joint block matrix r12 = [[r1, p12], [p12^T, r2]].
The dependence loss is

    logdet(r12) - logdet(r1) - logdet(r2)  =  sum_k log(1 - rho_k^2)

with rho_k the canonical correlations, so it is non-positive and zero
exactly when p12 = 0. The contrastive regularizer is the batch mean of
exp(s_bar_i . z_j / tau) over ordered pairs i != j, and the total loss
adds it with weight lambda.

Gradients with respect to s and z are analytic, using
d logdet(R)/dR = R^{-1}, and chain through the per-instance view average
and (when enabled) the per-coordinate unit-second-moment rescaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg

DEGENERATE_MOMENT = 1e-12


@dataclass
class FeatureBatch:
    """Per-view features s, summaries z, and cached view averages s_bar."""

    s: np.ndarray      # (N, T, d_low)
    z: np.ndarray      # (N, d_high)
    s_bar: np.ndarray  # (N, d_low)

    @classmethod
    def from_features(cls, s: np.ndarray, z: np.ndarray) -> "FeatureBatch":
        s = np.asarray(s, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        if s.ndim != 3:
            raise ValueError(f"s must be (N, T, d), got shape {s.shape}")
        if z.ndim != 2 or z.shape[0] != s.shape[0]:
            raise ValueError(f"z must be (N, d) with N={s.shape[0]}, got {z.shape}")
        return cls(s=s, z=z, s_bar=s.mean(axis=1))

    def validate(self) -> None:
        if not np.allclose(self.s_bar, self.s.mean(axis=1), rtol=0, atol=1e-12):
            raise ValueError("s_bar is not the view average of s")


@dataclass
class CorrelationStats:
    """Second moments of the two feature levels and their cross moment."""

    r1: np.ndarray
    r2: np.ndarray
    p12: np.ndarray
    r12: np.ndarray


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters.

    ``lam`` weighs the contrastive term (0 disables it exactly),
    ``tau`` is the similarity temperature, ``jitter`` the diagonal
    regularization applied to all three log-determinants, ``clamp`` the
    symmetric bound on contrastive exponents, and ``normalize`` rescales
    every feature coordinate to unit second moment before the statistics.
    """

    lam: float = 1.0
    tau: float = 0.5
    jitter: float = 1e-4
    normalize: bool = True
    clamp: float = 50.0

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")
        if self.clamp <= 0:
            raise ValueError("clamp must be positive")


def _feature_scales(s: np.ndarray, z: np.ndarray):
    """Per-coordinate inverse-RMS scales; degenerate coordinates get 1."""
    n, t, _ = s.shape
    moment_s = np.einsum("ntk,ntk->k", s, s) / (n * t)
    moment_z = np.einsum("nk,nk->k", z, z) / n
    scaled_s = moment_s >= DEGENERATE_MOMENT
    scaled_z = moment_z >= DEGENERATE_MOMENT
    alpha = np.where(scaled_s, 1.0 / np.sqrt(np.where(scaled_s, moment_s, 1.0)), 1.0)
    beta = np.where(scaled_z, 1.0 / np.sqrt(np.where(scaled_z, moment_z, 1.0)), 1.0)
    return alpha, beta, scaled_s, scaled_z


def normalize_features(batch: FeatureBatch) -> FeatureBatch:
    """Rescale each coordinate of s (pooled over N*T) and z (over N) to
    unit second moment; coordinates with second moment below 1e-12 are
    left unscaled. ``s_bar`` is recomputed."""
    alpha, beta, _, _ = _feature_scales(batch.s, batch.z)
    return FeatureBatch.from_features(batch.s * alpha, batch.z * beta)


def hfmca_stats(batch: FeatureBatch) -> CorrelationStats:
    """Correlation statistics of a feature batch (batch-mean expectations)."""
    n, t, d_low = batch.s.shape
    if n == 0:
        raise ValueError("empty batch")
    r1 = linalg.second_moment(batch.s.reshape(n * t, d_low))
    r2 = linalg.second_moment(batch.z)
    p12 = linalg.cross_moment(batch.s_bar, batch.z)
    return CorrelationStats(r1=r1, r2=r2, p12=p12, r12=linalg.assemble_block(r1, p12, r2))


def logdet_loss(stats: CorrelationStats, jitter: float = 0.0) -> float:
    """logdet(r12) - logdet(r1) - logdet(r2), same jitter on all three.

    Non-positive for any valid statistics, with equality iff p12 = 0.
    """
    return (
        linalg.logdet_pd(stats.r12, jitter)
        - linalg.logdet_pd(stats.r1, jitter)
        - linalg.logdet_pd(stats.r2, jitter)
    )


def contrastive_reg(batch: FeatureBatch, tau: float, clamp: float = 50.0) -> float:
    """Mean of exp(s_bar_i . z_j / tau) over the N(N-1) ordered pairs i != j.

    Exponent arguments are clamped to [-clamp, clamp] before
    exponentiation; the clamp preserves the similarity ordering while
    bounding the value.
    """
    n = batch.s.shape[0]
    if n < 2:
        raise ValueError("contrastive term needs a batch")
    if batch.s_bar.shape[1] != batch.z.shape[1]:
        raise ValueError("contrastive term needs d_low == d_high")
    dots = np.clip(batch.s_bar @ batch.z.T / tau, -clamp, clamp)
    weights = np.exp(dots)
    np.fill_diagonal(weights, 0.0)
    return float(weights.sum() / (n * (n - 1)))


def total_loss(batch: FeatureBatch, cfg: LossConfig):
    """Total objective and its (logdet, contrastive) components.

    With ``lam == 0`` the total is the logdet loss bit-exactly; the
    contrastive value is still reported when computable.
    """
    cfg.validate()
    work = normalize_features(batch) if cfg.normalize else batch
    stats = hfmca_stats(work)
    l_logdet = logdet_loss(stats, cfg.jitter)
    n = work.s.shape[0]
    if n >= 2:
        l_cont = contrastive_reg(work, cfg.tau, cfg.clamp)
    elif cfg.lam == 0.0:
        l_cont = float("nan")
    else:
        raise ValueError("contrastive term needs a batch")
    if cfg.lam == 0.0:
        total = l_logdet
    else:
        total = l_logdet + cfg.lam * l_cont
    return total, (l_logdet, l_cont)


def loss_gradients(batch: FeatureBatch, cfg: LossConfig):
    """Exact gradients of :func:`total_loss` w.r.t. every s[i, t] and z[i].

    Includes the chain through the view average s_bar and, when
    normalization is enabled, through the data-dependent per-coordinate
    scales.
    """
    cfg.validate()
    s_raw = np.asarray(batch.s, dtype=np.float64)
    z_raw = np.asarray(batch.z, dtype=np.float64)
    n, t, d_low = s_raw.shape
    d_high = z_raw.shape[1]
    if cfg.normalize:
        alpha, beta, scaled_s, scaled_z = _feature_scales(s_raw, z_raw)
        s = s_raw * alpha
        z = z_raw * beta
    else:
        s = s_raw
        z = z_raw
    s_bar = s.mean(axis=1)

    r1 = linalg.second_moment(s.reshape(n * t, d_low))
    r2 = linalg.second_moment(z)
    p12 = linalg.cross_moment(s_bar, z)
    r12 = linalg.assemble_block(r1, p12, r2)
    g1 = linalg.pd_inverse(r1, cfg.jitter)
    g2 = linalg.pd_inverse(r2, cfg.jitter)
    g12 = linalg.pd_inverse(r12, cfg.jitter)
    block_a = g12[:d_low, :d_low]
    block_b = g12[:d_low, d_low:]
    block_c = g12[d_low:, d_low:]

    # logdet part: d logdet(R)/dR = R^{-1}, chained through the moments.
    grad_s = (2.0 / (n * t)) * (s.reshape(n * t, d_low) @ (block_a - g1)).reshape(
        n, t, d_low
    )
    grad_s += (2.0 / (n * t)) * (z @ block_b.T)[:, None, :]
    grad_z = (2.0 / n) * (z @ (block_c - g2) + s_bar @ block_b)

    if cfg.lam != 0.0:
        if n < 2:
            raise ValueError("contrastive term needs a batch")
        if d_low != d_high:
            raise ValueError("contrastive term needs d_low == d_high")
        dots = s_bar @ z.T / cfg.tau
        inside = (dots > -cfg.clamp) & (dots < cfg.clamp)
        weights = np.exp(np.clip(dots, -cfg.clamp, cfg.clamp)) * inside
        np.fill_diagonal(weights, 0.0)
        weights /= n * (n - 1) * cfg.tau
        grad_s += cfg.lam * (weights @ z)[:, None, :] / t
        grad_z += cfg.lam * (weights.T @ s_bar)

    if cfg.normalize:
        # v' = v / rms(v) per coordinate: the gradient projects out the
        # component along v' and rescales; skipped coordinates pass through.
        dot_s = np.einsum("ntk,ntk->k", grad_s, s)
        coef_s = np.where(scaled_s, dot_s / (n * t), 0.0)
        grad_s = alpha * (grad_s - s * coef_s)
        dot_z = np.einsum("nk,nk->k", grad_z, z)
        coef_z = np.where(scaled_z, dot_z / n, 0.0)
        grad_z = beta * (grad_z - z * coef_z)
    return grad_s, grad_z


def offdiag_rms(m: np.ndarray) -> float:
    """Root-mean-square of the off-diagonal entries (0 for 1x1 matrices)."""
    d = m.shape[0]
    if d < 2:
        return 0.0
    mask = ~np.eye(d, dtype=bool)
    return float(np.sqrt(np.mean(m[mask] ** 2)))


def diagnostics(batch: FeatureBatch, cfg: LossConfig) -> dict:
    """Batch health report.

    Keys: the canonical-correlation spectrum and its maximum,
    off-diagonal RMS of r1 and r2 (orthogonality), the minimum
    per-coordinate variance of z across the batch (collapse measure),
    the logdet loss, the residual of the identity
    logdet_loss = sum_k log(1 - rho_k^2) at the configured jitter, and
    the counts of degenerate (unscaled) coordinates.
    """
    cfg.validate()
    if cfg.normalize:
        alpha, beta, scaled_s, scaled_z = _feature_scales(batch.s, batch.z)
        work = FeatureBatch.from_features(batch.s * alpha, batch.z * beta)
        degenerate_s = int(np.sum(~scaled_s))
        degenerate_z = int(np.sum(~scaled_z))
    else:
        work = batch
        degenerate_s = 0
        degenerate_z = 0
    stats = hfmca_stats(work)
    rhos = linalg.canonical_correlations(stats.r1, stats.r2, stats.p12, cfg.jitter)
    l_logdet = logdet_loss(stats, cfg.jitter)
    identity_sum = float(np.sum(np.log1p(-rhos ** 2)))
    z_var = work.z.var(axis=0)
    return {
        "rhos": rhos,
        "rho_max": float(rhos[0]) if rhos.size else 0.0,
        "offdiag_rms_r1": offdiag_rms(stats.r1),
        "offdiag_rms_r2": offdiag_rms(stats.r2),
        "z_var_min": float(z_var.min()),
        "loss_logdet": l_logdet,
        "cca_residual": abs(l_logdet - identity_sum),
        "degenerate_s_coords": degenerate_s,
        "degenerate_z_coords": degenerate_z,
    }
