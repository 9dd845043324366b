"""Training objectives: redundancy-reduction twin loss over batch-standardized
cross-correlation matrices, latent L2 consistency, a learnable-scale pose loss,
and their sum over the three domain branches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import ContractError, ShapeError, Tensor
from .model import BranchOutput, LearnableScales


class DegenerateQuaternionError(ValueError):
    """Predicted quaternion too close to zero to normalize."""


@dataclass(frozen=True)
class BTConfig:
    """Weights of the twin objective. lam scales off-diagonals inside the
    objective; alpha1/alpha2 weight the invariance and redundancy terms."""

    lam: float = 5.1e-3
    alpha1: float = 1e-7
    alpha2: float = 1e-3
    eps: float = 1e-5

    def validate(self) -> None:
        if min(self.lam, self.alpha1, self.alpha2, self.eps) <= 0.0:
            raise ContractError("BTConfig values must all be strictly positive")


def cross_correlation(z_a: Tensor, z_b: Tensor, eps: float) -> Tensor:
    """D x D cross-correlation of two [N, D] embeddings.

    Each embedding is standardized per dimension over the batch,
    (z - mean) / (std + eps) with the unbiased standard deviation,
    then C = z_a^T z_b / N.
    """
    if z_a.shape != z_b.shape:
        raise ShapeError(f"embedding shapes differ: {z_a.shape} vs {z_b.shape}")
    if z_a.ndim != 2:
        raise ShapeError(f"expected [N, D] embeddings, got {z_a.shape}")
    n = z_a.shape[0]
    if n < 2:
        raise ContractError(f"batch standard deviation needs N >= 2, got N={n}")

    def standardize(z: Tensor) -> Tensor:
        centered = z - z.mean(axis=0, keepdims=True)
        var = (centered * centered).sum(axis=0, keepdims=True) * (1.0 / (n - 1))
        return centered / (var.sqrt() + eps)

    return (standardize(z_a).T @ standardize(z_b)) * (1.0 / n)


def barlow_twins_terms(c: Tensor, cfg: BTConfig) -> tuple[Tensor, Tensor, Tensor]:
    """(invariance, redundancy, total) of a cross-correlation matrix.

    invariance = sum_i (1 - C_ii)^2, redundancy = sum_{i != j} C_ij^2,
    total = alpha1 * invariance + alpha2 * lam * redundancy.
    """
    d = c.shape[0]
    if c.ndim != 2 or c.shape[1] != d:
        raise ShapeError(f"cross-correlation matrix must be square, got {c.shape}")
    eye = np.eye(d)
    diff = c - Tensor(eye)
    sq = diff * diff
    invariance = (sq * eye).sum()
    redundancy = (sq * (1.0 - eye)).sum()
    total = invariance * cfg.alpha1 + redundancy * (cfg.alpha2 * cfg.lam)
    return invariance, redundancy, total


def barlow_twins_loss(z_a: Tensor, z_b: Tensor,
                      cfg: BTConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Twin objective of two embeddings; returns (invariance, redundancy, total)."""
    cfg.validate()
    return barlow_twins_terms(cross_correlation(z_a, z_b, cfg.eps), cfg)


def latent_l2_loss(z_a: Tensor, z_b: Tensor) -> Tensor:
    """Mean over the batch of squared Euclidean distance between paired rows."""
    if z_a.shape != z_b.shape:
        raise ShapeError(f"embedding shapes differ: {z_a.shape} vs {z_b.shape}")
    diff = z_a - z_b
    return (diff * diff).sum(axis=1).mean()


def pose_loss(pred: Tensor, gt_t: np.ndarray, gt_q: np.ndarray,
              scales: LearnableScales) -> Tensor:
    """Learnable-scale pose objective on raw [N, 7] predictions.

    L_x is the mean translation residual norm; L_q the mean L2 distance of the
    ground-truth quaternion to the unit-normalized prediction. Returns
    L_x*exp(-s_x) + s_x + L_q*exp(-s_q) + s_q with gradients into both scales.
    """
    single = pred.ndim == 1
    if single:
        pred = pred.reshape(1, 7)
    if pred.shape[1] != 7:
        raise ShapeError(f"pose prediction must be [N, 7], got {pred.shape}")
    gt_t = np.atleast_2d(np.asarray(gt_t, dtype=np.float64))
    gt_q = np.atleast_2d(np.asarray(gt_q, dtype=np.float64))

    t_pred = pred[:, :3]
    q_pred = pred[:, 3:]
    q_norms = np.linalg.norm(q_pred.data, axis=1)
    if (q_norms < 1e-12).any():
        raise DegenerateQuaternionError(
            f"prediction quaternion norm fell below 1e-12 (min {q_norms.min():.3e})")

    dt = t_pred - Tensor(gt_t)
    l_x = (dt * dt).sum(axis=1).sqrt().mean()
    q_unit = q_pred / (q_pred * q_pred).sum(axis=1, keepdims=True).sqrt()
    dq = Tensor(gt_q) - q_unit
    l_q = (dq * dq).sum(axis=1).sqrt().mean()

    s_x, s_q = scales.s_x, scales.s_q
    return l_x * (-s_x).exp() + s_x + l_q * (-s_q).exp() + s_q


#: fixed column order of the per-step loss log
DA_COMPONENTS = (
    "bt_t_fog", "bt_t_night", "bt_r_fog", "bt_r_night",
    "l2_t_fog", "l2_t_night", "l2_r_fog", "l2_r_night",
    "pose_real", "pose_fog", "pose_night",
)


def total_da_loss(branches: Mapping[str, BranchOutput], gt_t: np.ndarray,
                  gt_q: np.ndarray, cfg: BTConfig,
                  scales: LearnableScales) -> tuple[Tensor, dict[str, float]]:
    """Sum of twin, L2, and pose objectives over the real/fog/night branches.

    Returns the scalar loss (on the graph) and a component map with the 11
    named sub-losses for logging.
    """
    cfg.validate()
    for name in ("real", "fog", "night"):
        if name not in branches:
            raise ContractError(f"missing branch {name!r} in total_da_loss")
    real, fog, night = branches["real"], branches["fog"], branches["night"]

    parts: dict[str, Tensor] = {}
    parts["bt_t_fog"] = barlow_twins_loss(real.latent_t, fog.latent_t, cfg)[2]
    parts["bt_t_night"] = barlow_twins_loss(real.latent_t, night.latent_t, cfg)[2]
    parts["bt_r_fog"] = barlow_twins_loss(real.latent_r, fog.latent_r, cfg)[2]
    parts["bt_r_night"] = barlow_twins_loss(real.latent_r, night.latent_r, cfg)[2]
    parts["l2_t_fog"] = latent_l2_loss(real.latent_t, fog.latent_t)
    parts["l2_t_night"] = latent_l2_loss(real.latent_t, night.latent_t)
    parts["l2_r_fog"] = latent_l2_loss(real.latent_r, fog.latent_r)
    parts["l2_r_night"] = latent_l2_loss(real.latent_r, night.latent_r)
    parts["pose_real"] = pose_loss(real.pose, gt_t, gt_q, scales)
    parts["pose_fog"] = pose_loss(fog.pose, gt_t, gt_q, scales)
    parts["pose_night"] = pose_loss(night.pose, gt_t, gt_q, scales)

    total = parts["bt_t_fog"]
    for key in DA_COMPONENTS[1:]:
        total = total + parts[key]
    return total, {key: parts[key].item() for key in DA_COMPONENTS}
