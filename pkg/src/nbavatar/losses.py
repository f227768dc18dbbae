"""Training objectives and their analytic gradients.

Every loss returns ``(value, gradient(s))``. Regularizers act on the posed
billboards (KNN term) or on local offsets (position term).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .anchor import PosedBillboards
from .errors import ShapeError, TooFewBillboards, UnsupportedLoss

DICE_EPS = 1e-6
LAMBDA_NB = 0.1
LAMBDA_KNN = 0.1
LAMBDA_DELTA = 0.001


def _check_shapes(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")


def mse_loss(pred, target):
    _check_shapes(pred, target)
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def dice_loss(pred, mask, eps=DICE_EPS):
    """Soft Dice ``1 - (2 sum(p g) + eps) / (sum p + sum g + eps)``."""
    _check_shapes(pred, mask)
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(mask, dtype=np.float64)
    num = 2.0 * np.sum(p * g) + eps
    den = np.sum(p) + np.sum(g) + eps
    loss = 1.0 - num / den
    grad = -(2.0 * g * den - num) / (den * den)
    return float(loss), grad


def dice_coefficient(pred, mask, eps=DICE_EPS) -> float:
    return 1.0 - dice_loss(pred, mask, eps)[0]


def knn_indices(points, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest other points, nearest first."""
    tree = cKDTree(points)
    _, idx = tree.query(points, k=k + 1)
    out = np.empty((points.shape[0], k), dtype=np.int64)
    for i, row in enumerate(idx):
        row = row[row != i]
        out[i] = row[:k]
    return out


def _std_and_grad(x):
    """Population std over axis 1 of ``(N, M, D)`` and its gradient; zero-variance rows get zero gradient."""
    mean = x.mean(axis=1, keepdims=True)
    dev = x - mean
    var = np.mean(dev * dev, axis=1)
    std = np.sqrt(var)
    safe = np.where(std > 0, std, 1.0)
    grad = np.where(std[:, None] > 0, dev / (x.shape[1] * safe[:, None]), 0.0)
    return std, grad


@dataclass
class KnnGrads:
    mu_w: np.ndarray
    s_w: np.ndarray
    q_w: np.ndarray


def knn_reg(posed: PosedBillboards, k: int = 3, neighbors: np.ndarray | None = None):
    """Neighborhood smoothness of posed billboards.

    For every billboard the group is itself plus its ``k`` nearest neighbors
    by center distance. The per-billboard term is the sum over components of
    the standard deviation of ``q_w`` (neighbors sign-aligned to the center
    quaternion) and of ``s_w`` within the group, plus the mean center
    distance to the neighbors. The loss is the mean over billboards.
    Neighbor assignment is treated as constant.
    """
    mu, s, q = posed.mu_w, posed.s_w, posed.q_w
    N = mu.shape[0]
    if N < k + 1:
        raise TooFewBillboards(f"need at least {k + 1} billboards, got {N}")
    nb = knn_indices(mu, k) if neighbors is None else neighbors
    group = np.concatenate([np.arange(N)[:, None], nb], axis=1)

    sign = np.where(np.sum(q[group] * q[:, None, :], axis=2) < 0, -1.0, 1.0)
    qg = q[group] * sign[..., None]
    std_q, gq = _std_and_grad(qg)
    std_s, gs = _std_and_grad(s[group])

    diff = mu[:, None, :] - mu[nb]
    dist = np.linalg.norm(diff, axis=2)
    unit = np.where(dist[..., None] > 0, diff / np.where(dist > 0, dist, 1.0)[..., None], 0.0)

    per = std_q.sum(axis=1) + std_s.sum(axis=1) + dist.mean(axis=1)
    loss = float(per.mean())

    g_q = np.zeros_like(q)
    g_s = np.zeros_like(s)
    g_mu = np.zeros_like(mu)
    np.add.at(g_q, group.ravel(), (gq * sign[..., None]).reshape(-1, 4) / N)
    np.add.at(g_s, group.ravel(), gs.reshape(-1, 2) / N)
    gd = unit / (k * N)
    g_mu += gd.sum(axis=1)
    np.add.at(g_mu, nb.ravel(), -gd.reshape(-1, 3))
    return loss, KnnGrads(g_mu, g_s, g_q)


def delta_reg(mu):
    """Mean squared norm of local offsets."""
    mu = np.asarray(mu, dtype=np.float64)
    n = max(mu.shape[0], 1)
    return float(np.sum(mu * mu) / n), 2.0 * mu / n


@dataclass
class Weights:
    nb: float = LAMBDA_NB
    knn: float = LAMBDA_KNN
    delta: float = LAMBDA_DELTA
    lpips: float = 0.0


@dataclass
class LossTerms:
    total: float
    mse: float
    dice: float
    knn: float
    delta: float


@dataclass
class TotalGrads:
    rgb: np.ndarray
    alpha_nb: np.ndarray
    mu: np.ndarray
    mu_w: np.ndarray
    s_w: np.ndarray
    q_w: np.ndarray


def total_loss(rgb, gt_rgb, alpha_nb, gt_mask, mu, posed: PosedBillboards, lam: Weights = Weights(),
               knn_k: int = 3):
    """Weighted sum of reconstruction, silhouette and regularization terms.

    ``mu`` are the local billboard offsets. The perceptual term is not
    available; a nonzero ``lam.lpips`` is rejected.
    """
    if lam.lpips != 0:
        raise UnsupportedLoss("perceptual loss is not implemented; lambda_lpips must be 0")
    l_mse, g_rgb = mse_loss(rgb, gt_rgb)
    l_dice, g_a = (dice_loss(alpha_nb, gt_mask) if lam.nb else (0.0, np.zeros(np.shape(alpha_nb))))
    if lam.knn:
        l_knn, gk = knn_reg(posed, knn_k)
    else:
        l_knn, gk = 0.0, KnnGrads(np.zeros_like(posed.mu_w), np.zeros_like(posed.s_w), np.zeros_like(posed.q_w))
    l_delta, g_mu = delta_reg(mu) if lam.delta else (0.0, np.zeros_like(mu))
    total = l_mse + lam.nb * l_dice + lam.knn * l_knn + lam.delta * l_delta
    terms = LossTerms(total, l_mse, l_dice, l_knn, l_delta)
    grads = TotalGrads(g_rgb, lam.nb * g_a, lam.delta * g_mu, lam.knn * gk.mu_w, lam.knn * gk.s_w, lam.knn * gk.q_w)
    return terms, grads
