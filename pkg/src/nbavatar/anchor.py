"""Posing billboards on a deforming mesh through per-triangle frames.

Each billboard follows its anchor triangle's frame ``{T, R, k}``::

    mu_w = k R mu + T
    s_w  = k s
    q_w  = quat(R) * q        (Hamilton product, rotation applied on the left)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quaternion as quat
from .billboards import BillboardSet
from .errors import AnchorOutOfRange
from .mesh import PolygonFrames


@dataclass
class PosedBillboards:
    """World-space billboards; textures are shared with the source set."""

    mu_w: np.ndarray
    s_w: np.ndarray
    q_w: np.ndarray
    nt: np.ndarray
    alpha_logit: np.ndarray

    def __len__(self):
        return self.mu_w.shape[0]

    def subset(self, idx) -> "PosedBillboards":
        idx = np.asarray(idx)
        return PosedBillboards(self.mu_w[idx], self.s_w[idx], self.q_w[idx], self.nt[idx], self.alpha_logit[idx])


@dataclass
class PoseCache:
    k: np.ndarray
    R: np.ndarray
    rq: np.ndarray
    q_raw: np.ndarray


def _frames_for(billboards: BillboardSet, frames: PolygonFrames):
    a = billboards.anchor
    if a.size and (a.min() < 0 or a.max() >= len(frames)):
        raise AnchorOutOfRange(f"anchor index outside [0, {len(frames)})")
    return frames.T[a], frames.R[a], frames.k[a]


def pose_billboards(billboards: BillboardSet, frames: PolygonFrames, return_cache: bool = False):
    T, R, k = _frames_for(billboards, frames)
    rq = quat.from_matrix(R)
    mu_w = k[:, None] * np.einsum("nij,nj->ni", R, billboards.mu) + T
    s_w = k[:, None] * billboards.s
    q_raw = quat.multiply(rq, billboards.q)
    q_w = q_raw / np.linalg.norm(q_raw, axis=1, keepdims=True)
    posed = PosedBillboards(mu_w, s_w, q_w, billboards.nt, billboards.alpha_logit)
    if return_cache:
        return posed, PoseCache(k, R, rq, q_raw)
    return posed


def backward_pose(d_mu_w, d_s_w, d_q_w, cache: PoseCache):
    """Gradients wrt local ``(mu, s, q)`` from gradients wrt the posed ones."""
    d_mu = cache.k[:, None] * np.einsum("nji,nj->ni", cache.R, d_mu_w)
    d_s = cache.k[:, None] * d_s_w
    norm = np.linalg.norm(cache.q_raw, axis=1, keepdims=True)
    qh = cache.q_raw / norm
    d_raw = (d_q_w - qh * np.sum(qh * d_q_w, axis=1, keepdims=True)) / norm
    d_q = np.einsum("nji,nj->ni", quat.left_matrix(cache.rq), d_raw)
    return d_mu, d_s, d_q


def unpose(posed: PosedBillboards, billboards: BillboardSet, frames: PolygonFrames):
    """Recover local ``(mu, s, q)`` from world-space parameters."""
    T, R, k = _frames_for(billboards, frames)
    mu = np.einsum("nji,nj->ni", R, posed.mu_w - T) / k[:, None]
    s = posed.s_w / k[:, None]
    q = quat.multiply(quat.conjugate(quat.from_matrix(R)), posed.q_w)
    return mu, s, q
