"""Neural Billboard primitives: parameters, initialization and texture sampling.

Billboards are stored as a struct of arrays (:class:`BillboardSet`) so the
rasterizer and optimizer can work on contiguous buffers; indexing a set
yields a single :class:`NeuralBillboard` view for inspection.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quaternion as quat
from .errors import ChannelMismatch, OutOfDomain
from .mesh import TriMesh, triangle_bases

ALPHA_SIGMA = 0.5
ALPHA_CLIP = 1e-6
MIN_SCALE = 1e-6


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class NeuralBillboard:
    mu: np.ndarray
    s: np.ndarray
    q: np.ndarray
    nt: np.ndarray
    alpha_tex: np.ndarray
    anchor: int


@dataclass
class BillboardSet:
    """All billboards of an avatar.

    Attributes
    ----------
    mu : (N, 3)
        Offset in the anchor triangle's frame (rest-frame units).
    s : (N, 2)
        In-plane half extents.
    q : (N, 4)
        Local orientation, unit quaternion ``(w, x, y, z)``.
    nt : (N, S, S, C)
        Feature textures; row index follows ``v``, column index ``u``.
    alpha_logit : (N, S, S)
        Opacity textures before the sigmoid.
    anchor : (N,) int
        Anchor triangle per billboard.
    """

    mu: np.ndarray
    s: np.ndarray
    q: np.ndarray
    nt: np.ndarray
    alpha_logit: np.ndarray
    anchor: np.ndarray

    def __len__(self):
        return self.mu.shape[0]

    def __getitem__(self, i) -> NeuralBillboard:
        return NeuralBillboard(self.mu[i], self.s[i], self.q[i], self.nt[i],
                               sigmoid(self.alpha_logit[i]), int(self.anchor[i]))

    @property
    def tex_size(self) -> int:
        return self.nt.shape[1]

    @property
    def channels(self) -> int:
        return self.nt.shape[3]

    def alpha_tex(self) -> np.ndarray:
        return sigmoid(self.alpha_logit)

    def copy(self) -> "BillboardSet":
        return BillboardSet(*(np.array(a, copy=True) for a in
                              (self.mu, self.s, self.q, self.nt, self.alpha_logit, self.anchor)))

    def subset(self, idx) -> "BillboardSet":
        idx = np.asarray(idx)
        return BillboardSet(self.mu[idx], self.s[idx], self.q[idx], self.nt[idx],
                            self.alpha_logit[idx], self.anchor[idx])


def texture_grid(S: int) -> np.ndarray:
    """Texel-center coordinates in ``[-1, 1]``."""
    return np.linspace(-1.0, 1.0, S)


def gaussian_alpha(S: int, sigma: float = ALPHA_SIGMA) -> np.ndarray:
    g = texture_grid(S)
    v, u = np.meshgrid(g, g, indexing="ij")
    return np.exp(-(u * u + v * v) / (2 * sigma * sigma))


def _closest_barycentric(P, A, B, C):
    """Barycentric coordinates of the point of triangle ABC closest to each P (2D)."""
    v0, v1, v2 = B - A, C - A, P - A
    d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
    d20, d21 = v2 @ v0, v2 @ v1
    den = d00 * d11 - d01 * d01
    b1 = (d11 * d20 - d01 * d21) / den
    b2 = (d00 * d21 - d01 * d20) / den
    bary = np.stack([1 - b1 - b2, b1, b2], axis=1)
    outside = np.any(bary < 0, axis=1)
    if np.any(outside):
        Po = P[outside]
        best_d = np.full(Po.shape[0], np.inf)
        best = np.zeros((Po.shape[0], 3))
        corners = (A, B, C)
        for i in range(3):
            j = (i + 1) % 3
            a, b = corners[i], corners[j]
            e = b - a
            t = np.clip((Po - a) @ e / (e @ e), 0.0, 1.0)
            d = np.linalg.norm(a + t[:, None] * e - Po, axis=1)
            take = d < best_d
            best_d[take] = d[take]
            w = np.zeros((take.sum(), 3))
            w[:, i] = 1 - t[take]
            w[:, j] = t[take]
            best[take] = w
        bary[outside] = best
    return bary


def init_billboards(mesh: TriMesh, coords: np.ndarray, S_T: int = 16, C: int | None = None) -> BillboardSet:
    """One billboard per triangle, lying in the rest triangle's plane.

    The billboard orientation equals the rest triangle's canonical frame, its
    half extent is half the triangle's mean edge length, the alpha texture is
    a Gaussian (sigma 0.5 on the ``[-1, 1]`` grid) and the feature texture is
    the barycentric interpolation of ``coords`` over the billboard plane,
    clamped to the nearest point of the triangle.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if C is None:
        C = coords.shape[1]
    if C != coords.shape[1]:
        raise ChannelMismatch(f"texture channels {C} != spectral coordinate dimension {coords.shape[1]}")
    if S_T < 2:
        raise ValueError("texture size must be at least 2")
    rv, tris = mesh.rest_vertices, mesh.triangles
    F = tris.shape[0]
    bases = triangle_bases(rv, tris)
    p = rv[tris]
    edges = np.linalg.norm(p[:, [1, 2, 0]] - p, axis=2)
    e = 0.5 * edges.mean(axis=1)
    centroid = p.mean(axis=1)

    g = texture_grid(S_T)
    gv, gu = np.meshgrid(g, g, indexing="ij")
    uv = np.stack([gu.ravel(), gv.ravel()], axis=1)

    nt = np.empty((F, S_T, S_T, C))
    for f in range(F):
        local = (p[f] - centroid[f]) @ bases[f][:, :2]
        bary = _closest_barycentric(uv * e[f], local[0], local[1], local[2])
        nt[f] = (bary @ coords[tris[f]]).reshape(S_T, S_T, C)

    alpha = np.clip(gaussian_alpha(S_T), ALPHA_CLIP, 1 - ALPHA_CLIP)
    return BillboardSet(
        mu=np.zeros((F, 3)),
        s=np.stack([e, e], axis=1),
        q=quat.from_matrix(bases),
        nt=nt,
        alpha_logit=np.broadcast_to(logit(alpha), (F, S_T, S_T)).copy(),
        anchor=np.arange(F, dtype=np.int64),
    )


def bilinear_footprint(u, v, S: int):
    """Texel indices and weights of a bilinear lookup at ``(u, v)``.

    Returns ``(rows, cols, weights)`` each of shape ``(..., 4)`` in the order
    (r0,c0), (r0,c1), (r1,c0), (r1,c1).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    px = (u + 1.0) * 0.5 * (S - 1)
    py = (v + 1.0) * 0.5 * (S - 1)
    c0 = np.clip(np.floor(px).astype(np.int64), 0, S - 2)
    r0 = np.clip(np.floor(py).astype(np.int64), 0, S - 2)
    fx = px - c0
    fy = py - r0
    rows = np.stack([r0, r0, r0 + 1, r0 + 1], -1)
    cols = np.stack([c0, c0 + 1, c0, c0 + 1], -1)
    w = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], -1)
    return rows, cols, w


def sample_texture(tex, u: float, v: float):
    """Bilinearly sample an ``(S, S)`` or ``(S, S, C)`` texture.

    Returns ``(value, texels, weights)`` where ``texels`` is a ``(4, 2)``
    array of (row, col) indices and ``weights`` the matching bilinear weights.
    """
    if abs(u) > 1.0 or abs(v) > 1.0:
        raise OutOfDomain(f"(u, v) = ({u}, {v}) outside [-1, 1]^2")
    tex = np.asarray(tex, dtype=np.float64)
    rows, cols, w = bilinear_footprint(u, v, tex.shape[0])
    vals = tex[rows, cols]
    value = np.tensordot(w, vals, axes=(0, 0))
    return value, np.stack([rows, cols], axis=1), w
