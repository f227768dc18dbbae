"""Tiled, differentiable rasterizer for textured planar billboards.

Every pixel shoots one ray through its center, intersects the billboards
binned to its 16x16 tile, sorts the hits exactly by ray depth (ties broken
by billboard index) and composites front to back::

    c = sum_i f_i a_i prod_{j<i} (1 - a_j),    A = 1 - prod_i (1 - a_i)

where ``f_i`` and ``a_i`` are bilinear texture samples at the hit's
billboard coordinates. The hot loops are numba kernels; :func:`render_reference`
is an all-pairs numpy implementation used as an oracle.

Cameras follow the pinhole convention with x right, y down and z forward.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from . import quaternion as quat
from .anchor import PosedBillboards
from .billboards import bilinear_footprint, sigmoid
from .errors import MissingForwardCache, ShapeError, UnsortedInput

NEAR = 1e-4
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
TILE = 16
PARALLEL_EPS = 1e-9


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with world-to-camera extrinsics ``x_cam = R x + t``."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = np.asarray(self.R, dtype=np.float64)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64))

    @classmethod
    def look_at(cls, eye, target, up, fov_deg: float, width: int, height: int) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        f = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
        return cls(f, f, width / 2.0, height / 2.0, R, -R @ eye, width, height)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def ray_directions(self) -> np.ndarray:
        """Unit world-space directions through every pixel center, ``(H, W, 3)``."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        d = np.empty((self.height, self.width, 3))
        d[..., 0] = xs[None, :]
        d[..., 1] = ys[:, None]
        d[..., 2] = 1.0
        d = d @ self.R
        return d / np.linalg.norm(d, axis=2, keepdims=True)

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        pc = np.asarray(points, dtype=np.float64) @ self.R.T + self.t
        z = pc[:, 2]
        xy = np.stack([self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy], 1)
        return xy, z

    def transformed(self, Q, shift) -> "Camera":
        """The same view of a scene that was moved by ``x -> Q x + shift``."""
        R = self.R @ np.asarray(Q).T
        return Camera(self.fx, self.fy, self.cx, self.cy, R, self.t - R @ np.asarray(shift),
                      self.width, self.height)


@dataclass
class Intersection:
    index: int
    t: float
    u: float
    v: float
    texels: np.ndarray = None
    weights: np.ndarray = None
    alpha: float = 0.0
    feature: np.ndarray = None


def billboard_axes(q_w) -> tuple[np.ndarray, np.ndarray]:
    """Normalized quaternions and their rotation matrices (columns: e_u, e_v, n)."""
    qn = quat.normalize(q_w)
    return qn, quat.to_matrix(qn)


@njit(cache=True)
def _intersect(o, d, mu, R, su, sv):
    eu0, eu1, eu2 = R[0, 0], R[1, 0], R[2, 0]
    ev0, ev1, ev2 = R[0, 1], R[1, 1], R[2, 1]
    n0, n1, n2 = R[0, 2], R[1, 2], R[2, 2]
    dn = d[0] * n0 + d[1] * n1 + d[2] * n2
    if abs(dn) < PARALLEL_EPS:
        return False, 0.0, 0.0, 0.0
    m0, m1, m2 = mu[0] - o[0], mu[1] - o[1], mu[2] - o[2]
    t = (m0 * n0 + m1 * n1 + m2 * n2) / dn
    if t <= NEAR:
        return False, t, 0.0, 0.0
    p0, p1, p2 = t * d[0] - m0, t * d[1] - m1, t * d[2] - m2
    u = (p0 * eu0 + p1 * eu1 + p2 * eu2) / su
    v = (p0 * ev0 + p1 * ev1 + p2 * ev2) / sv
    if abs(u) > 1.0 or abs(v) > 1.0:
        return False, t, u, v
    return True, t, u, v


@njit(cache=True)
def _footprint(u, v, S):
    px = (u + 1.0) * 0.5 * (S - 1)
    py = (v + 1.0) * 0.5 * (S - 1)
    c0 = min(max(int(np.floor(px)), 0), S - 2)
    r0 = min(max(int(np.floor(py)), 0), S - 2)
    return r0, c0, px - c0, py - r0


@njit(cache=True)
def _bin_tiles(mu, R, s, cam_R, cam_t, fx, fy, cx, cy, W, H):
    N = mu.shape[0]
    ntx = (W + TILE - 1) // TILE
    nty = (H + TILE - 1) // TILE
    ranges = np.full((N, 4), -1, dtype=np.int64)
    # conservative pixel-space box per billboard, used to skip ray tests
    box = np.empty((N, 4))
    counts = np.zeros(ntx * nty, dtype=np.int64)
    corner = np.empty(3)
    for b in range(N):
        xmin, xmax, ymin, ymax = np.inf, -np.inf, np.inf, -np.inf
        n_behind = 0
        n_close = 0
        for cu in (-1.0, 1.0):
            for cv in (-1.0, 1.0):
                for k in range(3):
                    corner[k] = mu[b, k] + cu * s[b, 0] * R[b, k, 0] + cv * s[b, 1] * R[b, k, 1]
                xc = cam_R[0, 0] * corner[0] + cam_R[0, 1] * corner[1] + cam_R[0, 2] * corner[2] + cam_t[0]
                yc = cam_R[1, 0] * corner[0] + cam_R[1, 1] * corner[1] + cam_R[1, 2] * corner[2] + cam_t[1]
                zc = cam_R[2, 0] * corner[0] + cam_R[2, 1] * corner[1] + cam_R[2, 2] * corner[2] + cam_t[2]
                if zc <= 0.0:
                    n_behind += 1
                if zc <= NEAR:
                    n_close += 1
                    continue
                px = fx * xc / zc + cx
                py = fy * yc / zc + cy
                xmin = min(xmin, px)
                xmax = max(xmax, px)
                ymin = min(ymin, py)
                ymax = max(ymax, py)
        if n_behind == 4:
            continue
        if n_close > 0:
            tx0, tx1, ty0, ty1 = 0, ntx - 1, 0, nty - 1
            box[b, 0], box[b, 1], box[b, 2], box[b, 3] = -np.inf, np.inf, -np.inf, np.inf
        else:
            # pixel centers sit at +0.5; one pixel of slack on each side
            x0 = max(xmin - 1.5, -1.0)
            x1 = min(xmax + 0.5, W + 1.0)
            y0 = max(ymin - 1.5, -1.0)
            y1 = min(ymax + 0.5, H + 1.0)
            if x1 < 0.0 or y1 < 0.0 or x0 > W - 1 or y0 > H - 1:
                continue
            box[b, 0], box[b, 1], box[b, 2], box[b, 3] = x0, x1, y0, y1
            tx0 = max(int(np.floor(x0)), 0) // TILE
            tx1 = min(int(np.ceil(x1)), W - 1) // TILE
            ty0 = max(int(np.floor(y0)), 0) // TILE
            ty1 = min(int(np.ceil(y1)), H - 1) // TILE
        ranges[b, 0], ranges[b, 1], ranges[b, 2], ranges[b, 3] = tx0, tx1, ty0, ty1
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * ntx + tx] += 1
    ptr = np.zeros(ntx * nty + 1, dtype=np.int64)
    for i in range(ntx * nty):
        ptr[i + 1] = ptr[i] + counts[i]
    ids = np.empty(ptr[-1], dtype=np.int64)
    fill = ptr[:-1].copy()
    for b in range(N):
        if ranges[b, 0] < 0:
            continue
        for ty in range(ranges[b, 2], ranges[b, 3] + 1):
            for tx in range(ranges[b, 0], ranges[b, 1] + 1):
                tile = ty * ntx + tx
                ids[fill[tile]] = b
                fill[tile] += 1
    return ptr, ids, box


@njit(cache=True)
def _tile_pixels(W, H):
    """Pixel coordinates enumerated tile by tile, row-major inside a tile."""
    ntx = (W + TILE - 1) // TILE
    nty = (H + TILE - 1) // TILE
    px = np.empty(W * H, dtype=np.int64)
    py = np.empty(W * H, dtype=np.int64)
    ptr = np.zeros(ntx * nty + 1, dtype=np.int64)
    k = 0
    for ty in range(nty):
        for tx in range(ntx):
            for y in range(ty * TILE, min((ty + 1) * TILE, H)):
                for x in range(tx * TILE, min((tx + 1) * TILE, W)):
                    px[k] = x
                    py[k] = y
                    k += 1
            ptr[ty * ntx + tx + 1] = k
    return px, py, ptr


@njit(parallel=True, cache=True)
def _count_hits(origin, dirs, mu, R, s, box, tile_ptr, tile_ids, pix_x, pix_y, pix_ptr):
    n_tiles = tile_ptr.shape[0] - 1
    counts = np.zeros(pix_x.shape[0], dtype=np.int64)
    for tile in prange(n_tiles):
        for p in range(pix_ptr[tile], pix_ptr[tile + 1]):
            x = pix_x[p]
            y = pix_y[p]
            d = dirs[y, x]
            c = 0
            for k in range(tile_ptr[tile], tile_ptr[tile + 1]):
                b = tile_ids[k]
                if x < box[b, 0] or x > box[b, 1] or y < box[b, 2] or y > box[b, 3]:
                    continue
                hit, t, u, v = _intersect(origin, d, mu[b], R[b], s[b, 0], s[b, 1])
                if hit:
                    c += 1
            counts[p] = c
    return counts


@njit(parallel=True, cache=True)
def _forward(origin, dirs, mu, R, s, box, alpha_tex, nt, tile_ptr, tile_ids, pix_x, pix_y, pix_ptr,
             hit_ptr, early_stop, H, W):
    n_tiles = tile_ptr.shape[0] - 1
    M = hit_ptr[-1]
    C = nt.shape[3]
    S = nt.shape[1]
    hit_idx = np.empty(M, dtype=np.int64)
    hit_t = np.empty(M)
    hit_u = np.empty(M)
    hit_v = np.empty(M)
    hit_a = np.zeros(M)
    hit_T = np.zeros(M)
    n_used = np.zeros(pix_x.shape[0], dtype=np.int64)
    feat = np.zeros((H, W, C))
    alpha = np.zeros((H, W))
    for tile in prange(n_tiles):
        for p in range(pix_ptr[tile], pix_ptr[tile + 1]):
            x = pix_x[p]
            y = pix_y[p]
            d = dirs[y, x]
            base = hit_ptr[p]
            n = 0
            for k in range(tile_ptr[tile], tile_ptr[tile + 1]):
                b = tile_ids[k]
                if x < box[b, 0] or x > box[b, 1] or y < box[b, 2] or y > box[b, 3]:
                    continue
                hit, t, u, v = _intersect(origin, d, mu[b], R[b], s[b, 0], s[b, 1])
                if hit:
                    # insertion sort by (t, index); candidates arrive in index order
                    j = base + n
                    while j > base and (hit_t[j - 1] > t or (hit_t[j - 1] == t and hit_idx[j - 1] > b)):
                        hit_t[j] = hit_t[j - 1]
                        hit_idx[j] = hit_idx[j - 1]
                        hit_u[j] = hit_u[j - 1]
                        hit_v[j] = hit_v[j - 1]
                        j -= 1
                    hit_t[j] = t
                    hit_idx[j] = b
                    hit_u[j] = u
                    hit_v[j] = v
                    n += 1
            T = 1.0
            used = n
            for i in range(n):
                h = base + i
                b = hit_idx[h]
                r0, c0, fx_, fy_ = _footprint(hit_u[h], hit_v[h], S)
                w00 = (1 - fy_) * (1 - fx_)
                w01 = (1 - fy_) * fx_
                w10 = fy_ * (1 - fx_)
                w11 = fy_ * fx_
                a = (w00 * alpha_tex[b, r0, c0] + w01 * alpha_tex[b, r0, c0 + 1]
                     + w10 * alpha_tex[b, r0 + 1, c0] + w11 * alpha_tex[b, r0 + 1, c0 + 1])
                hit_T[h] = T
                hit_a[h] = a
                if a < ALPHA_MIN:
                    continue
                wgt = a * T
                for c in range(C):
                    f = (w00 * nt[b, r0, c0, c] + w01 * nt[b, r0, c0 + 1, c]
                         + w10 * nt[b, r0 + 1, c0, c] + w11 * nt[b, r0 + 1, c0 + 1, c])
                    feat[y, x, c] += f * wgt
                T = T * (1.0 - a)
                if early_stop and T < T_MIN:
                    used = i + 1
                    break
            n_used[p] = used
            alpha[y, x] = 1.0 - T
    return feat, alpha, hit_idx, hit_t, hit_u, hit_v, hit_a, hit_T, n_used


@njit(parallel=True, cache=True)
def _backward_hits(origin, dirs, mu, R, s, alpha_tex, nt, g_feat, g_alpha, pix_x, pix_y, pix_ptr,
                   hit_ptr, hit_idx, hit_t, hit_u, hit_v, hit_a, hit_T, n_used):
    """Per-hit gradients: texture samples, then geometry through (u, v)."""
    n_tiles = pix_ptr.shape[0] - 1
    M = hit_ptr[-1]
    C = nt.shape[3]
    S = nt.shape[1]
    h_gf = np.zeros((M, C))
    h_ga = np.zeros(M)
    h_geo = np.zeros((M, 14))
    for tile in prange(n_tiles):
        Sf = np.empty(C)
        fv = np.empty(C)
        dfu = np.empty(C)
        dfv = np.empty(C)
        for p in range(pix_ptr[tile], pix_ptr[tile + 1]):
            x = pix_x[p]
            y = pix_y[p]
            gA = g_alpha[y, x]
            Sa = 0.0
            for c in range(C):
                Sf[c] = 0.0
            for i in range(n_used[p] - 1, -1, -1):
                h = hit_ptr[p] + i
                a = hit_a[h]
                if a < ALPHA_MIN:
                    continue
                b = hit_idx[h]
                T = hit_T[h]
                u = hit_u[h]
                v = hit_v[h]
                r0, c0, fx_, fy_ = _footprint(u, v, S)
                w00 = (1 - fy_) * (1 - fx_)
                w01 = (1 - fy_) * fx_
                w10 = fy_ * (1 - fx_)
                w11 = fy_ * fx_
                dot = 0.0
                for c in range(C):
                    t00 = nt[b, r0, c0, c]
                    t01 = nt[b, r0, c0 + 1, c]
                    t10 = nt[b, r0 + 1, c0, c]
                    t11 = nt[b, r0 + 1, c0 + 1, c]
                    fv[c] = w00 * t00 + w01 * t01 + w10 * t10 + w11 * t11
                    dfu[c] = (1 - fy_) * (t01 - t00) + fy_ * (t11 - t10)
                    dfv[c] = (1 - fx_) * (t10 - t00) + fx_ * (t11 - t01)
                    gf = g_feat[y, x, c]
                    h_gf[h, c] = gf * a * T
                    dot += gf * (fv[c] - Sf[c])
                ga = T * (dot + gA * (1.0 - Sa))
                h_ga[h] = ga
                for c in range(C):
                    Sf[c] = fv[c] * a + (1.0 - a) * Sf[c]
                Sa = a + (1.0 - a) * Sa
                a00 = alpha_tex[b, r0, c0]
                a01 = alpha_tex[b, r0, c0 + 1]
                a10 = alpha_tex[b, r0 + 1, c0]
                a11 = alpha_tex[b, r0 + 1, c0 + 1]
                dpx = (1 - fy_) * (a01 - a00) + fy_ * (a11 - a10)
                dpy = (1 - fx_) * (a10 - a00) + fx_ * (a11 - a01)
                gpx = ga * dpx
                gpy = ga * dpy
                for c in range(C):
                    gpx += h_gf[h, c] * dfu[c]
                    gpy += h_gf[h, c] * dfv[c]
                scale = 0.5 * (S - 1)
                gu = gpx * scale
                gv = gpy * scale
                # (u, v) as functions of mu, s, and the frame columns (e_u, e_v, n)
                d = dirs[y, x]
                su = s[b, 0]
                sv = s[b, 1]
                dn = d[0] * R[b, 0, 2] + d[1] * R[b, 1, 2] + d[2] * R[b, 2, 2]
                eud = d[0] * R[b, 0, 0] + d[1] * R[b, 1, 0] + d[2] * R[b, 2, 0]
                evd = d[0] * R[b, 0, 1] + d[1] * R[b, 1, 1] + d[2] * R[b, 2, 1]
                t = hit_t[h]
                cu = gu / su
                cv = gv / sv
                k_n = (cu * eud + cv * evd) / dn
                for k in range(3):
                    pk = origin[k] + t * d[k] - mu[b, k]
                    h_geo[h, k] = k_n * R[b, k, 2] - cu * R[b, k, 0] - cv * R[b, k, 1]
                    h_geo[h, 5 + k] = cu * pk
                    h_geo[h, 8 + k] = cv * pk
                    h_geo[h, 11 + k] = -k_n * pk
                h_geo[h, 3] = -gu * u / su
                h_geo[h, 4] = -gv * v / sv
    return h_gf, h_ga, h_geo


@njit(cache=True)
def _scatter(N, S, C, hit_ptr, hit_idx, hit_u, hit_v, hit_a, n_used, h_gf, h_ga, h_geo):
    """Fixed-order reduction of per-hit gradients into per-billboard buffers."""
    g_nt = np.zeros((N, S, S, C))
    g_at = np.zeros((N, S, S))
    g_geo = np.zeros((N, 14))
    P = n_used.shape[0]
    for p in range(P):
        for i in range(n_used[p]):
            h = hit_ptr[p] + i
            if hit_a[h] < ALPHA_MIN:
                continue
            b = hit_idx[h]
            r0, c0, fx_, fy_ = _footprint(hit_u[h], hit_v[h], S)
            w00 = (1 - fy_) * (1 - fx_)
            w01 = (1 - fy_) * fx_
            w10 = fy_ * (1 - fx_)
            w11 = fy_ * fx_
            ga = h_ga[h]
            g_at[b, r0, c0] += w00 * ga
            g_at[b, r0, c0 + 1] += w01 * ga
            g_at[b, r0 + 1, c0] += w10 * ga
            g_at[b, r0 + 1, c0 + 1] += w11 * ga
            for c in range(C):
                gf = h_gf[h, c]
                g_nt[b, r0, c0, c] += w00 * gf
                g_nt[b, r0, c0 + 1, c] += w01 * gf
                g_nt[b, r0 + 1, c0, c] += w10 * gf
                g_nt[b, r0 + 1, c0 + 1, c] += w11 * gf
            for k in range(14):
                g_geo[b, k] += h_geo[h, k]
    return g_nt, g_at, g_geo


@dataclass
class RasterCache:
    """Forward-pass state needed by :func:`render_backward`."""

    posed: PosedBillboards
    cam: Camera
    origin: np.ndarray
    dirs: np.ndarray
    qn: np.ndarray
    R: np.ndarray
    alpha_tex: np.ndarray
    pix_x: np.ndarray
    pix_y: np.ndarray
    pix_ptr: np.ndarray
    hit_ptr: np.ndarray
    hits: tuple
    n_used: np.ndarray


@dataclass
class RenderGrads:
    nt: np.ndarray
    alpha_logit: np.ndarray
    mu_w: np.ndarray
    s_w: np.ndarray
    q_w: np.ndarray


def render(posed: PosedBillboards, cam: Camera, early_termination: bool = True, return_cache: bool = False):
    """Rasterize billboards into a feature image ``(H, W, C)`` and alpha ``(H, W)``."""
    H, W = cam.height, cam.width
    C = posed.nt.shape[3] if posed.nt.ndim == 4 else 0
    origin = cam.center
    dirs = cam.ray_directions()
    qn, R = billboard_axes(posed.q_w) if len(posed) else (np.zeros((0, 4)), np.zeros((0, 3, 3)))
    mu = np.ascontiguousarray(posed.mu_w, dtype=np.float64)
    s = np.ascontiguousarray(posed.s_w, dtype=np.float64)
    R = np.ascontiguousarray(R)
    alpha_tex = np.ascontiguousarray(sigmoid(posed.alpha_logit))
    nt = np.ascontiguousarray(posed.nt, dtype=np.float64)
    tile_ptr, tile_ids, box = _bin_tiles(mu, R, s, cam.R, cam.t, cam.fx, cam.fy, cam.cx, cam.cy, W, H)
    pix_x, pix_y, pix_ptr = _tile_pixels(W, H)
    counts = _count_hits(origin, dirs, mu, R, s, box, tile_ptr, tile_ids, pix_x, pix_y, pix_ptr)
    hit_ptr = np.zeros(counts.size + 1, dtype=np.int64)
    np.cumsum(counts, out=hit_ptr[1:])
    feat, alpha, *hits, n_used = _forward(origin, dirs, mu, R, s, box, alpha_tex, nt, tile_ptr, tile_ids,
                                          pix_x, pix_y, pix_ptr, hit_ptr, early_termination, H, W)
    if not return_cache:
        return feat, alpha
    cache = RasterCache(posed, cam, origin, dirs, qn, R, alpha_tex, pix_x, pix_y, pix_ptr,
                        hit_ptr, tuple(hits), n_used)
    return feat, alpha, cache


def render_backward(g_feat, g_alpha, cache: RasterCache | None) -> RenderGrads:
    """Reverse of :func:`render`; gradients for textures and world-space geometry.

    Visibility changes (hits entering or leaving a billboard, crossing the
    opacity cutoff, reordering) contribute no gradient.
    """
    if cache is None:
        raise MissingForwardCache("render_backward needs the cache from render(..., return_cache=True)")
    posed = cache.posed
    H, W = cache.cam.height, cache.cam.width
    N = len(posed)
    S, C = posed.nt.shape[1], posed.nt.shape[3]
    g_feat = np.ascontiguousarray(g_feat, dtype=np.float64)
    g_alpha = np.ascontiguousarray(g_alpha, dtype=np.float64)
    if g_feat.shape != (H, W, C) or g_alpha.shape != (H, W):
        raise ShapeError("gradient buffers do not match the rendered image")
    hit_idx, hit_t, hit_u, hit_v, hit_a, hit_T = cache.hits
    mu = np.ascontiguousarray(posed.mu_w, dtype=np.float64)
    s = np.ascontiguousarray(posed.s_w, dtype=np.float64)
    nt = np.ascontiguousarray(posed.nt, dtype=np.float64)
    h_gf, h_ga, h_geo = _backward_hits(cache.origin, cache.dirs, mu, cache.R, s, cache.alpha_tex, nt,
                                       g_feat, g_alpha, cache.pix_x, cache.pix_y, cache.pix_ptr,
                                       cache.hit_ptr, hit_idx, hit_t, hit_u, hit_v, hit_a, hit_T,
                                       cache.n_used)
    g_nt, g_at, g_geo = _scatter(N, S, C, cache.hit_ptr, hit_idx, hit_u, hit_v, hit_a, cache.n_used,
                                 h_gf, h_ga, h_geo)
    g_logit = g_at * cache.alpha_tex * (1.0 - cache.alpha_tex)
    G = np.stack([g_geo[:, 5:8], g_geo[:, 8:11], g_geo[:, 11:14]], axis=2)
    g_qn = quat.matrix_grad_to_quat(cache.qn, G)
    q = np.asarray(posed.q_w, dtype=np.float64)
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    g_q = (g_qn - cache.qn * np.sum(cache.qn * g_qn, axis=1, keepdims=True)) / norm
    return RenderGrads(g_nt, g_logit, g_geo[:, 0:3].copy(), g_geo[:, 3:5].copy(), g_q)


def intersect(origin, direction, posed: PosedBillboards, index: int) -> Intersection | None:
    """Ray against one billboard; ``None`` on a miss."""
    qn, R = billboard_axes(posed.q_w[index])
    hit, t, u, v = _intersect(np.asarray(origin, dtype=np.float64), np.asarray(direction, dtype=np.float64),
                              np.asarray(posed.mu_w[index], dtype=np.float64), R,
                              float(posed.s_w[index, 0]), float(posed.s_w[index, 1]))
    if not hit:
        return None
    rows, cols, w = bilinear_footprint(u, v, posed.nt.shape[1])
    a_tex = sigmoid(posed.alpha_logit[index])
    return Intersection(index, t, u, v, np.stack([rows, cols], 1), w,
                        float(w @ a_tex[rows, cols]), w @ posed.nt[index][rows, cols])


def composite_pixel(intersections, early_termination: bool = True):
    """Front-to-back compositing of depth-sorted :class:`Intersection` objects."""
    for a, b in zip(intersections, intersections[1:]):
        if (a.t, a.index) > (b.t, b.index):
            raise UnsortedInput("intersections must be sorted by (t, index)")
    C = intersections[0].feature.shape[0] if intersections else 0
    feat = np.zeros(C)
    T = 1.0
    for hit in intersections:
        if hit.alpha < ALPHA_MIN:
            continue
        feat = feat + hit.feature * hit.alpha * T
        T *= 1.0 - hit.alpha
        if early_termination and T < T_MIN:
            break
    return feat, 1.0 - T


def render_reference(posed: PosedBillboards, cam: Camera):
    """All-pixels-by-all-billboards renderer without tiling or early termination."""
    H, W = cam.height, cam.width
    N = len(posed)
    C = posed.nt.shape[3]
    if N == 0:
        return np.zeros((H, W, C)), np.zeros((H, W))
    S = posed.nt.shape[1]
    o = cam.center
    d = cam.ray_directions().reshape(-1, 1, 3)
    _, R = billboard_axes(posed.q_w)
    eu, ev, n = R[:, :, 0], R[:, :, 1], R[:, :, 2]
    dn = np.sum(d * n[None], axis=2)
    m = posed.mu_w - o
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.sum(m * n, axis=1)[None] / dn
    p = t[..., None] * d - m[None]
    u = np.sum(p * eu[None], axis=2) / posed.s_w[None, :, 0]
    v = np.sum(p * ev[None], axis=2) / posed.s_w[None, :, 1]
    hit = (np.abs(dn) >= PARALLEL_EPS) & (t > NEAR) & (np.abs(u) <= 1) & (np.abs(v) <= 1)
    u = np.where(hit, u, 0.0)
    v = np.where(hit, v, 0.0)
    rows, cols, w = bilinear_footprint(u, v, S)
    bidx = np.broadcast_to(np.arange(N)[None, :, None], rows.shape)
    a_tex = sigmoid(posed.alpha_logit)
    a = np.sum(w * a_tex[bidx, rows, cols], axis=2)
    f = np.sum(w[..., None] * posed.nt[bidx, rows, cols], axis=2)
    a = np.where(hit & (a >= ALPHA_MIN), a, 0.0)
    key_t = np.where(hit, t, np.inf)
    order = np.lexsort((np.broadcast_to(np.arange(N), key_t.shape), key_t), axis=1)
    a = np.take_along_axis(a, order, 1)
    f = np.take_along_axis(f, order[..., None], 1)
    trans = np.cumprod(np.concatenate([np.ones((a.shape[0], 1)), 1.0 - a], axis=1), axis=1)
    feat = np.sum(f * (a * trans[:, :-1])[..., None], axis=1)
    return feat.reshape(H, W, C), (1.0 - trans[:, -1]).reshape(H, W)


def set_threads(n: int) -> None:
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
