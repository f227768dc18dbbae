"""Synthetic multi-view data: procedural meshes, a poke animation, a z-buffer
ground-truth renderer, and image metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .mesh import TriMesh
from .raster import Camera

SCENE_KINDS = ("sphere", "cube", "strip")
MAX_VERTICES = 5000
DEFAULT_LIGHT = np.array([0.35, -0.55, -0.75]) / np.linalg.norm([0.35, -0.55, -0.75])
AMBIENT = 0.3


def icosphere(subdiv: int) -> tuple[np.ndarray, np.ndarray]:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    for _ in range(subdiv):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = nf
    return np.array(verts), np.array(f, dtype=np.int64)


def box(n: int, size=(1.0, 1.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """Closed axis-aligned box surface with an ``n x n`` grid per face, outward winding."""
    verts, faces, index = [], [], {}
    g = np.linspace(-1.0, 1.0, n + 1)
    half = np.asarray(size, dtype=np.float64)
    for axis in range(3):
        for side in (-1.0, 1.0):
            a1, a2 = (axis + 1) % 3, (axis + 2) % 3
            ids = np.empty((n + 1, n + 1), dtype=np.int64)
            for i, x in enumerate(g):
                for j, y in enumerate(g):
                    p = np.zeros(3)
                    p[axis], p[a1], p[a2] = side, x, y
                    key = tuple(np.round(p, 9))
                    if key not in index:
                        index[key] = len(verts)
                        verts.append(p * half)
                    ids[i, j] = index[key]
            for i in range(n):
                for j in range(n):
                    a, b, c, d = ids[i, j], ids[i + 1, j], ids[i + 1, j + 1], ids[i, j + 1]
                    if side > 0:
                        faces += [[a, b, c], [a, c, d]]
                    else:
                        faces += [[a, c, b], [a, d, c]]
    return np.array(verts), np.array(faces, dtype=np.int64)


def procedural_colors(vertices, seed: int = 0) -> np.ndarray:
    """Checkerboard over longitude/latitude times a smooth vertical gradient."""
    rng = np.random.default_rng(seed)
    palette = rng.uniform(0.25, 1.0, size=(2, 3))
    p = vertices - vertices.mean(axis=0)
    r = np.linalg.norm(p, axis=1)
    lon = np.arctan2(p[:, 2], p[:, 0])
    lat = np.arcsin(np.clip(p[:, 1] / np.maximum(r, 1e-12), -1, 1))
    checker = (np.floor(lon * 4 / np.pi) + np.floor(lat * 4 / np.pi)).astype(np.int64) % 2
    grad = 0.55 + 0.45 * (p[:, 1] - p[:, 1].min()) / max(np.ptp(p[:, 1]), 1e-12)
    return np.clip(palette[checker] * grad[:, None], 0.0, 1.0)


def make_scene(kind: str = "sphere", subdiv: int = 2, seed: int = 0) -> tuple[TriMesh, np.ndarray]:
    """Closed procedural mesh plus per-vertex colors in ``[0, 1]``."""
    if kind == "sphere":
        v, f = icosphere(subdiv)
    elif kind == "cube":
        v, f = box(2 ** subdiv)
    elif kind == "strip":
        v, f = box(2 ** subdiv, size=(2.0, 0.35, 0.35))
    else:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
    if v.shape[0] > MAX_VERTICES:
        raise ValueError(f"subdivision {subdiv} gives {v.shape[0]} vertices (limit {MAX_VERTICES})")
    return TriMesh(v, f), procedural_colors(v, seed)


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


@dataclass(frozen=True)
class PokeParams:
    depth: float = 0.12
    width: float = 0.35
    yaw: float = 0.5
    pitch: float = 0.2


def animate(mesh: TriMesh, frame: int, total: int, params: PokeParams = PokeParams()) -> TriMesh:
    """Rest mesh deformed by an orbiting inward Gaussian poke, then rotated.

    Poke depth ``depth * sin^2(pi f / total)`` times the bounding radius,
    along rest vertex normals; the poke center circles the mesh once per
    sequence. A yaw/pitch wobble rotates the whole mesh. Frame 0 is the rest
    pose exactly.
    """
    if not 0 <= frame < total:
        raise ValueError(f"frame {frame} outside [0, {total})")
    rv = mesh.rest_vertices
    if frame == 0:
        return mesh.posed(rv.copy())
    center = rv.mean(axis=0)
    p = rv - center
    radius = np.linalg.norm(p, axis=1).max()
    phase = frame / total
    amp = params.depth * radius * math.sin(math.pi * phase) ** 2
    phi = 2 * math.pi * phase
    c = np.array([math.cos(phi), 0.3, math.sin(phi)])
    c = radius * c / np.linalg.norm(c)
    w = params.width * radius
    bump = np.exp(-np.sum((p - c) ** 2, axis=1) / (2 * w * w))
    posed = p - amp * bump[:, None] * mesh.vertex_normals(rest=True)
    rot = _rot_y(params.yaw * math.sin(2 * math.pi * phase)) @ _rot_x(params.pitch * math.sin(4 * math.pi * phase))
    return mesh.posed(posed @ rot.T + center)


def gt_render(mesh: TriMesh, colors, cam: Camera, light=DEFAULT_LIGHT, ambient: float = AMBIENT):
    """Z-buffered triangle rasterization with Lambertian shading.

    Colors and normals are interpolated perspective-correctly from the
    vertices; shading is ``ambient + (1 - ambient) * max(0, n . l)`` where
    ``l`` points towards the light. Returns ``(rgb (H, W, 3), mask (H, W))``.
    """
    H, W = cam.height, cam.width
    rgb = np.zeros((H, W, 3))
    zbuf = np.full((H, W), np.inf)
    mask = np.zeros((H, W), dtype=bool)
    v = mesh.vertices
    normals = mesh.vertex_normals()
    xy, z = cam.project(v)
    light = np.asarray(light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    for tri in mesh.triangles:
        if np.any(z[tri] <= 1e-6):
            continue
        p = xy[tri]
        x0, x1 = max(int(np.floor(p[:, 0].min() - 0.5)), 0), min(int(np.ceil(p[:, 0].max() - 0.5)), W - 1)
        y0, y1 = max(int(np.floor(p[:, 1].min() - 0.5)), 0), min(int(np.ceil(p[:, 1].max() - 0.5)), H - 1)
        if x0 > x1 or y0 > y1:
            continue
        area = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1])
        if abs(area) < 1e-12:
            continue
        gy, gx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        px, py = gx + 0.5, gy + 0.5
        l0 = ((p[1, 0] - px) * (p[2, 1] - py) - (p[2, 0] - px) * (p[1, 1] - py)) / area
        l1 = ((p[2, 0] - px) * (p[0, 1] - py) - (p[0, 0] - px) * (p[2, 1] - py)) / area
        l2 = 1.0 - l0 - l1
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        bary = np.stack([l0[inside], l1[inside], l2[inside]], 1) / z[tri]
        inv_z = bary.sum(axis=1)
        bary /= inv_z[:, None]
        depth = 1.0 / inv_z
        yy, xx = gy[inside], gx[inside]
        closer = depth < zbuf[yy, xx]
        if not closer.any():
            continue
        yy, xx, bary, depth = yy[closer], xx[closer], bary[closer], depth[closer]
        n = bary @ normals[tri]
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
        shade = ambient + (1 - ambient) * np.maximum(0.0, n @ light)
        zbuf[yy, xx] = depth
        rgb[yy, xx] = (bary @ colors[tri]) * shade[:, None]
        mask[yy, xx] = True
    return rgb, mask


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for images in ``[0, 1]``; ``inf`` when identical."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def ssim(a, b, size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully-inside Gaussian windows (averaged over channels)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("ssim needs equally shaped images")
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], size, sigma, k1, k2) for c in range(a.shape[2])]))
    g = gaussian_window(size, sigma)
    r = size // 2

    def filt(x):
        y = ndimage.correlate1d(x, g, axis=0, mode="constant")
        y = ndimage.correlate1d(y, g, axis=1, mode="constant")
        return y[r:x.shape[0] - r, r:x.shape[1] - r]

    c1, c2 = k1 ** 2, k2 ** 2
    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))
    return float(s.mean())


def camera_ring(n: int, width: int, height: int, radius: float = 3.6, elevation: float = 0.35,
                fov_deg: float = 40.0) -> list[Camera]:
    cams = []
    for i in range(n):
        a = 2 * math.pi * i / n
        eye = [radius * math.sin(a), -elevation * radius * 0.5 * (1 + (i % 2)), -radius * math.cos(a)]
        cams.append(Camera.look_at(eye, [0, 0, 0], [0, -1, 0], fov_deg, width, height))
    return cams


@dataclass
class Dataset:
    """Rendered multi-view sequence.

    ``images`` is ``(F, K, H, W, 3)`` uint8 and ``masks`` ``(F, K, H, W)``
    bool; ``poses`` holds posed vertices per frame.
    """

    mesh: TriMesh
    colors: np.ndarray
    poses: np.ndarray
    cameras: list
    train_cams: list
    test_cams: list
    images: np.ndarray
    masks: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.poses.shape[0]

    def posed_mesh(self, frame: int) -> TriMesh:
        return self.mesh.posed(self.poses[frame])

    def image(self, frame: int, cam: int) -> np.ndarray:
        return self.images[frame, cam].astype(np.float64) / 255.0

    def mask(self, frame: int, cam: int) -> np.ndarray:
        return self.masks[frame, cam].astype(np.float64)


def make_dataset(kind: str = "sphere", subdiv: int = 2, frames: int = 40, n_cams: int = 8,
                 width: int = 128, height: int = 128, seed: int = 0, held_out=(3,)) -> Dataset:
    """Render every (frame, camera) pair of an animated procedural scene.

    The last entries of ``held_out`` that index existing cameras form the
    test split; the rest of the ring is used for training.
    """
    mesh, colors = make_scene(kind, subdiv, seed)
    poses = np.stack([animate(mesh, f, frames).vertices for f in range(frames)])
    # poses are stored as float32 on disk; keep memory and disk identical
    poses = poses.astype(np.float32).astype(np.float64)
    cams = camera_ring(n_cams, width, height)
    test = [c for c in held_out if c < n_cams] if n_cams > 1 else []
    train = [c for c in range(n_cams) if c not in test]
    images = np.zeros((frames, n_cams, height, width, 3), dtype=np.uint8)
    masks = np.zeros((frames, n_cams, height, width), dtype=bool)
    for f in range(frames):
        posed = mesh.posed(poses[f])
        for c, cam in enumerate(cams):
            rgb, m = gt_render(posed, colors, cam)
            images[f, c] = np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)
            masks[f, c] = m
    meta = dict(kind=kind, subdiv=subdiv, seed=seed)
    return Dataset(mesh, colors, poses, cams, train, test, images, masks, meta)


def _fmt(x) -> str:
    return repr(float(x))


def write_dataset(ds: Dataset, root) -> None:
    """Write PPM images, PGM masks, meshes and a plain-text manifest to ``root``.

    Manifest lines::

        nbavatar-dataset 1
        size <W> <H>
        frames <F>
        colors colors.txt
        mesh rest.obj
        poses poses.nban
        camera <i> <train|test> fx fy cx cy r00 r01 ... r22 t0 t1 t2
        image <frame> <camera> <rgb.ppm> <mask.pgm>
    """
    from . import io
    from .mesh import write_obj

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    H, W = ds.images.shape[2:4]
    write_obj(root / "rest.obj", ds.mesh.rest_vertices, ds.mesh.triangles)
    io.save_animation(root / "poses.nban", ds.poses)
    np.savetxt(root / "colors.txt", ds.colors, fmt="%.17g")
    lines = ["nbavatar-dataset 1", f"size {W} {H}", f"frames {ds.n_frames}", "colors colors.txt",
             "mesh rest.obj", "poses poses.nban"]
    for i, cam in enumerate(ds.cameras):
        split = "test" if i in ds.test_cams else "train"
        vals = [cam.fx, cam.fy, cam.cx, cam.cy, *cam.R.ravel(), *cam.t]
        lines.append(f"camera {i} {split} " + " ".join(_fmt(v) for v in vals))
    for f in range(ds.n_frames):
        for c in range(len(ds.cameras)):
            rgb, mask = f"frame{f:03d}_cam{c:02d}.ppm", f"frame{f:03d}_cam{c:02d}_mask.pgm"
            io.write_ppm(root / rgb, ds.images[f, c])
            io.write_pgm(root / mask, ds.masks[f, c])
            lines.append(f"image {f} {c} {rgb} {mask}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_dataset(root) -> Dataset:
    from . import io
    from .errors import DataError
    from .mesh import read_obj

    root = Path(root)
    path = root / "manifest.txt"
    if not path.exists():
        raise DataError(f"no manifest at {path}")
    cams, train, test, entries = {}, [], [], []
    size = frames = None
    files = {}
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        if key == "nbavatar-dataset":
            if parts[1] != "1":
                raise DataError(f"unsupported manifest version {parts[1]}")
        elif key == "size":
            size = int(parts[1]), int(parts[2])
        elif key == "frames":
            frames = int(parts[1])
        elif key in ("colors", "mesh", "poses"):
            files[key] = root / parts[1]
        elif key == "camera":
            i, split = int(parts[1]), parts[2]
            v = [float(x) for x in parts[3:]]
            if len(v) != 16:
                raise DataError(f"camera line needs 16 numbers: {line!r}")
            cams[i] = Camera(v[0], v[1], v[2], v[3], np.array(v[4:13]).reshape(3, 3), np.array(v[13:16]),
                             size[0], size[1])
            (test if split == "test" else train).append(i)
        elif key == "image":
            entries.append((int(parts[1]), int(parts[2]), parts[3], parts[4]))
        else:
            raise DataError(f"unknown manifest entry {key!r}")
    if size is None or frames is None or not {"mesh", "poses"} <= files.keys():
        raise DataError("manifest is missing size, frames, mesh or poses")
    rv, tris = read_obj(files["mesh"])
    poses = io.load_animation(files["poses"])
    if poses.shape != (frames, rv.shape[0], 3):
        raise DataError("pose file does not match mesh/frames")
    colors = np.loadtxt(files["colors"]).reshape(-1, 3) if "colors" in files else np.zeros_like(rv)
    K = len(cams)
    W, H = size
    images = np.zeros((frames, K, H, W, 3), dtype=np.uint8)
    masks = np.zeros((frames, K, H, W), dtype=bool)
    for f, c, rgb, mask in entries:
        images[f, c] = io.read_pnm(root / rgb)
        masks[f, c] = io.read_pnm(root / mask) > 127
    mesh = TriMesh(rv, tris)
    return Dataset(mesh, colors, poses, [cams[i] for i in range(K)], sorted(train), sorted(test),
                   images, masks)
