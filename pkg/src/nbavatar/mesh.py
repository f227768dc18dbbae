"""Triangle meshes, per-polygon frames and spectral coordinates.

A :class:`TriMesh` carries both the posed vertices and the rest (canonical)
vertices with shared connectivity. Per-triangle frames ``{T, R, k}`` describe
how each rest triangle moved into its posed configuration and are what the
billboards ride on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceFailure, DegenerateTriangle, ShapeError

AREA_EPS = 1e-12
COT_CLAMP = 1e4
DENSE_LIMIT = 500


@dataclass(frozen=True)
class TriMesh:
    """Posed triangle mesh with its rest pose.

    Parameters
    ----------
    vertices : (V, 3) array
        Posed vertex positions.
    triangles : (F, 3) int array
        Vertex indices per triangle.
    rest_vertices : (V, 3) array, optional
        Canonical pose. Defaults to a copy of ``vertices``.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    rest_vertices: np.ndarray = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        t = np.asarray(self.triangles, dtype=np.int64)
        rv = v.copy() if self.rest_vertices is None else np.asarray(self.rest_vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] < 3:
            raise ShapeError(f"vertices must be (V>=3, 3), got {v.shape}")
        if rv.shape != v.shape:
            raise ShapeError("rest_vertices must match vertices in shape")
        if t.ndim != 2 or t.shape[1] != 3:
            raise ShapeError(f"triangles must be (F, 3), got {t.shape}")
        if t.size and (t.min() < 0 or t.max() >= v.shape[0]):
            raise ShapeError("triangle index out of range")
        rest_area = triangle_areas(rv, t)
        if np.any(rest_area <= AREA_EPS):
            bad = int(np.argmin(rest_area))
            raise DegenerateTriangle(f"rest triangle {bad} has area {rest_area[bad]:.3g}")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "rest_vertices", rv)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def posed(self, vertices) -> "TriMesh":
        """Same connectivity and rest pose, new posed vertices."""
        return TriMesh(vertices, self.triangles, self.rest_vertices)

    def rest(self) -> "TriMesh":
        return TriMesh(self.rest_vertices, self.triangles, self.rest_vertices)

    def vertex_normals(self, rest: bool = False) -> np.ndarray:
        v = self.rest_vertices if rest else self.vertices
        p = v[self.triangles]
        fn = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        vn = np.zeros_like(v)
        for c in range(3):
            np.add.at(vn, self.triangles[:, c], fn)
        return vn / np.maximum(np.linalg.norm(vn, axis=1, keepdims=True), 1e-30)


@dataclass(frozen=True)
class PolygonFrame:
    T: np.ndarray
    R: np.ndarray
    k: float


@dataclass(frozen=True)
class PolygonFrames:
    """Vectorized frames for every triangle: ``T (F,3)``, ``R (F,3,3)``, ``k (F,)``."""

    T: np.ndarray
    R: np.ndarray
    k: np.ndarray

    def __len__(self):
        return self.T.shape[0]

    def __getitem__(self, i) -> PolygonFrame:
        return PolygonFrame(self.T[i].copy(), self.R[i].copy(), float(self.k[i]))

    @classmethod
    def identity(cls, n: int) -> "PolygonFrames":
        return cls(np.zeros((n, 3)), np.tile(np.eye(3), (n, 1, 1)), np.ones(n))


def triangle_areas(vertices, triangles) -> np.ndarray:
    p = np.asarray(vertices)[np.asarray(triangles)]
    return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)


def triangle_bases(vertices, triangles) -> np.ndarray:
    """Canonical orthonormal frame per triangle as columns ``[x, y, z]``.

    x follows the first edge, z is the face normal, y = z cross x.
    """
    p = np.asarray(vertices)[np.asarray(triangles)]
    e0 = p[:, 1] - p[:, 0]
    n = np.cross(e0, p[:, 2] - p[:, 0])
    x = e0 / np.linalg.norm(e0, axis=1, keepdims=True)
    z = n / np.linalg.norm(n, axis=1, keepdims=True)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=2)


def polygon_frames(mesh: TriMesh) -> PolygonFrames:
    """Frames ``{T, R, k}`` of all triangles at once."""
    posed_area = triangle_areas(mesh.vertices, mesh.triangles)
    if np.any(posed_area < AREA_EPS):
        bad = int(np.argmin(posed_area))
        raise DegenerateTriangle(f"posed triangle {bad} has area {posed_area[bad]:.3g}")
    rest_area = triangle_areas(mesh.rest_vertices, mesh.triangles)
    T = mesh.vertices[mesh.triangles].mean(axis=1)
    B_posed = triangle_bases(mesh.vertices, mesh.triangles)
    B_rest = triangle_bases(mesh.rest_vertices, mesh.triangles)
    R = B_posed @ np.transpose(B_rest, (0, 2, 1))
    k = np.sqrt(posed_area / rest_area)
    return PolygonFrames(T, R, k)


def polygon_frame(mesh: TriMesh, tri_index: int) -> PolygonFrame:
    if not 0 <= tri_index < mesh.n_triangles:
        raise IndexError(f"triangle index {tri_index} out of range")
    sub = TriMesh(mesh.vertices, mesh.triangles[tri_index:tri_index + 1], mesh.rest_vertices)
    return polygon_frames(sub)[0]


def cotangent_laplacian(mesh: TriMesh, rest: bool = True) -> sp.csr_matrix:
    """Positive semidefinite cotangent Laplacian ``L = D - W``.

    ``W_ij = (cot a + cot b) / 2`` over the two angles opposite edge ij, with
    each cotangent clamped to ``[-1e4, 1e4]``. Built on the rest pose unless
    ``rest=False``.
    """
    v = mesh.rest_vertices if rest else mesh.vertices
    t = mesh.triangles
    n = v.shape[0]
    p = v[t]
    rows, cols, vals = [], [], []
    for c in range(3):
        i, j = (c + 1) % 3, (c + 2) % 3
        a = p[:, i] - p[:, c]
        b = p[:, j] - p[:, c]
        cross = np.linalg.norm(np.cross(a, b), axis=1)
        dot = np.einsum("ij,ij->i", a, b)
        with np.errstate(divide="ignore", invalid="ignore"):
            cot = np.where(cross > 0, dot / np.where(cross > 0, cross, 1.0), np.sign(dot) * COT_CLAMP)
        cot = np.clip(cot, -COT_CLAMP, COT_CLAMP)
        rows += [t[:, i], t[:, j]]
        cols += [t[:, j], t[:, i]]
        vals += [0.5 * cot, 0.5 * cot]
    W = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    W.sum_duplicates()
    deg = np.asarray(W.sum(axis=1)).ravel()
    return (sp.diags(deg) - W).tocsr()


def _lowest_eigenpairs(L: sp.csr_matrix, count: int):
    n = L.shape[0]
    if n <= DENSE_LIMIT:
        w, V = scipy.linalg.eigh(L.toarray(), subset_by_index=(0, count - 1))
        return w, V
    w, V = spla.eigsh(L.tocsc(), k=count, sigma=-1e-6, which="LM", tol=1e-12, maxiter=5000)
    order = np.argsort(w)
    return w[order], V[:, order]


def spectral_coords(mesh: TriMesh, m: int) -> np.ndarray:
    """Low-frequency Laplacian eigenvectors, one column per channel.

    Returns a ``(V, m)`` array holding eigenvectors 2..m+1 (the constant mode
    is skipped). Each column is scaled so its largest magnitude is 1 and its
    first entry with magnitude above 1e-9 is positive.
    """
    n = mesh.n_vertices
    if not 0 < m < n:
        raise ValueError(f"need 0 < m < vertex count ({n}), got m={m}")
    L = cotangent_laplacian(mesh)
    w, V = _lowest_eigenpairs(L, m + 1)
    w, V = w[1:], V[:, 1:]
    V = V / np.linalg.norm(V, axis=0, keepdims=True)
    resid = np.linalg.norm(L @ V - V * w, axis=0)
    if np.any(resid > 1e-6):
        raise ConvergenceFailure(f"eigenvector residual {resid.max():.3g} exceeds 1e-6")
    for c in range(m):
        col = V[:, c]
        first = np.flatnonzero(np.abs(col) > 1e-9)[0]
        if col[first] < 0:
            V[:, c] = -col
    return V / np.abs(V).max(axis=0, keepdims=True)


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Read ``v``/``f`` lines of an ASCII OBJ; faces must be triangles."""
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ShapeError(f"only triangles supported, got {line.strip()!r}")
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:]])
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def write_obj(path, vertices, triangles) -> None:
    with open(path, "w") as fh:
        for x, y, z in np.asarray(vertices, dtype=np.float64).tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in (np.asarray(triangles) + 1).tolist():
            fh.write(f"f {a} {b} {c}\n")


def load_mesh(posed_path, rest_path=None) -> TriMesh:
    v, f = read_obj(posed_path)
    if rest_path is None:
        return TriMesh(v, f)
    rv, rf = read_obj(rest_path)
    if not np.array_equal(f, rf):
        raise ShapeError("rest and posed OBJ connectivity differ")
    return TriMesh(v, f, rv)
