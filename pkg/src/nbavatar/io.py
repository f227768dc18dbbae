"""Binary and text file formats.

All binary formats are little-endian.

Checkpoint (``NBAV``)::

    b"NBAV"  u32 version=1  u32 N  u32 S_T  u32 C
    f64 mu[N*3]  f64 s[N*2]  f64 q[N*4]  f64 nt[N*S_T*S_T*C]  f64 alpha_logit[N*S_T*S_T]
    i64 anchor[N]
    u32 n_sections, then per section:
        u32 name_len  name(utf-8)  u8 dtype ('d' f64, 'f' f32, 'q' i64, 'B' u8)
        u32 ndim  u32 dims[ndim]  raw data

Vertex animation (``NBAN``)::

    b"NBAN"  u32 frames  u32 vertices  f32 xyz[frames*vertices*3]

Feature image dump (``NBIM``)::

    b"NBIM"  u32 width  u32 height  u32 channels  f32 data[height*width*channels]
"""
from __future__ import annotations

import struct

import numpy as np

from .billboards import BillboardSet
from .errors import FormatError

CKPT_MAGIC = b"NBAV"
CKPT_VERSION = 1
_DTYPES = {"d": np.dtype("<f8"), "f": np.dtype("<f4"), "q": np.dtype("<i8"), "B": np.dtype("u1")}


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def array(self, dtype, count, shape=None) -> np.ndarray:
        dtype = np.dtype(dtype)
        a = np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype).copy()
        return a.reshape(shape) if shape is not None else a


def _pack_section(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8)
    code = {("f", 8): "d", ("f", 4): "f", ("i", 8): "q", ("u", 1): "B"}.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype} for section {name!r}")
    raw = name.encode()
    head = struct.pack("<I", len(raw)) + raw + code.encode() + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def save_checkpoint(path, billboards: BillboardSet, sections: dict | None = None) -> None:
    """Billboard parameters followed by named array sections."""
    N, S, C = len(billboards), billboards.tex_size, billboards.channels
    parts = [CKPT_MAGIC, struct.pack("<IIII", CKPT_VERSION, N, S, C)]
    for a in (billboards.mu, billboards.s, billboards.q, billboards.nt, billboards.alpha_logit):
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(billboards.anchor, dtype="<i8").tobytes())
    sections = sections or {}
    parts.append(struct.pack("<I", len(sections)))
    for name, arr in sections.items():
        parts.append(_pack_section(name, arr))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> tuple[BillboardSet, dict]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version = r.u32()
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    N, S, C = r.u32(), r.u32(), r.u32()
    f8 = "<f8"
    bb = BillboardSet(
        mu=r.array(f8, N * 3, (N, 3)),
        s=r.array(f8, N * 2, (N, 2)),
        q=r.array(f8, N * 4, (N, 4)),
        nt=r.array(f8, N * S * S * C, (N, S, S, C)),
        alpha_logit=r.array(f8, N * S * S, (N, S, S)),
        anchor=r.array("<i8", N),
    )
    sections = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        code = r.take(1).decode()
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code!r}")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        sections[name] = r.array(_DTYPES[code], int(np.prod(shape, dtype=np.int64)), shape)
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after last section")
    return bb, sections


def save_animation(path, poses) -> None:
    poses = np.asarray(poses)
    F, V = poses.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"NBAN" + struct.pack("<II", F, V))
        fh.write(np.ascontiguousarray(poses, dtype="<f4").tobytes())


def load_animation(path) -> np.ndarray:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != b"NBAN":
        raise FormatError("not a vertex animation file (bad magic)")
    F, V = r.u32(), r.u32()
    return r.array("<f4", F * V * 3, (F, V, 3)).astype(np.float64)


def save_feature_image(path, image) -> None:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[..., None]
    H, W, C = img.shape
    with open(path, "wb") as fh:
        fh.write(b"NBIM" + struct.pack("<III", W, H, C))
        fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def load_feature_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != b"NBIM":
        raise FormatError("not a feature image dump (bad magic)")
    W, H, C = r.u32(), r.u32(), r.u32()
    return r.array("<f4", H * W * C, (H, W, C))


def write_ppm(path, rgb) -> None:
    """8-bit binary PPM (P6); float input in ``[0, 1]`` is rounded."""
    img = _to_u8(rgb)
    H, W = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode() + img.tobytes())


def write_pgm(path, gray) -> None:
    img = _to_u8(gray)
    H, W = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode() + img.tobytes())


def _to_u8(img) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return np.ascontiguousarray(img)
    if img.dtype == bool:
        return img.astype(np.uint8) * 255
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def read_pnm(path) -> np.ndarray:
    """Read a binary P5/P6 file with maxval 255 into a uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    magic, W, H, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM header {tokens}")
    C = 3 if magic == b"P6" else 1
    img = np.frombuffer(data[pos:pos + W * H * C], dtype=np.uint8)
    if img.size != W * H * C:
        raise FormatError("truncated PNM")
    return img.reshape((H, W, C) if C == 3 else (H, W)).copy()
