"""End-to-end optimization of billboards and decoder on a multi-view sequence.

One iteration samples a training ``(frame, camera)`` pair, poses the
billboards with the frame's triangle frames, rasterizes features and
billboard opacity, decodes to color and opacity, composites both the
prediction and the ground truth over the same random background color and
back-propagates the total loss through decoder, rasterizer and anchoring.

All randomness comes from one seeded generator stored in the training
state, so a run is reproducible from ``(config, dataset)`` and can be
checkpointed and resumed bit-exactly.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import io
from .anchor import backward_pose, pose_billboards
from .billboards import MIN_SCALE, BillboardSet, init_billboards
from .decoder import (DecoderWeights, composite_background, composite_background_backward, decode,
                      decode_backward)
from .errors import ConnectivityMismatch, DataError, NaNGradient
from .losses import Weights, total_loss
from .mesh import PolygonFrames, TriMesh, polygon_frames, spectral_coords
from .optim import LR, ParamGroup, adam_step, check_finite
from .raster import Camera, render, render_backward
from .synth import Dataset, psnr, ssim


@dataclass
class TrainConfig:
    """Hyperparameters; every field can be set from a ``key = value`` file.

    ``gamma`` of ``None`` means ``0.01 ** (1 / iters)``. ``nt_lr_mode``
    picks the texture learning rate: ``"neural"`` (``LR["nt"]``),
    ``"color"`` (``LR["nt_color"]``) or ``"auto"`` (color rate only when the
    decoder is disabled and textures carry color directly).
    """

    width: int = 128
    height: int = 128
    iters: int = 5000
    depth: int = 3
    base: int = 16
    channels: int = 6
    tex_size: int = 16
    lambda_nb: float = 0.1
    lambda_knn: float = 0.1
    lambda_delta: float = 0.001
    lambda_lpips: float = 0.0
    knn_k: int = 3
    lr_mu: float = LR["mu"]
    lr_s: float = LR["s"]
    lr_q: float = LR["q"]
    lr_nt: float = LR["nt"]
    lr_nt_color: float = LR["nt_color"]
    lr_alpha: float = LR["alpha"]
    lr_decoder: float = LR["decoder"]
    gamma: float | None = None
    nt_lr_mode: str = "neural"
    seed: int = 0
    no_dice: bool = False
    no_reg: bool = False
    no_dnr: bool = False
    instance_norm: bool = True
    early_termination: bool = True
    decoder_dtype: str = "float32"
    log_every: int = 100
    eval_every: int = 1000
    eval_frame_stride: int = 5
    threads: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.no_dnr and self.channels != 3:
            # without a decoder textures are colors
            self.channels = 3
        f = 2 ** self.depth
        if not self.no_dnr and (self.width % f or self.height % f):
            raise ValueError(f"image size {self.width}x{self.height} must be divisible by {f}")
        if self.iters < 0 or self.channels < 1 or self.tex_size < 2 or self.knn_k < 1:
            raise ValueError("iters >= 0, channels >= 1, tex_size >= 2 and knn_k >= 1 required")
        if self.nt_lr_mode not in ("neural", "color", "auto"):
            raise ValueError(f"nt_lr_mode must be neural, color or auto, not {self.nt_lr_mode!r}")
        if self.decoder_dtype not in ("float32", "float64"):
            raise ValueError("decoder_dtype must be float32 or float64")
        if self.gamma is not None and not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")

    @property
    def position_gamma(self) -> float:
        if self.gamma is not None:
            return self.gamma
        return 0.01 ** (1.0 / self.iters) if self.iters > 0 else 1.0

    @property
    def texture_lr(self) -> float:
        color = self.nt_lr_mode == "color" or (self.nt_lr_mode == "auto" and self.no_dnr)
        return self.lr_nt_color if color else self.lr_nt

    def loss_weights(self) -> Weights:
        return Weights(
            nb=0.0 if self.no_dice else self.lambda_nb,
            knn=0.0 if self.no_reg else self.lambda_knn,
            delta=0.0 if self.no_reg else self.lambda_delta,
            lpips=self.lambda_lpips,
        )

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt_value(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key = value")
            key, raw = (p.strip() for p in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(raw, types[key])
        values.update(overrides)
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_text(fh.read(), **overrides)


def _fmt_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(raw: str, typ: str):
    low = raw.lower()
    if "None" in typ and low in ("none", ""):
        return None
    if typ.startswith("bool"):
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ.startswith("int"):
        return int(raw)
    if typ.startswith("float"):
        return float(raw)
    return raw


FULL_SCALE = dict(width=1024, height=1024, iters=400_000, depth=5, base=32)
"""Full-size schedule; defined for reference and never exercised by tests."""


# ---------------------------------------------------------------- state

@dataclass
class TrainState:
    """Everything that evolves during training."""

    config: TrainConfig
    billboards: BillboardSet
    decoder: DecoderWeights | None
    groups: list
    iteration: int
    rng: np.random.Generator
    mesh: TriMesh | None = None
    """Template mesh; not stored in checkpoints (see :func:`attach_mesh`)."""

    def group(self, name: str) -> ParamGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)


def _make_groups(cfg: TrainConfig, bset: BillboardSet, dec: DecoderWeights | None) -> list:
    groups = [
        ParamGroup("mu", bset.mu, cfg.lr_mu, gamma=cfg.position_gamma),
        ParamGroup("s", bset.s, cfg.lr_s, min_value=MIN_SCALE),
        ParamGroup("q", bset.q, cfg.lr_q, quaternion=True),
        ParamGroup("nt", bset.nt, cfg.texture_lr),
        ParamGroup("alpha", bset.alpha_logit, cfg.lr_alpha),
    ]
    if dec is not None:
        groups += [ParamGroup(f"decoder/{k}", v, cfg.lr_decoder) for k, v in dec.params.items()]
    return groups


def init_state(cfg: TrainConfig, mesh: TriMesh) -> TrainState:
    """Billboards from spectral coordinates of the rest mesh and a fresh decoder."""
    coords = spectral_coords(mesh, cfg.channels)
    bset = init_billboards(mesh, coords, cfg.tex_size, cfg.channels)
    if cfg.no_dnr:
        bset.nt[...] = 0.5 + 0.5 * bset.nt
    rng = np.random.default_rng(cfg.seed)
    dec = None
    if not cfg.no_dnr:
        dec_seed = int(rng.integers(2 ** 63))
        dec = DecoderWeights.init(cfg.channels, cfg.depth, cfg.base, cfg.instance_norm, seed=dec_seed,
                                  dtype=np.dtype(cfg.decoder_dtype))
    return TrainState(cfg, bset, dec, _make_groups(cfg, bset, dec), 0, rng, mesh)


def save_state(path, state: TrainState) -> None:
    """Checkpoint with billboards, decoder, optimizer moments, schedule and RNG."""
    sec = {
        "config": np.frombuffer(state.config.to_text().encode(), dtype=np.uint8),
        "iteration": np.array([state.iteration], dtype=np.int64),
        "rng": np.frombuffer(json.dumps(state.rng.bit_generator.state).encode(), dtype=np.uint8),
    }
    if state.decoder is not None:
        for k, v in state.decoder.params.items():
            sec[f"decoder/{k}"] = v
    for g in state.groups:
        sec[f"adam/{g.name}/m"] = g.m
        sec[f"adam/{g.name}/v"] = g.v
        sec[f"adam/{g.name}/lr"] = np.array([g.lr], dtype=np.float64)
    io.save_checkpoint(path, state.billboards, sec)


def load_state(path) -> TrainState:
    bset, sec = io.load_checkpoint(path)
    try:
        cfg = TrainConfig.from_text(sec["config"].tobytes().decode())
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(sec["rng"].tobytes().decode())
        dec = None
        if not cfg.no_dnr:
            dec = DecoderWeights(cfg.channels, cfg.depth, cfg.base, cfg.instance_norm)
            for name, *_ in dec.layer_specs():
                for suffix in ("w", "b", "gamma", "beta"):
                    key = f"decoder/{name}.{suffix}"
                    if key in sec:
                        dec.params[f"{name}.{suffix}"] = sec[key]
        groups = _make_groups(cfg, bset, dec)
        for g in groups:
            g.m[...] = sec[f"adam/{g.name}/m"]
            g.v[...] = sec[f"adam/{g.name}/v"]
            g.lr = float(sec[f"adam/{g.name}/lr"][0])
        it = int(sec["iteration"][0])
    except KeyError as exc:
        raise io.FormatError(f"checkpoint lacks section {exc}") from None
    return TrainState(cfg, bset, dec, groups, it, rng)


# ---------------------------------------------------------------- forward/backward

class _FrameCache:
    """Polygon frames per dataset frame, computed on first use."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.frames: dict[int, PolygonFrames] = {}

    def __call__(self, f: int) -> PolygonFrames:
        if f not in self.frames:
            self.frames[f] = polygon_frames(self.dataset.posed_mesh(f))
        return self.frames[f]


def predict(state: TrainState, frames: PolygonFrames, cam: Camera, bg=(0.0, 0.0, 0.0)):
    """Composited color image ``(H, W, 3)`` and billboard opacity ``(H, W)``."""
    cfg = state.config
    posed = pose_billboards(state.billboards, frames)
    feat, a_nb = render(posed, cam, cfg.early_termination)
    bg = np.asarray(bg, dtype=np.float64)
    if state.decoder is None:
        return feat + (1.0 - a_nb)[..., None] * bg, a_nb
    rgb, a, _ = decode(feat, state.decoder, training=False)
    return composite_background(rgb, a, bg), a_nb


def _step(state: TrainState, dataset: Dataset, frame_cache: _FrameCache):
    """Accumulate gradients of one sampled view into the parameter groups."""
    cfg = state.config
    rng = state.rng
    f = int(rng.integers(dataset.n_frames))
    c = dataset.train_cams[int(rng.integers(len(dataset.train_cams)))]
    bg = rng.random(3)
    cam = dataset.cameras[c]

    posed, pcache = pose_billboards(state.billboards, frame_cache(f), return_cache=True)
    feat, a_nb, rcache = render(posed, cam, cfg.early_termination, return_cache=True)
    if state.decoder is not None:
        rgb_d, a_d, dcache = decode(feat, state.decoder)
        out = composite_background(rgb_d, a_d, bg)
    else:
        out = feat + (1.0 - a_nb)[..., None] * bg
    mask = dataset.mask(f, c)
    gt = dataset.image(f, c) * mask[..., None] + (1.0 - mask[..., None]) * bg
    terms, g = total_loss(out, gt, a_nb, mask, state.billboards.mu, posed, cfg.loss_weights(), cfg.knn_k)

    if state.decoder is not None:
        d_rgb, d_ad = composite_background_backward(g.rgb, rgb_d, a_d, bg)
        g_dec, d_feat = decode_backward(d_rgb, d_ad, dcache, state.decoder)
        d_anb = g.alpha_nb
        for k, v in g_dec.items():
            state.group(f"decoder/{k}").grad += v
    else:
        d_feat = g.rgb
        d_anb = g.alpha_nb - g.rgb @ bg
    rg = render_backward(d_feat, d_anb, rcache)
    d_mu, d_s, d_q = backward_pose(rg.mu_w + g.mu_w, rg.s_w + g.s_w, rg.q_w + g.q_w, pcache)
    state.group("mu").grad += d_mu + g.mu
    state.group("s").grad += d_s
    state.group("q").grad += d_q
    state.group("nt").grad += rg.nt
    state.group("alpha").grad += rg.alpha_logit
    return terms, psnr(np.clip(out, 0, 1), gt)


def evaluate(state: TrainState, dataset: Dataset, frame_stride: int | None = None, cams=None) -> dict:
    """Held-out PSNR / SSIM over black backgrounds, averaged over frames and cameras."""
    stride = frame_stride or state.config.eval_frame_stride
    cams = dataset.test_cams if cams is None else cams
    if not cams:
        raise DataError("dataset has no held-out cameras")
    frame_cache = _FrameCache(dataset)
    ps, ss = [], []
    for f in range(0, dataset.n_frames, stride):
        for c in cams:
            pred, _ = predict(state, frame_cache(f), dataset.cameras[c])
            gt = dataset.image(f, c) * dataset.mask(f, c)[..., None]
            pred = np.clip(pred, 0.0, 1.0)
            ps.append(min(psnr(pred, gt), 100.0))
            ss.append(ssim(pred, gt))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))}


def billboard_dice(state: TrainState, dataset: Dataset, frame_stride: int | None = None, cams=None) -> float:
    """Mean Dice coefficient of the billboard opacity against ground-truth masks."""
    from .losses import dice_coefficient

    stride = frame_stride or state.config.eval_frame_stride
    cams = dataset.test_cams if cams is None else cams
    frame_cache = _FrameCache(dataset)
    out = []
    for f in range(0, dataset.n_frames, stride):
        for c in cams:
            posed = pose_billboards(state.billboards, frame_cache(f))
            _, a_nb = render(posed, dataset.cameras[c], state.config.early_termination)
            out.append(dice_coefficient(a_nb, dataset.mask(f, c)))
    return float(np.mean(out))


METRIC_FIELDS = ["iteration", "loss", "mse", "dice", "knn", "delta", "train_psnr", "heldout_psnr", "heldout_ssim"]


def train(config: TrainConfig, dataset: Dataset, state: TrainState | None = None, stop_at: int | None = None,
          metrics_path=None, checkpoint_path=None, log=None):
    """Run (or continue) training until ``stop_at`` or ``config.iters`` iterations.

    Parameters
    ----------
    state
        Resume from this state; a fresh one is initialized otherwise.
    metrics_path
        CSV file receiving one row per logged iteration (appended on resume).
    checkpoint_path
        Where the last good state is written if a gradient turns non-finite.
    log
        Optional callable receiving each metrics row.

    Returns
    -------
    (TrainState, list of dict)
    """
    if dataset.images.shape[2:4] != (config.height, config.width):
        raise DataError(f"dataset images are {dataset.images.shape[3]}x{dataset.images.shape[2]}, "
                        f"config expects {config.width}x{config.height}")
    if not dataset.train_cams:
        raise DataError("dataset has no training cameras")
    if state is None:
        state = init_state(config, dataset.mesh)
    end = config.iters if stop_at is None else min(stop_at, config.iters)
    frame_cache = _FrameCache(dataset)
    rows = []
    writer = fh = None
    if metrics_path is not None:
        new = state.iteration == 0
        fh = open(metrics_path, "w" if new else "a", newline="")
        writer = csv.DictWriter(fh, METRIC_FIELDS)
        if new:
            writer.writeheader()

    def emit(row):
        rows.append(row)
        if writer is not None:
            writer.writerow(row)
            fh.flush()
        if log is not None:
            log(row)

    try:
        if state.iteration == 0 and config.eval_every > 0 and dataset.test_cams:
            ev = evaluate(state, dataset)
            emit(dict(iteration=0, heldout_psnr=ev["psnr"], heldout_ssim=ev["ssim"]))
        while state.iteration < end:
            terms, train_psnr = _step(state, dataset, frame_cache)
            try:
                check_finite(state.groups)
            except NaNGradient:
                if checkpoint_path is not None:
                    save_state(checkpoint_path, state)
                raise
            state.iteration += 1
            for g in state.groups:
                adam_step(g, state.iteration)
            it = state.iteration
            row = None
            if config.log_every > 0 and (it % config.log_every == 0 or it == config.iters):
                row = dict(iteration=it, loss=terms.total, mse=terms.mse, dice=terms.dice, knn=terms.knn,
                           delta=terms.delta, train_psnr=train_psnr)
            if config.eval_every > 0 and dataset.test_cams and (it % config.eval_every == 0 or it == config.iters):
                ev = evaluate(state, dataset)
                row = dict(row or dict(iteration=it), heldout_psnr=ev["psnr"], heldout_ssim=ev["ssim"])
            if row is not None:
                emit(row)
    finally:
        if fh is not None:
            fh.close()
    return state, rows


def reenact(state: TrainState, poses, cam: Camera, bg=(0.0, 0.0, 0.0)) -> list:
    """Render the avatar under each driving pose (``(F, V, 3)`` vertices or meshes)."""
    rest = None
    images = []
    for pose in poses:
        if isinstance(pose, TriMesh):
            if rest is None:
                rest = _rest_mesh(state)
            if not np.array_equal(pose.triangles, rest.triangles):
                raise ConnectivityMismatch("driving mesh triangles differ from the avatar's")
            verts = pose.vertices
        else:
            verts = np.asarray(pose, dtype=np.float64)
        images.append(_render_pose(state, verts, cam, bg))
    return images


def attach_mesh(state: TrainState, mesh: TriMesh) -> TrainState:
    """Record the template mesh needed to pose a loaded avatar."""
    if mesh.n_triangles != len(state.billboards) and state.billboards.anchor.max() >= mesh.n_triangles:
        raise ConnectivityMismatch("mesh has fewer triangles than the billboards' anchors")
    state.mesh = mesh
    return state


def _rest_mesh(state: TrainState) -> TriMesh:
    if state.mesh is None:
        raise DataError("no template mesh attached; call attach_mesh first")
    return state.mesh


def _render_pose(state: TrainState, verts, cam, bg):
    mesh = _rest_mesh(state)
    if verts.shape != mesh.rest_vertices.shape:
        raise ConnectivityMismatch(f"pose has {verts.shape[0]} vertices, avatar mesh has "
                                   f"{mesh.rest_vertices.shape[0]}")
    rgb, _ = predict(state, polygon_frames(mesh.posed(verts)), cam, bg)
    return rgb


__all__ = ["TrainConfig", "TrainState", "FULL_SCALE", "init_state", "save_state", "load_state", "train",
           "evaluate", "billboard_dice", "predict", "reenact", "attach_mesh", "METRIC_FIELDS"]
