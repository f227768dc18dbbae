"""Validation suites shared by the command line and the test suite.

``oracle_suite`` compares the tiled rasterizer with the all-pairs reference
on random scenes; ``gradient_suite`` compares every analytic gradient with
central differences. Both return plain dictionaries of measured errors so
callers can apply their own reporting.
"""
from __future__ import annotations

import time

import numpy as np

from . import decoder as dec
from . import quaternion as quat
from .anchor import PosedBillboards, backward_pose, pose_billboards
from .billboards import BillboardSet
from .losses import delta_reg, dice_loss, knn_reg, mse_loss
from .mesh import PolygonFrames
from .raster import ALPHA_MIN, Camera, render, render_backward, render_reference

FD_STEP = 1e-4

# thresholds per gradient family
TOLERANCES = {
    "nt": 1e-3,
    "alpha_logit": 1e-3,
    "mu_w": 1e-2,
    "s_w": 1e-2,
    "q_w": 1e-2,
    "decoder_layers": 1e-4,
    "decoder_full": 1e-3,
    "anchor": 1e-6,
    "losses": 1e-4,
}


def rel_err(a: float, d: float) -> float:
    return abs(a - d) / max(1e-8, abs(a) + abs(d))


def random_scene(rng, n: int, S: int = 4, C: int = 3, spread: float = 1.0) -> PosedBillboards:
    """Billboards scattered around the origin with random orientations and textures."""
    mu = rng.uniform(-spread, spread, (n, 3))
    mu[:, 2] *= 0.5
    return PosedBillboards(
        mu_w=mu,
        s_w=rng.uniform(0.1, 0.6, (n, 2)),
        q_w=quat.random_unit(rng, n),
        nt=rng.uniform(-1.0, 1.0, (n, S, S, C)),
        alpha_logit=rng.normal(0.0, 2.0, (n, S, S)),
    )


def front_camera(size: int = 64, fov: float = 45.0) -> Camera:
    return Camera.look_at([0.0, 0.0, -4.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], fov, size, size)


def oracle_suite(n_scenes: int = 100, max_billboards: int = 64, size: int = 64, seed: int = 0) -> dict:
    """Largest per-channel difference between tiled and reference renders.

    Early termination is off so both compositors see every hit.
    """
    rng = np.random.default_rng(seed)
    cam = front_camera(size)
    worst = 0.0
    start = time.perf_counter()
    for _ in range(n_scenes):
        scene = random_scene(rng, int(rng.integers(1, max_billboards + 1)))
        f, a = render(scene, cam, early_termination=False)
        fr, ar = render_reference(scene, cam)
        worst = max(worst, float(np.abs(f - fr).max()), float(np.abs(a - ar).max()))
    return {"max_abs_diff": worst, "scenes": n_scenes, "seconds": time.perf_counter() - start}


# ---------------------------------------------------------------- rasterizer

def _hit_signature(scene, cam):
    """Discrete state of a render: hit lists, opacity cutoffs and texel cells.

    Two renders with equal signatures lie on the same smooth piece of the
    image as a function of the scene parameters; bilinear sampling has a
    derivative jump whenever a hit moves into another texel cell.
    """
    _, _, cache = render(scene, cam, early_termination=False, return_cache=True)
    hit_idx, _, hit_u, hit_v, hit_a, _ = cache.hits
    S = scene.nt.shape[1]
    cell_u = np.clip(np.floor((hit_u + 1.0) * 0.5 * (S - 1)), 0, S - 2)
    cell_v = np.clip(np.floor((hit_v + 1.0) * 0.5 * (S - 1)), 0, S - 2)
    return cache.hit_ptr.copy(), hit_idx.copy(), hit_a >= ALPHA_MIN, cell_u, cell_v


def _same_signature(a, b) -> bool:
    return all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def raster_gradients(n_scenes: int = 50, probes: int = 6, seed: int = 0, size: int = 32, h: float = FD_STEP) -> dict:
    """Worst relative error per parameter family of the rasterizer backward pass.

    Probes are drawn among entries with a nonzero analytic gradient. A
    geometry probe whose ``+-h`` perturbation changes any ray's hit list or
    crosses the opacity cutoff or a texel boundary sits on a discontinuity
    of the image or its derivative and is skipped.
    """
    rng = np.random.default_rng(seed)
    cam = front_camera(size)
    worst = {k: 0.0 for k in ("nt", "alpha_logit", "mu_w", "s_w", "q_w")}
    used = {k: 0 for k in worst}
    skipped = 0
    for _ in range(n_scenes):
        scene = random_scene(rng, int(rng.integers(2, 9)), S=4, C=2, spread=0.6)
        wf = rng.standard_normal((size, size, 2))
        wa = rng.standard_normal((size, size))

        def loss():
            f, a = render(scene, cam, early_termination=False)
            return float(np.sum(f * wf) + np.sum(a * wa))

        _, _, cache = render(scene, cam, early_termination=False, return_cache=True)
        grads = render_backward(wf, wa, cache)
        base_sig = _hit_signature(scene, cam)
        for name in worst:
            arr = getattr(scene, name)
            g = getattr(grads, name)
            candidates = np.flatnonzero(np.abs(g.ravel()) > 1e-6)
            if candidates.size == 0:
                continue
            flat = arr.reshape(-1)
            for i in rng.choice(candidates, size=min(probes, candidates.size), replace=False):
                old = flat[i]
                flat[i] = old + h
                lp, sp = loss(), _hit_signature(scene, cam)
                flat[i] = old - h
                lm, sm = loss(), _hit_signature(scene, cam)
                flat[i] = old
                if not (_same_signature(sp, base_sig) and _same_signature(sm, base_sig)):
                    skipped += 1
                    continue
                fd = (lp - lm) / (2 * h)
                worst[name] = max(worst[name], rel_err(g.ravel()[i], fd))
                used[name] += 1
    return {"max_rel_err": worst, "probes": used, "skipped": skipped}


# ---------------------------------------------------------------- decoder

def decoder_layer_gradients(seed: int = 0, probes: int = 12, h: float = FD_STEP) -> dict:
    """Worst relative error of every decoder layer's backward pass (float64)."""
    rng = np.random.default_rng(seed)
    out = {}

    def check(name, f, bwd, arrays):
        """``f()`` gives the scalar loss; ``bwd()`` the analytic gradients for ``arrays``."""
        grads = bwd()
        worst = 0.0
        for arr, g in zip(arrays, grads):
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for i in rng.choice(flat.size, size=min(probes, flat.size), replace=False):
                old = flat[i]
                flat[i] = old + h
                lp = f()
                flat[i] = old - h
                lm = f()
                flat[i] = old
                worst = max(worst, rel_err(gflat[i], (lp - lm) / (2 * h)))
        out[name] = worst

    for stride in (1, 2):
        x = rng.standard_normal((8, 8, 3))
        w = rng.standard_normal((3, 3, 3, 4))
        b = rng.standard_normal(4)
        wy = rng.standard_normal((8 // stride, 8 // stride, 4))

        def f(x=x, w=w, b=b, wy=wy, stride=stride):
            return float(np.sum(dec.conv3x3_forward(x, w, b, stride)[0] * wy))

        def bwd(x=x, w=w, b=b, wy=wy, stride=stride):
            _, cache = dec.conv3x3_forward(x, w, b, stride)
            return dec.conv3x3_backward(wy, w, cache)

        check(f"conv3x3_s{stride}", f, bwd, [x, w, b])

    x = rng.standard_normal((6, 6, 5))
    w = rng.standard_normal((5, 3))
    b = rng.standard_normal(3)
    wy = rng.standard_normal((6, 6, 3))
    check("conv1x1", lambda: float(np.sum(dec.conv1x1_forward(x, w, b)[0] * wy)),
          lambda: dec.conv1x1_backward(wy, w, dec.conv1x1_forward(x, w, b)[1]), [x, w, b])

    x = rng.standard_normal((6, 6, 4))
    gamma = rng.standard_normal(4)
    beta = rng.standard_normal(4)
    wy = rng.standard_normal((6, 6, 4))
    check("instance_norm", lambda: float(np.sum(dec.instance_norm_forward(x, gamma, beta)[0] * wy)),
          lambda: dec.instance_norm_backward(wy, gamma, dec.instance_norm_forward(x, gamma, beta)[1]),
          [x, gamma, beta])

    # keep inputs away from the kink at zero
    x = rng.standard_normal((6, 6, 4))
    x = np.where(np.abs(x) < 0.05, 0.5, x)
    wy = rng.standard_normal((6, 6, 4))
    check("leaky_relu", lambda: float(np.sum(dec.leaky_relu_forward(x)[0] * wy)),
          lambda: [dec.leaky_relu_backward(wy, dec.leaky_relu_forward(x)[1])], [x])

    x = rng.standard_normal((4, 5, 3))
    wy = rng.standard_normal((8, 10, 3))
    check("upsample2x", lambda: float(np.sum(dec.upsample2x_forward(x) * wy)),
          lambda: [dec.upsample2x_backward(wy)], [x])

    x = rng.standard_normal((5, 5, 2))
    wy = rng.standard_normal((5, 5, 2))
    check("sigmoid", lambda: float(np.sum(dec.sigmoid_forward(x)[0] * wy)),
          lambda: [dec.sigmoid_backward(wy, dec.sigmoid_forward(x)[0])], [x])

    rgb = rng.uniform(0, 1, (5, 5, 3))
    alpha = rng.uniform(0, 1, (5, 5))
    bg = rng.uniform(0, 1, 3)
    wy = rng.standard_normal((5, 5, 3))
    check("composite_background", lambda: float(np.sum(dec.composite_background(rgb, alpha, bg) * wy)),
          lambda: dec.composite_background_backward(wy, rgb, alpha, bg), [rgb, alpha])
    return out


def decoder_full_gradient(seed: int = 0, n_params: int = 100, size: int = 16, h: float = FD_STEP) -> dict:
    """Relative error of whole-network parameter and input gradients (float64)."""
    rng = np.random.default_rng(seed)
    w = dec.DecoderWeights.init(6, 3, 8, True, seed=seed)
    for k in w.params:
        w.params[k] = w.params[k] + 0.1 * rng.standard_normal(w.params[k].shape)
    x = rng.standard_normal((size, size, 6))
    wr = rng.standard_normal((size, size, 3))
    wa = rng.standard_normal((size, size))

    def loss():
        r, a, _ = dec.decode(x, w, training=False)
        return float(np.sum(r * wr) + np.sum(a * wa))

    r, a, cache = dec.decode(x, w)
    gw, gx = dec.decode_backward(wr, wa, cache, w)
    names = list(w.params)
    sizes = np.array([w.params[k].size for k in names])
    total = int(sizes.sum())
    worst = 0.0
    for j in rng.choice(total, size=min(n_params, total), replace=False):
        which = int(np.searchsorted(np.cumsum(sizes), j, side="right"))
        i = j - (int(np.cumsum(sizes)[which - 1]) if which else 0)
        flat = w.params[names[which]].reshape(-1)
        old = flat[i]
        flat[i] = old + h
        lp = loss()
        flat[i] = old - h
        lm = loss()
        flat[i] = old
        worst = max(worst, rel_err(gw[names[which]].reshape(-1)[i], (lp - lm) / (2 * h)))
    worst_x = 0.0
    xf = x.reshape(-1)
    for i in rng.choice(xf.size, size=20, replace=False):
        old = xf[i]
        xf[i] = old + h
        lp = loss()
        xf[i] = old - h
        lm = loss()
        xf[i] = old
        worst_x = max(worst_x, rel_err(gx.reshape(-1)[i], (lp - lm) / (2 * h)))
    return {"params": worst, "input": worst_x}


# ---------------------------------------------------------------- anchoring and losses

def random_frames(rng, n: int) -> PolygonFrames:
    R = quat.to_matrix(quat.random_unit(rng, n))
    return PolygonFrames(T=rng.standard_normal((n, 3)), R=R, k=rng.uniform(0.5, 2.0, n))


def anchor_gradients(seed: int = 0, n: int = 12, h: float = FD_STEP) -> float:
    """Worst relative error of the posing backward pass wrt local ``mu, s, q``."""
    rng = np.random.default_rng(seed)
    frames = random_frames(rng, n)
    b = BillboardSet(
        mu=rng.standard_normal((n, 3)) * 0.1,
        s=rng.uniform(0.1, 0.5, (n, 2)),
        q=quat.random_unit(rng, n),
        nt=np.zeros((n, 2, 2, 1)),
        alpha_logit=np.zeros((n, 2, 2)),
        anchor=rng.integers(0, n, n),
    )
    wm, ws, wq = rng.standard_normal((n, 3)), rng.standard_normal((n, 2)), rng.standard_normal((n, 4))

    def loss():
        p = pose_billboards(b, frames)
        return float(np.sum(p.mu_w * wm) + np.sum(p.s_w * ws) + np.sum(p.q_w * wq))

    _, cache = pose_billboards(b, frames, return_cache=True)
    grads = backward_pose(wm, ws, wq, cache)
    worst = 0.0
    for arr, g in zip((b.mu, b.s, b.q), grads):
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = loss()
            flat[i] = old - h
            lm = loss()
            flat[i] = old
            worst = max(worst, rel_err(g.reshape(-1)[i], (lp - lm) / (2 * h)))
    return worst


def loss_gradients(seed: int = 0, h: float = FD_STEP) -> dict:
    """Worst relative error of MSE, Dice, KNN and offset regularizer gradients."""
    rng = np.random.default_rng(seed)
    out = {}

    def probe(name, f, arr, g, count=15):
        flat = arr.reshape(-1)
        worst = 0.0
        for i in rng.choice(flat.size, size=min(count, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            lp = f()
            flat[i] = old - h
            lm = f()
            flat[i] = old
            worst = max(worst, rel_err(g.reshape(-1)[i], (lp - lm) / (2 * h)))
        out[name] = worst

    p, t = rng.uniform(0, 1, (6, 6, 3)), rng.uniform(0, 1, (6, 6, 3))
    probe("mse", lambda: mse_loss(p, t)[0], p, mse_loss(p, t)[1])
    a, m = rng.uniform(0, 1, (8, 8)), (rng.uniform(0, 1, (8, 8)) > 0.5).astype(float)
    probe("dice", lambda: dice_loss(a, m)[0], a, dice_loss(a, m)[1])
    mu = rng.standard_normal((10, 3))
    probe("delta", lambda: delta_reg(mu)[0], mu, delta_reg(mu)[1])

    n = 16
    posed = PosedBillboards(rng.standard_normal((n, 3)), rng.uniform(0.1, 1, (n, 2)),
                            quat.random_unit(rng, n), np.zeros((n, 2, 2, 1)), np.zeros((n, 2, 2)))
    from .losses import knn_indices

    nb = knn_indices(posed.mu_w, 3)
    _, g = knn_reg(posed, neighbors=nb)
    for name in ("mu_w", "s_w", "q_w"):
        probe(f"knn_{name}", lambda: knn_reg(posed, neighbors=nb)[0], getattr(posed, name), getattr(g, name))
    return out


def gradient_suite(seed: int = 0, n_scenes: int = 50) -> dict:
    """All gradient checks with their tolerances; ``passed`` is the overall verdict."""
    start = time.perf_counter()
    raster = raster_gradients(n_scenes=n_scenes, seed=seed)
    layers = decoder_layer_gradients(seed=seed)
    full = decoder_full_gradient(seed=seed)
    anchor = anchor_gradients(seed=seed)
    losses = loss_gradients(seed=seed)
    families = dict(raster["max_rel_err"])
    families["decoder_layers"] = max(layers.values())
    families["decoder_full"] = max(full.values())
    families["anchor"] = anchor
    families["losses"] = max(losses.values())
    verdicts = {k: v < TOLERANCES[k] for k, v in families.items()}
    return {
        "families": families,
        "verdicts": verdicts,
        "passed": all(verdicts.values()),
        "detail": {"raster": raster, "decoder_layers": layers, "decoder_full": full, "losses": losses},
        "seconds": time.perf_counter() - start,
    }
