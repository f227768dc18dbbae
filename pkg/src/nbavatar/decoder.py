"""Screen-space convolutional decoder turning feature images into RGB and alpha.

A small U-Net on channel-last ``(H, W, C)`` float64 images: ``depth``
stride-2 3x3 convolutions (instance norm, leaky ReLU) on the way down, and on
the way up bilinear x2 upsampling, concatenation with the matching encoder
activation, then 3x3 convolution, instance norm and leaky ReLU. Two 1x1
heads with sigmoids give RGB and alpha. Forward and backward passes are
written out by hand; every layer has a ``*_forward`` / ``*_backward`` pair.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import CacheMismatch, ShapeError

LEAK = 0.2
NORM_EPS = 1e-5


# ---------------------------------------------------------------- layers

@njit(cache=True)
def _im2col(x, Ho, Wo, stride):
    """Patch matrix ``(Ho, Wo, 9 * C)`` with one pixel of zero padding, taps in row-major order."""
    H, W, C = x.shape
    out = np.zeros((Ho, Wo, 9 * C), dtype=x.dtype)
    for i in range(Ho):
        for j in range(Wo):
            k = 0
            for di in range(3):
                for dj in range(3):
                    y = stride * i + di - 1
                    xx = stride * j + dj - 1
                    if 0 <= y < H and 0 <= xx < W:
                        src = x[y, xx]
                        for c in range(C):
                            out[i, j, k + c] = src[c]
                    k += C
    return out


@njit(cache=True)
def _col2im(dcols, H, W, stride):
    """Adjoint of :func:`_im2col` with the padding stripped, ``(H, W, C)``."""
    Ho, Wo, _, C = dcols.shape
    dxp = np.zeros((H + 2, W + 2, C), dtype=dcols.dtype)
    for k in range(9):
        di, dj = k // 3, k % 3
        for i in range(Ho):
            for j in range(Wo):
                dst = dxp[stride * i + di, stride * j + dj]
                src = dcols[i, j, k]
                for c in range(C):
                    dst[c] += src[c]
    return dxp[1:-1, 1:-1].copy()


def conv3x3_forward(x, w, b, stride=1):
    H, W, Ci = x.shape
    if stride == 2 and (H % 2 or W % 2):
        raise ShapeError("stride-2 convolution needs even spatial size")
    Ho, Wo = H // stride, W // stride
    cols = _im2col(np.ascontiguousarray(x), Ho, Wo, stride)
    y = cols.reshape(Ho * Wo, 9 * Ci) @ w.reshape(9 * Ci, -1) + b
    return y.reshape(Ho, Wo, -1), (cols, x.shape, stride)


def conv3x3_backward(dy, w, cache):
    cols, xshape, stride = cache
    H, W, Ci = xshape
    Ho, Wo, Co = dy.shape
    dy2 = dy.reshape(Ho * Wo, Co)
    dw = (cols.reshape(Ho * Wo, 9 * Ci).T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ w.reshape(9 * Ci, Co).T).reshape(Ho, Wo, 9, Ci)
    return _col2im(dcols, H, W, stride), dw, db


def conv1x1_forward(x, w, b):
    return x @ w + b, x


def conv1x1_backward(dy, w, x):
    H, W, Co = dy.shape
    dy2 = dy.reshape(-1, Co)
    return dy @ w.T, x.reshape(-1, x.shape[2]).T @ dy2, dy2.sum(axis=0)


def instance_norm_forward(x, gamma=None, beta=None, eps=NORM_EPS):
    mean = x.mean(axis=(0, 1))
    var = x.var(axis=(0, 1))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    y = xhat if gamma is None else xhat * gamma + beta
    return y, (xhat, inv)


def instance_norm_backward(dy, gamma, cache):
    xhat, inv = cache
    n = xhat.shape[0] * xhat.shape[1]
    dgamma = np.sum(dy * xhat, axis=(0, 1)) if gamma is not None else None
    dbeta = dy.sum(axis=(0, 1)) if gamma is not None else None
    dxhat = dy if gamma is None else dy * gamma
    dx = inv / n * (n * dxhat - dxhat.sum(axis=(0, 1)) - xhat * np.sum(dxhat * xhat, axis=(0, 1)))
    return dx, dgamma, dbeta


def leaky_relu_forward(x, slope=LEAK):
    return np.where(x > 0, x, slope * x), x


def leaky_relu_backward(dy, x, slope=LEAK):
    return np.where(x > 0, dy, slope * dy)


def _up_axis(x, axis):
    # out[2k] = .75 x[k] + .25 x[k-1], out[2k+1] = .75 x[k] + .25 x[k+1], edges clamped
    n = x.shape[axis]
    prev = np.take(x, np.r_[0, np.arange(n - 1)], axis=axis)
    nxt = np.take(x, np.r_[np.arange(1, n), n - 1], axis=axis)
    even = 0.75 * x + 0.25 * prev
    odd = 0.75 * x + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(x.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _up_axis_backward(dy, axis):
    n = dy.shape[axis] // 2
    shape = list(dy.shape)
    shape[axis:axis + 1] = [n, 2]
    d = dy.reshape(shape)
    de = np.take(d, 0, axis=axis + 1)
    do = np.take(d, 1, axis=axis + 1)
    dx = 0.75 * (de + do)
    sl = [slice(None)] * dx.ndim

    def at(i):
        s = list(sl)
        s[axis] = i
        return tuple(s)

    # even outputs read x[k-1] (clamped at 0); odd outputs read x[k+1] (clamped at n-1)
    dx[at(slice(0, n - 1))] += 0.25 * de[at(slice(1, n))]
    dx[at(0)] += 0.25 * de[at(0)]
    dx[at(slice(1, n))] += 0.25 * do[at(slice(0, n - 1))]
    dx[at(n - 1)] += 0.25 * do[at(n - 1)]
    return dx


def upsample2x_forward(x):
    """Bilinear x2 upsampling with half-pixel centers and edge clamping."""
    return _up_axis(_up_axis(x, 0), 1)


def upsample2x_backward(dy):
    return _up_axis_backward(_up_axis_backward(dy, 1), 0)


def sigmoid_forward(x):
    y = 0.5 * (1.0 + np.tanh(0.5 * x))
    return y, y


def sigmoid_backward(dy, y):
    return dy * y * (1.0 - y)


# ---------------------------------------------------------------- network

@dataclass
class DecoderWeights:
    """Parameters of the decoder, keyed by layer name."""

    in_channels: int = 6
    depth: int = 3
    base: int = 16
    instance_norm: bool = True
    params: dict = field(default_factory=dict)

    def layer_specs(self):
        """``(name, kind, in_ch, out_ch)`` for every convolution in forward order."""
        specs = []
        chans = [self.in_channels] + [self.base * 2 ** (l - 1) for l in range(1, self.depth + 1)]
        for l in range(1, self.depth + 1):
            specs.append((f"enc{l}", "down", chans[l - 1], chans[l]))
        cur = chans[self.depth]
        for l in range(self.depth, 0, -1):
            out = self.base * 2 ** (l - 2) if l >= 2 else self.base
            specs.append((f"dec{l}", "up", cur + chans[l - 1], out))
            cur = out
        specs.append(("head_rgb", "head", cur, 3))
        specs.append(("head_alpha", "head", cur, 1))
        return specs

    @classmethod
    def init(cls, in_channels=6, depth=3, base=16, instance_norm=True, seed=0,
             dtype=np.float64) -> "DecoderWeights":
        """Fan-in scaled normal weights, zero biases, unit norm scales."""
        rng = np.random.default_rng(seed)
        w = cls(in_channels, depth, base, instance_norm)
        for name, kind, ci, co in w.layer_specs():
            if kind == "head":
                w.params[f"{name}.w"] = rng.standard_normal((ci, co)) * np.sqrt(1.0 / ci)
            else:
                w.params[f"{name}.w"] = rng.standard_normal((3, 3, ci, co)) * np.sqrt(2.0 / (9 * ci))
            # a bias in front of instance norm is cancelled by the mean subtraction
            if kind == "head" or not instance_norm:
                w.params[f"{name}.b"] = np.zeros(co)
            if kind != "head" and instance_norm:
                w.params[f"{name}.gamma"] = np.ones(co)
                w.params[f"{name}.beta"] = np.zeros(co)
        w.params = {k: v.astype(dtype) for k, v in w.params.items()}
        return w

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def signature(self) -> tuple:
        return (self.in_channels, self.depth, self.base, self.instance_norm,
                tuple((k, v.shape) for k, v in self.params.items()))


@dataclass
class ActivationCache:
    signature: tuple
    layers: dict
    out_rgb: np.ndarray
    out_alpha: np.ndarray


def _block_forward(x, w, name, stride, norm, layers):
    y, c_conv = conv3x3_forward(x, w.params[f"{name}.w"], w.params.get(f"{name}.b", 0.0), stride)
    c_norm = None
    if norm:
        y, c_norm = instance_norm_forward(y, w.params[f"{name}.gamma"], w.params[f"{name}.beta"])
    y, c_act = leaky_relu_forward(y)
    layers[name] = (c_conv, c_norm, c_act)
    return y


def _block_backward(dy, w, name, norm, layers, grads):
    c_conv, c_norm, c_act = layers[name]
    dy = leaky_relu_backward(dy, c_act)
    if norm:
        dy, grads[f"{name}.gamma"], grads[f"{name}.beta"] = instance_norm_backward(
            dy, w.params[f"{name}.gamma"], c_norm)
    dx, grads[f"{name}.w"], db = conv3x3_backward(dy, w.params[f"{name}.w"], c_conv)
    if not norm:
        grads[f"{name}.b"] = db
    return dx


def decode(features, w: DecoderWeights, training: bool = True):
    """Run the decoder on an ``(H, W, C)`` feature image.

    Returns ``(rgb (H, W, 3), alpha (H, W), cache)``; ``cache`` is ``None``
    unless ``training``.
    """
    x = np.asarray(features, dtype=w.dtype)
    H, W, C = x.shape
    if C != w.in_channels:
        raise ShapeError(f"decoder expects {w.in_channels} channels, got {C}")
    f = 2 ** w.depth
    if H % f or W % f:
        raise ShapeError(f"image size {H}x{W} not divisible by {f}")
    norm = w.instance_norm
    layers = {}
    skips = [x]
    h = x
    for l in range(1, w.depth + 1):
        h = _block_forward(h, w, f"enc{l}", 2, norm, layers)
        skips.append(h)
    for l in range(w.depth, 0, -1):
        up = upsample2x_forward(h)
        cat = np.concatenate([up, skips[l - 1]], axis=2)
        layers[f"cat{l}"] = up.shape[2]
        h = _block_forward(cat, w, f"dec{l}", 1, norm, layers)
    pre_rgb, layers["head_rgb"] = conv1x1_forward(h, w.params["head_rgb.w"], w.params["head_rgb.b"])
    pre_a, layers["head_alpha"] = conv1x1_forward(h, w.params["head_alpha.w"], w.params["head_alpha.b"])
    rgb, _ = sigmoid_forward(pre_rgb)
    alpha, _ = sigmoid_forward(pre_a)
    alpha = alpha[..., 0]
    cache = ActivationCache(w.signature(), layers, rgb, alpha) if training else None
    return rgb, alpha, cache


def decode_backward(d_rgb, d_alpha, cache: ActivationCache | None, w: DecoderWeights):
    """Gradients ``(dL/dweights, dL/dfeatures)`` of a :func:`decode` call."""
    if cache is None or cache.signature != w.signature():
        raise CacheMismatch("decoder cache missing or produced with different weights layout")
    layers = cache.layers
    norm = w.instance_norm
    grads = {}
    d_pre_rgb = sigmoid_backward(np.asarray(d_rgb, dtype=w.dtype), cache.out_rgb)
    d_pre_a = sigmoid_backward(np.asarray(d_alpha, dtype=w.dtype), cache.out_alpha)[..., None]
    dh1, grads["head_rgb.w"], grads["head_rgb.b"] = conv1x1_backward(d_pre_rgb, w.params["head_rgb.w"], layers["head_rgb"])
    dh2, grads["head_alpha.w"], grads["head_alpha.b"] = conv1x1_backward(d_pre_a, w.params["head_alpha.w"], layers["head_alpha"])
    dh = dh1 + dh2
    d_skips = [None] * (w.depth + 1)
    for l in range(1, w.depth + 1):
        dcat = _block_backward(dh, w, f"dec{l}", norm, layers, grads)
        n_up = layers[f"cat{l}"]
        d_skips[l - 1] = dcat[..., n_up:]
        if l < w.depth:
            dh = upsample2x_backward(dcat[..., :n_up])
        else:
            d_deep = upsample2x_backward(dcat[..., :n_up])
    dh = d_deep
    for l in range(w.depth, 0, -1):
        if d_skips[l] is not None:
            dh = dh + d_skips[l]
        dh = _block_backward(dh, w, f"enc{l}", norm, layers, grads)
    d_x = dh + d_skips[0]
    return {k: grads[k] for k in w.params}, d_x


def composite_background(rgb, alpha, bg):
    """``rgb * alpha + (1 - alpha) * bg`` per pixel."""
    a = np.asarray(alpha, dtype=np.float64)[..., None]
    return np.asarray(rgb) * a + (1.0 - a) * np.asarray(bg, dtype=np.float64)


def composite_background_backward(d_out, rgb, alpha, bg):
    """Gradients wrt ``rgb`` and ``alpha`` of :func:`composite_background`."""
    a = np.asarray(alpha, dtype=np.float64)[..., None]
    d_rgb = d_out * a
    d_alpha = np.sum(d_out * (np.asarray(rgb) - np.asarray(bg, dtype=np.float64)), axis=-1)
    return d_rgb, d_alpha
