"""The tiled rasterizer next to the all-pairs reference, and one gradient check.

Run with ``python demos/demo_raster.py``.
"""
import time

import numpy as np

from nbavatar.checks import front_camera, random_scene
from nbavatar.raster import render, render_backward, render_reference

rng = np.random.default_rng(7)
cam = front_camera(64)
scene = random_scene(rng, 40)

# %% Forward: tiled vs reference
render(scene, cam)  # compile
t0 = time.perf_counter()
feat, alpha = render(scene, cam, early_termination=False)
t1 = time.perf_counter()
feat_ref, alpha_ref = render_reference(scene, cam)
t2 = time.perf_counter()
print(f"tiled {1e3 * (t1 - t0):.1f} ms, reference {1e3 * (t2 - t1):.1f} ms")
print(f"max |feature diff| {np.abs(feat - feat_ref).max():.2e}, max |alpha diff| {np.abs(alpha - alpha_ref).max():.2e}")
print(f"covered pixels: {(alpha > 0.5).mean():.1%}")

# %% Backward: d(sum of features)/d(texel) against a central difference
feat, alpha, cache = render(scene, cam, return_cache=True)
grads = render_backward(np.ones_like(feat), np.zeros_like(alpha), cache)
i = int(np.argmax(np.abs(grads.nt).reshape(len(scene), -1).max(axis=1)))
idx = (i, *(int(j) for j in np.unravel_index(np.argmax(np.abs(grads.nt[i])), grads.nt[i].shape)))
h = 1e-6
old = scene.nt[idx]
scene.nt[idx] = old + h
fp = render(scene, cam)[0].sum()
scene.nt[idx] = old - h
fm = render(scene, cam)[0].sum()
scene.nt[idx] = old
print(f"texel {idx}: analytic {grads.nt[idx]:.6f}, central difference {(fp - fm) / (2 * h):.6f}")
