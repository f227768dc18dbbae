"""A short training run on a tiny synthetic dataset.

Run with ``python demos/demo_train_small.py [iterations]`` (default 300).
It writes a held-out prediction and its ground truth as PPM files to
``demos/out/``.
"""
import sys
from pathlib import Path

import numpy as np

from nbavatar import io
from nbavatar.mesh import polygon_frames
from nbavatar.synth import make_dataset, psnr
from nbavatar.trainer import TrainConfig, evaluate, predict, train

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 300
out = Path(__file__).resolve().parent / "out"
out.mkdir(exist_ok=True)

# %% Data: a poked sphere seen by six cameras; camera 3 is held out
ds = make_dataset("sphere", subdiv=1, frames=8, n_cams=6, width=64, height=64, seed=0)
print(f"{ds.n_frames} frames x {len(ds.cameras)} cameras, held out {ds.test_cams}")

# %% Train
cfg = TrainConfig(width=64, height=64, iters=iters, log_every=max(1, iters // 6), eval_every=iters)
state, rows = train(cfg, ds, log=lambda r: print({k: round(v, 4) if isinstance(v, float) else v
                                                   for k, v in r.items()}))
print("held-out:", {k: round(v, 3) for k, v in evaluate(state, ds).items()})

# %% Look at one held-out view
f, c = ds.n_frames // 2, ds.test_cams[0]
pred, alpha = predict(state, polygon_frames(ds.posed_mesh(f)), ds.cameras[c])
gt = ds.image(f, c) * ds.mask(f, c)[..., None]
io.write_ppm(out / "pred.ppm", np.clip(pred, 0, 1))
io.write_ppm(out / "gt.ppm", gt)
print(f"frame {f} camera {c}: PSNR {psnr(np.clip(pred, 0, 1), gt):.2f} dB -> {out}")
