"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 4-6 train the toy avatar twelve times (four variants, three seeds,
5000 iterations each); results are cached on disk by source digest, see
``runs.py``. Criterion 7 always trains from scratch.
"""
import os
import statistics
import subprocess
import sys
import time

import numpy as np
import pytest

import runs
from nbavatar import quaternion as quat
from nbavatar.anchor import PosedBillboards
from nbavatar.checks import TOLERANCES, front_camera, gradient_suite, oracle_suite, random_scene
from nbavatar.losses import dice_loss, knn_reg, mse_loss
from nbavatar.optim import ParamGroup, adam_step
from nbavatar.raster import render, set_threads
from nbavatar.synth import write_dataset

pytestmark = pytest.mark.acceptance


def verdict(report, capsys, number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    report[number] = line
    with capsys.disabled():
        print(f"\n{line}")
    assert ok, line


@pytest.fixture(scope="module")
def toy_runs():
    return {(v, s): runs.run(v, s) for v in runs.VARIANTS for s in runs.SEEDS}


def median_of(toy_runs, variant, key):
    return statistics.median(toy_runs[(variant, s)][key] for s in runs.SEEDS)


# ---------------------------------------------------------------- 1

def test_criterion_1_oracle_equivalence(acceptance_report, capsys):
    import numba

    previous = numba.get_num_threads()
    set_threads(1)
    try:
        res = oracle_suite(n_scenes=100, max_billboards=64, size=64, seed=0)
    finally:
        set_threads(previous)
    ok = res["max_abs_diff"] <= 1e-5 and res["seconds"] < 60
    verdict(acceptance_report, capsys, 1, ok,
            f"tiled vs reference on 100 scenes: max abs diff {res['max_abs_diff']:.2e} (<= 1e-5), "
            f"{res['seconds']:.1f} s single-threaded (< 60 s)")


# ---------------------------------------------------------------- 2

def test_criterion_2_gradient_suite(acceptance_report, capsys):
    expected = {"nt": 1e-3, "alpha_logit": 1e-3, "mu_w": 1e-2, "s_w": 1e-2, "q_w": 1e-2, "decoder_layers": 1e-4,
                "decoder_full": 1e-3, "anchor": 1e-6}
    res = gradient_suite(seed=0, n_scenes=50)
    fam = res["families"]
    ok = (all(fam[k] < tol for k, tol in expected.items()) and res["seconds"] < 300
          and all(TOLERANCES[k] == v for k, v in expected.items()))
    errs = ", ".join(f"{k} {fam[k]:.1e}" for k in expected)
    verdict(acceptance_report, capsys, 2, ok, f"max rel errs: {errs}; {res['seconds']:.1f} s (< 300 s)")


# ---------------------------------------------------------------- 3

def test_criterion_3_permutation_and_equivariance(acceptance_report, capsys):
    rng = np.random.default_rng(0)
    cam = front_camera(64)
    identical = True
    worst = 0.0
    for _ in range(10):
        scene = random_scene(rng, int(rng.integers(2, 64)))
        f, a = render(scene, cam)
        f2, a2 = render(scene.subset(rng.permutation(len(scene))), cam)
        identical &= bool(np.array_equal(f, f2) and np.array_equal(a, a2))

        qQ = quat.random_unit(rng)
        Q = quat.to_matrix(qQ)
        shift = rng.normal(0, 1, 3)
        moved = PosedBillboards(scene.mu_w @ Q.T + shift, scene.s_w,
                                quat.multiply(np.broadcast_to(qQ, scene.q_w.shape), scene.q_w), scene.nt,
                                scene.alpha_logit)
        f0, a0 = render(scene, cam, early_termination=False)
        f3, a3 = render(moved, cam.transformed(Q, shift), early_termination=False)
        worst = max(worst, float(np.abs(f3 - f0).max()), float(np.abs(a3 - a0).max()))
    verdict(acceptance_report, capsys, 3, identical and worst < 1e-6,
            f"shuffled renders bit-identical: {identical}; rigid scene+camera max diff {worst:.1e} (< 1e-6)")


# ---------------------------------------------------------------- 4

def test_criterion_4_toy_convergence(acceptance_report, capsys, toy_runs):
    gains = [toy_runs[("full", s)]["final_psnr"] - toy_runs[("full", s)]["init_psnr"] for s in runs.SEEDS]
    gain = statistics.median(gains)
    ssim_final = median_of(toy_runs, "full", "final_ssim")
    slowest = max(toy_runs[("full", s)]["seconds"] for s in runs.SEEDS)
    ok = gain >= 10.0 and ssim_final >= 0.8 and slowest <= 1800
    verdict(acceptance_report, capsys, 4, ok,
            f"median held-out PSNR gain {gain:.2f} dB (>= 10), median final SSIM {ssim_final:.3f} (>= 0.8), "
            f"slowest run {slowest / 60:.1f} min (<= 30)")


# ---------------------------------------------------------------- 5

def test_criterion_5_ablation_direction(acceptance_report, capsys, toy_runs):
    full = median_of(toy_runs, "full", "final_psnr")
    no_dnr = median_of(toy_runs, "no_dnr", "final_psnr")
    no_dice = median_of(toy_runs, "no_dice", "final_psnr")
    dice_on = median_of(toy_runs, "full", "dice")
    dice_off = median_of(toy_runs, "no_dice", "dice")
    ok = full >= no_dnr and full >= no_dice and dice_on >= 0.9 and dice_on > dice_off
    verdict(acceptance_report, capsys, 5, ok,
            f"median PSNR full {full:.2f} vs w/o DNR {no_dnr:.2f} vs w/o L_NB {no_dice:.2f}; "
            f"billboard Dice {dice_on:.3f} (>= 0.9) vs {dice_off:.3f} without L_NB")


# ---------------------------------------------------------------- 6

def test_criterion_6_channel_ablation(acceptance_report, capsys, toy_runs):
    six = median_of(toy_runs, "full", "final_psnr")
    three = median_of(toy_runs, "channels3", "final_psnr")
    verdict(acceptance_report, capsys, 6, six >= three,
            f"median held-out PSNR 6 channels {six:.2f} vs 3 channels {three:.2f}")


# ---------------------------------------------------------------- 7

def _cli(*args, threads):
    env = dict(os.environ)
    env.pop("NUMBA_NUM_THREADS", None)
    cmd = [sys.executable, "-m", "nbavatar", *args, "--threads", str(threads)]
    res = subprocess.run(cmd, capture_output=True, text=True, env=env)
    assert res.returncode == 0, res.stderr
    return res


def test_criterion_7_reproducibility(acceptance_report, capsys, tmp_path):
    data = tmp_path / "data"
    write_dataset(runs.toy_dataset(), data)
    start = time.perf_counter()
    common = ["train", "--data", str(data), "--iters", "1000", "--seed", "0"]
    _cli(*common, "--out", str(tmp_path / "a"), threads=1)
    _cli(*common, "--out", str(tmp_path / "b"), threads=1)
    _cli(*common, "--out", str(tmp_path / "c"), threads=8)
    _cli(*common, "--stop-at", "500", "--out", str(tmp_path / "half"), threads=1)
    _cli("train", "--data", str(data), "--resume", str(tmp_path / "half" / "checkpoint.nbav"),
         "--out", str(tmp_path / "resumed"), threads=8)
    ckpt = {k: (tmp_path / k / "checkpoint.nbav").read_bytes() for k in ("a", "b", "c", "resumed")}
    same_runs = ckpt["a"] == ckpt["b"]
    same_threads = ckpt["a"] == ckpt["c"]
    same_resume = ckpt["a"] == ckpt["resumed"]
    verdict(acceptance_report, capsys, 7, same_runs and same_threads and same_resume,
            f"checkpoints at iteration 1000 bit-identical: repeat run {same_runs}, threads 1 vs 8 {same_threads}, "
            f"500 + save/load + 500 {same_resume} ({time.perf_counter() - start:.0f} s)")


# ---------------------------------------------------------------- 8

def test_criterion_8_loss_units(acceptance_report, capsys):
    rng = np.random.default_rng(0)
    mask = (rng.uniform(size=(32, 32)) > 0.5).astype(float)
    checks = {}
    checks["Dice(A,A)=0"] = dice_loss(mask, mask)[0] < 1e-6
    checks["Dice(A,empty)=1"] = abs(dice_loss(np.zeros_like(mask), mask)[0] - 1) < 1e-6
    img = rng.uniform(0, 1, (16, 16, 3))
    checks["MSE(x,x)=0"] = mse_loss(img, img)[0] == 0 and not mse_loss(img, img)[1].any()
    checks["MSE(0,1)=1"] = mse_loss(np.zeros_like(img), np.ones_like(img))[0] == 1.0
    n = 8
    same = PosedBillboards(np.zeros((n, 3)), np.full((n, 2), 0.2), np.tile([1.0, 0, 0, 0], (n, 1)),
                           np.zeros((n, 2, 2, 6)), np.zeros((n, 2, 2)))
    checks["KNN identical=0"] = knn_reg(same)[0] == 0
    x = np.array([1.0])
    group = ParamGroup("x", x, lr=0.1)
    xr, m, v = 1.0, 0.0, 0.0
    trace, agree = [], True
    for t in range(1, 101):
        group.grad[0] = 2 * x[0]
        adam_step(group, t)
        g = 2 * xr
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        xr -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        agree &= abs(x[0] - xr) < 1e-12
        trace.append(abs(x[0]))
    checks["Adam x^2 matches reference recurrence"] = agree
    checks["Adam x^2 |x|<0.01"] = trace[-1] < 0.01
    # momentum carries the iterate past zero once; reported, not asserted (the recurrence does the same)
    first_rise = next((i + 1 for i in range(1, 100) if trace[i] > trace[i - 1]), None)
    ok = all(checks.values())
    detail = ", ".join(f"{k} {'ok' if v else 'FAIL'}" for k, v in checks.items())
    verdict(acceptance_report, capsys, 8, ok, f"{detail} (final |x| {trace[-1]:.4f}, first |x| increase at step "
                                              f"{first_rise})")
