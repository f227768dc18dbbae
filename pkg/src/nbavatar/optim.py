"""Parameter groups, Adam and a finite-difference gradient checker."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import NaNGradient

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8

# Default learning rates; positions decay by gamma = 0.01 ** (1 / N) per step
LR = {
    "mu": 1.6e-4,
    "s": 5e-3,
    "q": 1e-3,
    "nt": 5e-4,
    "nt_color": 2.5e-3,
    "alpha": 5e-4,
    "decoder": 1e-3,
}


@dataclass
class ParamGroup:
    """One optimizer group over an array that is updated in place.

    ``value`` is shared with its owner (billboard set or decoder weights),
    so stepping the group updates the model.
    """

    name: str
    value: np.ndarray
    lr: float
    gamma: float = 1.0
    quaternion: bool = False
    min_value: float | None = None
    grad: np.ndarray = field(default=None)
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not isinstance(self.value, np.ndarray) or not self.value.flags.c_contiguous:
            raise ValueError("parameter buffers must be C-contiguous arrays updated in place")
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0


def check_finite(groups):
    for g in groups:
        if not np.all(np.isfinite(g.grad)):
            raise NaNGradient(g.name)


@njit(cache=True)
def _adam_update(value, grad, m, v, lr, c1, c2):
    for i in range(value.size):
        g = grad[i]
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g
        value[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + ADAM_EPS)


def adam_step(group: ParamGroup, t: int) -> ParamGroup:
    """One bias-corrected Adam update at iteration ``t >= 1``.

    Clears the gradient afterwards, renormalizes quaternion groups, clamps
    groups with a ``min_value`` and decays the learning rate by ``gamma``.
    """
    if t < 1:
        raise ValueError("Adam iterations are 1-based")
    check_finite([group])
    _adam_update(group.value.reshape(-1), group.grad.reshape(-1), group.m.reshape(-1), group.v.reshape(-1),
                 float(group.lr), 1.0 - BETA1 ** t, 1.0 - BETA2 ** t)
    if group.quaternion:
        group.value /= np.linalg.norm(group.value, axis=-1, keepdims=True)
    if group.min_value is not None:
        np.maximum(group.value, group.min_value, out=group.value)
    group.lr *= group.gamma
    group.zero_grad()
    return group


def fd_check(f, group: ParamGroup, n_probes: int = 20, h: float = 1e-4, rng=None) -> float:
    """Largest relative error between ``group.grad`` and central differences of ``f``.

    ``f`` takes no arguments and reads the current ``group.value``; probed
    entries are restored afterwards. Relative error is
    ``|a - d| / max(1e-8, |a| + |d|)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    flat = group.value.reshape(-1)
    gflat = group.grad.reshape(-1)
    worst = 0.0
    for i in rng.choice(flat.size, size=min(n_probes, flat.size), replace=False):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        fd = (fp - fm) / (2 * h)
        a = gflat[i]
        worst = max(worst, abs(a - fd) / max(1e-8, abs(a) + abs(fd)))
    return float(worst)
