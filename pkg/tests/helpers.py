"""Shared fixtures: gradient checking and tiny trained models."""
from __future__ import annotations

import numpy as np

from pqdk import autograd as ag
from pqdk.autograd import Tensor
from pqdk.nn import Model

from oracles import finite_difference


class _PatternHooks:
    """Records the on/off pattern of every ReLU site and each 2x2 pooling argmax."""

    def __init__(self):
        self.parts = []

    def weight(self, name, p):
        return p

    def activation(self, site, t):
        d = t.data
        self.parts.append((d > 0).tobytes())
        if d.ndim == 4 and d.shape[2] >= 2:
            h, w = d.shape[2] // 2 * 2, d.shape[3] // 2 * 2
            win = d[:, :, :h, :w].reshape(*d.shape[:2], h // 2, 2, w // 2, 2)
            self.parts.append(win.transpose(0, 1, 2, 4, 3, 5).reshape(*d.shape[:2], h // 2, w // 2, 4)
                              .argmax(-1).tobytes())
        return t

    def key(self):
        return b"".join(self.parts)


def model64(arch, in_shape, k, seed):
    model = Model.create(arch, in_shape, k, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1000)
    for p in model.params.values():
        # Nonzero biases keep ReLU inputs away from exact zeros.
        extra = rng.normal(scale=0.1, size=p.shape) if p.data.ndim == 1 else 0.0
        p.data = (p.data + extra).astype(np.float64)
        p.zero_grad()
    return model


def gradcheck(model, x, y, coords_per_param=12, h=1e-3, seed=0):
    """Compare analytic gradients against central differences at sampled coordinates.

    A coordinate whose ``±h`` stencil changes any ReLU or pooling decision
    straddles a kink, where the loss is not differentiable; it is skipped and
    counted.  Returns ``(max relative error, checked, skipped)``.
    """
    x = Tensor(np.asarray(x, np.float64))
    ag.backward(ag.cross_entropy(model.forward(x), y))
    analytic = {k: p.grad.copy() for k, p in model.params.items()}

    def pattern():
        hooks = _PatternHooks()
        with ag.no_grad():
            model.forward(x, hooks)
        return hooks.key()

    def f():
        with ag.no_grad():
            return float(ag.cross_entropy(model.forward(x), y).data)

    base = pattern()
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    for name, p in model.params.items():
        flat = p.data.reshape(-1)
        for j in rng.choice(flat.size, size=min(coords_per_param, flat.size), replace=False):
            old = flat[j]
            flat[j] = old + h
            up = pattern()
            flat[j] = old - h
            down = pattern()
            flat[j] = old
            if up != base or down != base:
                skipped += 1
                continue
            num = finite_difference(f, flat, j, h)
            a = analytic[name].reshape(-1)[j]
            scale = max(abs(a), abs(num))
            err = abs(a - num) if scale < 1e-6 else abs(a - num) / scale
            worst = max(worst, err)
            checked += 1
    return worst, checked, skipped


def random_network(seed):
    """A small random network: SmallConvNet or MLP with random input size and class count."""
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 6))
    if seed % 2 == 0:
        side = int(rng.choice([4, 8]))
        model = model64("smallconv", (int(rng.integers(1, 4)), side, side), k, seed)
    else:
        model = model64("mlp", (1, int(rng.integers(2, 5)), int(rng.integers(2, 5))), k, seed)
    n = int(rng.integers(2, 5))
    x = rng.uniform(size=(n, *model.in_shape))
    y = rng.integers(0, k, size=n)
    return model, x, y


ACCEPTANCE_LINES: list[str] = []


def acceptance(number: int, ok: bool, detail: str) -> bool:
    """Record and print one pass/fail line for an acceptance criterion."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
