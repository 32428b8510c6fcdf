"""Global unstructured magnitude pruning with a fixed mask."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag

QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class PruneMask:
    masks: dict[str, np.ndarray]  # bool, aligned with the masked parameters
    rho: float
    gamma: float

    @property
    def total(self) -> int:
        return sum(m.size for m in self.masks.values())

    def kept(self) -> int:
        return int(sum(np.count_nonzero(m) for m in self.masks.values()))

    def sparsity(self) -> float:
        return 1.0 - self.kept() / self.total

    def pack(self, name: str) -> bytes:
        return np.packbits(self.masks[name].ravel(), bitorder="little").tobytes()

    @staticmethod
    def unpack(buf: bytes, shape) -> np.ndarray:
        n = int(np.prod(shape))
        bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), count=n, bitorder="little")
        return bits.astype(bool).reshape(shape)

    @classmethod
    def ones(cls, params: dict) -> "PruneMask":
        return cls({k: np.ones(p.shape, bool) for k, p in params.items()}, 0.0, 0.0)


def _arrays(params: dict) -> dict[str, np.ndarray]:
    return {k: (p.data if isinstance(p, ag.Tensor) else np.asarray(p)) for k, p in params.items()}


def _check_rho(rho: float):
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")


def prune_count(n: int, rho: float) -> int:
    # Guard against 0.3 * 10 == 3.0000000000000004 style ceil overshoot.
    return min(n, math.ceil(round(rho * n, 9)))


def compute_global_threshold(params: dict, rho: float) -> float:
    """Smallest magnitude that survives when the ``ceil(rho * n)`` smallest
    magnitudes, pooled over all layers, are removed.  ``rho = 0`` gives 0."""
    _check_rho(rho)
    arrays = _arrays(params)
    if not arrays:
        raise ValueError("no maskable parameters")
    mags = np.concatenate([np.abs(a).ravel() for a in arrays.values()])
    k = prune_count(mags.size, rho)
    if k == 0:
        return 0.0
    return float(np.partition(mags, k)[k])


def build_mask(params: dict, gamma: float, keep: int | None = None, rho: float | None = None) -> PruneMask:
    """``M = |W| >= gamma``.  With ``keep`` given, weights tied at ``gamma`` are
    kept in (layer, flat index) order until exactly ``keep`` survive."""
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    arrays = _arrays(params)
    masks = {k: np.abs(a) > gamma for k, a in arrays.items()}
    n_above = sum(int(np.count_nonzero(m)) for m in masks.values())
    budget = None if keep is None else keep - n_above
    for k, a in arrays.items():
        ties = np.abs(a) == gamma
        if budget is None:
            masks[k] |= ties
            continue
        flat = np.flatnonzero(ties.ravel())
        take = flat[:max(budget, 0)]
        budget -= len(take)
        m = masks[k].ravel()
        m[take] = True
        masks[k] = m.reshape(a.shape)
    total = sum(a.size for a in arrays.values())
    kept = sum(int(np.count_nonzero(m)) for m in masks.values())
    return PruneMask(masks, rho if rho is not None else 1.0 - kept / total, float(gamma))


def global_magnitude_mask(params: dict, rho: float) -> PruneMask:
    """Threshold plus tie-broken mask retaining exactly ``n - ceil(rho * n)`` weights."""
    gamma = compute_global_threshold(params, rho)
    n = sum(np.size(a) for a in _arrays(params).values())
    return build_mask(params, gamma, keep=n - prune_count(n, rho), rho=rho)


def apply_mask(params: dict, mask: PruneMask):
    """In place ``W <- M * W`` (pruned entries become +0.0)."""
    for k, m in mask.masks.items():
        p = params[k]
        if p.shape != m.shape:
            raise ag.ShapeError(f"mask for {k} has shape {m.shape}, parameter has {p.shape}")
        p.data = np.where(m, p.data, np.zeros((), p.data.dtype))


def masked_train_step(model, mask: PruneMask | None, x, y, optimizer, epoch: int, quant=None) -> float:
    """Cross-entropy step followed by mask re-application."""
    loss = ag.cross_entropy(model.forward(x, quant), y)
    ag.backward(loss)
    optimizer.step(epoch)
    if mask is not None:
        apply_mask(model.params, mask)
    return float(loss.data)


@dataclass
class SaliencyReport:
    scores: dict[str, np.ndarray]
    quantiles: dict[float, float]


def taylor_saliency(params: dict) -> SaliencyReport:
    """First-order saliency ``|g * W|`` per weight; diagnostic only."""
    grads = {k: p.grad for k, p in params.items()}
    if any(g is None for g in grads.values()) or not any(np.any(g) for g in grads.values()):
        raise ValueError("taylor_saliency needs gradients from a backward pass")
    scores = {k: np.abs(grads[k] * p.data) for k, p in params.items()}
    pooled = np.concatenate([s.ravel() for s in scores.values()])
    return SaliencyReport(scores, {q: float(np.quantile(pooled, q)) for q in QUANTILES})


def nonzero_count(params: dict) -> int:
    return int(sum(np.count_nonzero(a) for a in _arrays(params).values()))


def in_sparse_set(params: dict, rho: float) -> bool:
    n = sum(np.size(a) for a in _arrays(params).values())
    return nonzero_count(params) <= (1.0 - rho) * n + 1
