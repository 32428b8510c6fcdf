from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .pruning import apply_mask


@dataclass
class KDConfig:
    alpha: float = 0.5
    temperature: float = 4.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def kd_loss(student_logits: ag.Tensor, teacher_logits: np.ndarray, labels, cfg: KDConfig) -> ag.Tensor:
    """``alpha * CE + (1 - alpha) * T^2 * KL(softmax(z_t/T) || softmax(z_s/T))``.

    The teacher side is a constant; the KL is averaged over the batch.
    """
    z_t = np.asarray(teacher_logits.data if isinstance(teacher_logits, ag.Tensor) else teacher_logits)
    if z_t.shape != student_logits.shape:
        raise ag.ShapeError(f"teacher logits {z_t.shape} vs student logits {student_logits.shape}")
    t = cfg.temperature
    ce = ag.cross_entropy(student_logits, labels)
    if cfg.alpha == 1.0:
        return ce
    inv_t = np.asarray(1.0 / t, dtype=student_logits.dtype)
    # Scale the teacher exactly as the student so identical logits give KL == 0.
    logp_t = ag.log_softmax_np(z_t.astype(student_logits.dtype) * inv_t)
    kl = ag.kl_div(student_logits * inv_t, logp_t)
    return cfg.alpha * ce + (1.0 - cfg.alpha) * t * t * kl


def kl_divergence(teacher_logits: np.ndarray, student_logits: np.ndarray, temperature: float = 1.0) -> float:
    """Batch-mean ``KL(softmax(z_t/T) || softmax(z_s/T))`` computed directly."""
    lt = ag.log_softmax_np(np.asarray(teacher_logits, np.float64) / temperature)
    ls = ag.log_softmax_np(np.asarray(student_logits, np.float64) / temperature)
    return float((np.exp(lt) * (lt - ls)).sum(axis=1).mean())


def kd_train_step(student, teacher, mask, x, y, optimizer, epoch: int, cfg: KDConfig, quant=None) -> float:
    """One distillation step; the teacher runs in float without recording."""
    if teacher.num_classes != student.num_classes:
        raise ValueError(f"teacher has {teacher.num_classes} classes, student {student.num_classes}")
    z_t = teacher.predict_logits(x)
    loss = kd_loss(student.forward(x, quant), z_t, y, cfg)
    ag.backward(loss)
    optimizer.step(epoch)
    if mask is not None:
        apply_mask(student.params, mask)
    return float(loss.data)


def function_shift(model_a, model_b, probe_batches) -> float:
    """Mean over probe samples of the L2 distance between the two models' logits.

    Models are callables mapping a float batch to logits (``predict_logits``).
    """
    dists = []
    for x in probe_batches:
        za = np.asarray(model_a(x), np.float64)
        zb = np.asarray(model_b(x), np.float64)
        if za.shape != zb.shape:
            raise ag.ShapeError(f"logit shapes differ: {za.shape} vs {zb.shape}")
        dists.append(np.linalg.norm((za - zb).reshape(len(za), -1), axis=1))
    if not dists:
        return 0.0
    return float(np.concatenate(dists).mean())
