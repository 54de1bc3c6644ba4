"""Distillation losses and their gradients.

Shapes follow ``(..., L, k)`` for distributions and logits and ``(..., L, H)``
for anchors. Each loss sums over levels and averages over any leading batch
dimension; the ``*_grad`` companions return gradients of that batch mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Tuple

import numpy as np

from hierkd.core.errors import TrainingError
from hierkd.core.models import LossWeights
from hierkd.sekd.scorer import softmax

EPS = 1e-12


def _batch_size(x: np.ndarray, core_dims: int) -> int:
    return int(np.prod(x.shape[:-core_dims])) if x.ndim > core_dims else 1


def kl_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """KL(p || q) along the last axis, with both sides floored at EPS inside the log."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    terms = np.where(p > 0, p * (np.log(np.maximum(p, EPS)) - np.log(np.maximum(q, EPS))), 0.0)
    return terms.sum(axis=-1)


def loss_hard(student_probs: np.ndarray, targets: np.ndarray) -> float:
    """Cross-entropy of the student against the teacher's hard labels, summed over levels."""
    p = np.take_along_axis(student_probs, targets[..., None], axis=-1)[..., 0]
    return float(-np.log(np.maximum(p, EPS)).sum() / _batch_size(student_probs, 2))


def loss_hard_grad(student_logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    p = softmax(student_logits)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    return (p - onehot) / _batch_size(student_logits, 2)


def loss_soft(teacher_logits: np.ndarray, student_logits: np.ndarray, temperature: float = 1.0) -> float:
    """KL between temperature-softened teacher and student distributions, summed over levels."""
    if temperature <= 0:
        raise TrainingError("temperature must be positive")
    kl = kl_divergence(softmax(teacher_logits, temperature), softmax(student_logits, temperature))
    return float(kl.sum() / _batch_size(student_logits, 2))


def loss_soft_grad(teacher_logits: np.ndarray, student_logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    diff = softmax(student_logits, temperature) - softmax(teacher_logits, temperature)
    return diff / (temperature * _batch_size(student_logits, 2))


def _project(anchors: np.ndarray, projector: np.ndarray) -> np.ndarray:
    # shared (H, H) or per-level (L, H, H)
    if projector.ndim == 2:
        return anchors @ projector.T
    levels, hidden = anchors.shape[-2:]
    flat = anchors.reshape(-1, levels, hidden)
    return np.einsum("lij,blj->bli", projector, flat).reshape(anchors.shape)


def loss_feat(student_anchors: np.ndarray, teacher_anchors: np.ndarray, projector: np.ndarray) -> float:
    """Squared distance between projected student anchors and teacher anchors, summed over levels."""
    r = _project(student_anchors, projector) - teacher_anchors
    return float((r**2).sum() / _batch_size(student_anchors, 2))


def loss_feat_grad(
    student_anchors: np.ndarray,
    teacher_anchors: np.ndarray,
    projector: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (d/d student_anchors, d/d projector)."""
    n = _batch_size(student_anchors, 2)
    r = _project(student_anchors, projector) - teacher_anchors
    levels, hidden = student_anchors.shape[-2:]
    r_flat = r.reshape(-1, levels, hidden)
    s_flat = student_anchors.reshape(-1, levels, hidden)
    if projector.ndim == 2:
        d_anchor = 2.0 * r @ projector
        d_proj = 2.0 * np.einsum("bli,blj->ij", r_flat, s_flat)
    else:
        d_anchor = 2.0 * np.einsum("lij,bli->blj", projector, r_flat).reshape(r.shape)
        d_proj = 2.0 * np.einsum("bli,blj->lij", r_flat, s_flat)
    return d_anchor / n, d_proj / n


@dataclass
class LossParts:
    hard: float
    soft: float
    feat: float

    def as_dict(self) -> dict:
        return {"loss_hard": self.hard, "loss_soft": self.soft, "loss_feat": self.feat}


def loss_total(parts: LossParts, weights: LossWeights) -> float:
    return weights.lambda_hard * parts.hard + weights.lambda_soft * parts.soft + weights.lambda_feat * parts.feat


@dataclass
class ObjectiveGrads:
    logits: np.ndarray
    anchors: np.ndarray
    projector: np.ndarray


def distill_objective(
    student_logits: np.ndarray,
    student_anchors: np.ndarray,
    teacher_logits: np.ndarray,
    teacher_anchors: np.ndarray,
    teacher_labels: np.ndarray,
    projector: np.ndarray,
    weights: LossWeights,
) -> Tuple[LossParts, ObjectiveGrads]:
    """Weighted hard + soft + feature loss and its gradients w.r.t. the student outputs and projector."""
    T = weights.kd_temperature
    parts = LossParts(
        hard=loss_hard(softmax(student_logits), teacher_labels),
        soft=loss_soft(teacher_logits, student_logits, T),
        feat=loss_feat(student_anchors, teacher_anchors, projector),
    )
    d_anchor, d_proj = loss_feat_grad(student_anchors, teacher_anchors, projector)
    d_logits = weights.lambda_hard * loss_hard_grad(student_logits, teacher_labels)
    if weights.lambda_soft:
        d_logits = d_logits + weights.lambda_soft * loss_soft_grad(teacher_logits, student_logits, T)
    return parts, ObjectiveGrads(d_logits, weights.lambda_feat * d_anchor, weights.lambda_feat * d_proj)


def gradient_check(
    fn: Callable[[], float],
    array: np.ndarray,
    indices: Iterable[Tuple[int, ...]],
    eps: float = 1e-5,
) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. selected entries of ``array`` (perturbed in place)."""
    out = []
    for idx in indices:
        original = array[idx]
        array[idx] = original + eps
        plus = fn()
        array[idx] = original - eps
        minus = fn()
        array[idx] = original
        out.append((plus - minus) / (2 * eps))
    return np.asarray(out)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from dominating."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
