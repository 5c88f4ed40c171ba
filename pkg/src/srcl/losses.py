"""Training objectives with closed-form gradients.

All values and gradients are computed in float64; gradients are returned in
the dtype of the corresponding input.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import NORM_EPS, ShapeError

UNLABELED = -1


class ContractError(ValueError):
    """Inputs violate a loss precondition (e.g. non-unit embeddings)."""


@dataclass
class LossBundle:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def gram_matrix(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a @ a.T


def relation_matrix(g: np.ndarray) -> np.ndarray:
    """Row-wise L2-normalized Gram matrix; near-zero rows pass through unchanged."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ShapeError(f"relation matrix needs a square input, got {g.shape}")
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    return g / np.where(norms < NORM_EPS, 1.0, norms)


def src_loss(student: np.ndarray, teacher: np.ndarray) -> LossBundle:
    """Sample-relation consistency between student and teacher activation maps.

    value = ||R(S S^T) - R(T T^T)||_F^2 / N. The teacher is a constant; the
    returned gradient is with respect to the student activations only.
    """
    if student.shape != teacher.shape or student.ndim != 2:
        raise ShapeError(f"student {student.shape} and teacher {teacher.shape} must match")
    s = np.asarray(student, dtype=np.float64)
    n = s.shape[0]
    g_s = s @ s.T
    norms = np.linalg.norm(g_s, axis=1, keepdims=True)
    small = norms < NORM_EPS
    safe = np.where(small, 1.0, norms)
    r_s = g_s / safe
    r_t = relation_matrix(gram_matrix(teacher))
    diff = r_s - r_t
    value = float(np.sum(diff * diff) / n)

    d_r = 2.0 * diff / n
    d_g = (d_r - r_s * np.sum(r_s * d_r, axis=1, keepdims=True)) / safe
    d_g = np.where(small, d_r, d_g)
    d_s = (d_g + d_g.T) @ s
    return LossBundle(value, {"student": d_s.astype(student.dtype, copy=False)})


def positive_mask(labels: np.ndarray) -> np.ndarray:
    """Boolean 2N x 2N mask of positives for views ordered (2k, 2k+1) per original k.

    Every view's augmentation partner is positive. Labeled views additionally
    take every other labeled view with the same class; unlabeled views keep
    only their partner.
    """
    labels = np.asarray(labels)
    view_labels = np.repeat(labels, 2)
    idx = np.arange(view_labels.size)
    partner = idx ^ 1
    mask = np.zeros((idx.size, idx.size), dtype=bool)
    mask[idx, partner] = True
    labeled = view_labels != UNLABELED
    same = (view_labels[:, None] == view_labels[None, :]) & labeled[:, None] & labeled[None, :]
    mask |= same
    np.fill_diagonal(mask, False)
    return mask


def supcon_loss(
    embeddings: np.ndarray,
    labels,
    tau: float,
    check_unit: bool = True,
    unit_tol: float = 1e-5,
) -> LossBundle:
    """Supervised contrastive loss over 2N views, averaged over the 2N anchors.

    For anchor i with positives P(i) and candidates A(i) = all views but i:
        l_i = -1/|P(i)| * sum_p log( exp(z_i.z_p/tau) / sum_a exp(z_i.z_a/tau) )
    Rows 2k and 2k+1 are the two views of original k; ``labels`` holds one
    class id (or ``UNLABELED``) per original. Rows must be unit norm, except
    all-zero rows, which row normalization leaves in place for zero inputs.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if z.ndim != 2 or z.shape[0] % 2 or z.shape[0] != 2 * labels.size:
        raise ShapeError(f"need 2N rows for {labels.size} originals, got {z.shape}")
    if check_unit:
        norms = np.linalg.norm(z, axis=1)
        bad = (np.abs(norms - 1.0) > unit_tol) & (norms > 0.0)
        if bad.any():
            raise ContractError(f"embedding rows {np.flatnonzero(bad).tolist()} are not unit norm")
    m = z.shape[0]
    pos = positive_mask(labels)
    logits = (z @ z.T) / tau
    np.fill_diagonal(logits, -np.inf)
    row_max = np.max(logits, axis=1, keepdims=True)
    e = np.exp(logits - row_max)
    denom = np.sum(e, axis=1, keepdims=True)
    log_prob = logits - row_max - np.log(denom)
    n_pos = pos.sum(axis=1)
    per_anchor = -np.where(pos, log_prob, 0.0).sum(axis=1) / n_pos
    value = float(per_anchor.mean())

    softmax = e / denom
    coef = (softmax - pos / n_pos[:, None]) / m
    d_z = (coef + coef.T) @ z / tau
    return LossBundle(value, {"embeddings": d_z.astype(embeddings.dtype, copy=False)})


def mse_supervised_loss(probabilities: np.ndarray, targets: np.ndarray) -> LossBundle:
    """Mean over samples of the squared L2 distance to one-hot targets."""
    if probabilities.shape != targets.shape or probabilities.ndim != 2:
        raise ShapeError(f"predictions {probabilities.shape} and targets {targets.shape} differ")
    p = np.asarray(probabilities, dtype=np.float64)
    diff = p - np.asarray(targets, dtype=np.float64)
    n = p.shape[0]
    value = float(np.sum(diff * diff) / n)
    grad = 2.0 * diff / n
    return LossBundle(value, {"probabilities": grad.astype(probabilities.dtype, copy=False)})


def cross_entropy_loss(probabilities: np.ndarray, targets: np.ndarray) -> LossBundle:
    """Mean cross-entropy; the gradient is returned w.r.t. the pre-softmax logits."""
    if probabilities.shape != targets.shape or probabilities.ndim != 2:
        raise ShapeError(f"predictions {probabilities.shape} and targets {targets.shape} differ")
    p = np.asarray(probabilities, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    n = p.shape[0]
    value = float(-np.sum(t * np.log(np.clip(p, 1e-12, None))) / n)
    grad = (p - t) / n
    return LossBundle(value, {"logits": grad.astype(probabilities.dtype, copy=False)})


def one_hot(labels, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out
