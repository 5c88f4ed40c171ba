"""Classification metrics and gradient saliency maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .nn import ModelParams, backward, classifier_logits, encoder_forward
from .numerics import ShapeError, softmax_rows


class UndefinedMetricError(ValueError):
    """A metric has no defined value for the given inputs (e.g. one-class AUROC)."""


def auroc_binary(scores, positives) -> float:
    """Probability that a random positive outscores a random negative; ties count 1/2.

    Computed from average ranks (Mann-Whitney U), which equals exhaustive
    positive/negative pair counting.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise ShapeError("scores and positives must be 1-D of equal length")
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUROC needs both classes (positives={n_pos}, negatives={n_neg})")
    ranks = rankdata(scores, method="average")
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsReport:
    per_class_auroc: list[float | None]
    per_class_sensitivity: list[float | None]
    per_class_specificity: list[float | None]
    macro_auroc: float | None
    accuracy: float
    sensitivity: float
    specificity: float

    def as_dict(self) -> dict:
        return {
            "auroc": self.macro_auroc,
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
        }


def _mean_defined(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def predict(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    return np.argmax(scores, axis=1)


def metrics_report(scores: np.ndarray, true_labels) -> MetricsReport:
    scores = np.asarray(scores)
    true_labels = np.asarray(true_labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise ValueError("metrics need a non-empty n x K score matrix")
    if true_labels.shape != (scores.shape[0],):
        raise ShapeError(f"{true_labels.shape[0]} labels for {scores.shape[0]} score rows")
    k = scores.shape[1]
    if ((true_labels < 0) | (true_labels >= k)).any():
        raise ValueError(f"labels must lie in [0, {k})")
    pred = predict(scores)
    aurocs, sens, spec = [], [], []
    for c in range(k):
        is_c = true_labels == c
        try:
            aurocs.append(auroc_binary(scores[:, c], is_c))
        except UndefinedMetricError:
            aurocs.append(None)
        tp = int(np.sum(is_c & (pred == c)))
        fn = int(np.sum(is_c & (pred != c)))
        tn = int(np.sum(~is_c & (pred != c)))
        fp = int(np.sum(~is_c & (pred == c)))
        sens.append(tp / (tp + fn) if tp + fn else None)
        spec.append(tn / (tn + fp) if tn + fp else None)
    return MetricsReport(
        per_class_auroc=aurocs,
        per_class_sensitivity=sens,
        per_class_specificity=spec,
        macro_auroc=_mean_defined(aurocs),
        accuracy=float(np.mean(pred == true_labels)),
        sensitivity=_mean_defined(sens),
        specificity=_mean_defined(spec),
    )


def predict_proba(params: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        act, _ = encoder_forward(params, images[start : start + batch_size])
        logits, _ = classifier_logits(params, act)
        out.append(softmax_rows(logits))
    return np.concatenate(out) if out else np.zeros((0, params.num_classes), dtype=np.float32)


def saliency_gradient(params: ModelParams, image: np.ndarray) -> tuple[np.ndarray, int]:
    """Gradient of the top class logit w.r.t. the model input (C x H x W), plus that class."""
    if image.ndim != 3:
        raise ShapeError(f"expected a C x H x W image, got {image.shape}")
    act, trace = encoder_forward(params, image[None])
    logits, pooled = classifier_logits(params, act)
    top = int(np.argmax(logits[0]))
    trace.classifier = (pooled, softmax_rows(logits))
    upstream = np.zeros_like(logits)
    upstream[0, top] = 1.0
    grads = backward(trace, params, {"logits": upstream}, input_grad=True)
    return grads["input"][0], top


def saliency_map(params: ModelParams, image: np.ndarray) -> np.ndarray:
    """H x W map in [0, 1]: channel-max of |gradient|, min-max normalized.

    An all-zero gradient gives an all-zero map; a constant non-zero map becomes all ones.
    """
    grad, _ = saliency_gradient(params, image)
    mag = np.abs(grad.astype(np.float64)).max(axis=0)
    lo, hi = mag.min(), mag.max()
    if hi - lo > 0:
        return (mag - lo) / (hi - lo)
    return np.ones_like(mag) if hi > 0 else np.zeros_like(mag)
