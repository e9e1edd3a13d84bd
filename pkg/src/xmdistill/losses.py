"""Distillation and segmentation losses.

Point features are (N, C) rows; class distributions are (N, C_cls) rows.
All losses return scalar tensors and are differentiable end to end.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .geometry import CorrespondenceMap, sample_image_features

KL_EPS = 1e-8


def loss_infonce(f: Tensor, g: Tensor, temperature: float) -> Tensor:
    """Contrastive alignment of paired pooled features, summed over pairs.

    Row i of g is attracted to row i of f and repelled from every other
    row; the softmax denominator runs over all pairs including the match.
    Rows are expected L2-normalized by the caller.
    """
    if f.shape != g.shape:
        raise ShapeError("paired feature matrices must share shape")
    k = f.shape[0]
    if k < 2:
        raise ValueError("InfoNCE needs at least 2 pairs (no negatives otherwise)")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = ad.matmul(g, ad.transpose(f)) * (1.0 / temperature)
    logp = ad.log_softmax(logits, axis=1)
    diag = ad.select_per_column(logp, np.arange(k))
    return ad.neg(ad.tsum(diag))


def loss_feat_mse(point_features: Tensor, feature_map: Tensor,
                  corr: CorrespondenceMap) -> Tensor:
    """Mean squared error between per-point features and the sampled 2D map.

    Restricted to jointly visible points; returns None when no point is
    visible (callers treat that as a skip-batch condition).
    """
    vis = np.nonzero(corr.valid)[0]
    if vis.size == 0:
        return None
    sampled, _ = sample_image_features(feature_map, corr)
    diff = ad.sub(ad.gather_rows(point_features, vis), ad.gather_rows(sampled, vis))
    return ad.tmean(ad.mul(diff, diff))


def kl_rows(p: Tensor, q: Tensor) -> Tensor:
    """Row-wise KL(p || q) with an epsilon floor inside both logs, averaged."""
    lp = ad.log(ad.clamp_min(p, KL_EPS))
    lq = ad.log(ad.clamp_min(q, KL_EPS))
    per_row = ad.tsum(ad.mul(p, ad.sub(lp, lq)), axis=1)
    return ad.tmean(per_row)


def loss_sem_kl(point_probs: Tensor, pixel_probs: Tensor, corr: CorrespondenceMap,
                direction: str = "student_first") -> Tensor:
    """KL between per-point soft labels and soft labels sampled at their pixels.

    The written form puts the 3D distribution first, KL(T || S); the
    teacher-first direction is exposed as an experimental switch.
    """
    vis = np.nonzero(corr.valid)[0]
    if vis.size == 0:
        return None
    sampled, _ = sample_image_features(pixel_probs, corr)
    t = ad.gather_rows(point_probs, vis)
    s = ad.gather_rows(sampled, vis)
    if direction == "student_first":
        return kl_rows(t, s)
    if direction == "teacher_first":
        return kl_rows(s, t)
    raise ValueError("unknown KL direction %r" % direction)


def loss_weighted_sum(feat: Tensor, sem: Tensor, a: float, b: float) -> Tensor:
    """a * feature loss + b * semantic loss (either may be None when disabled)."""
    if a < 0 or b < 0:
        raise ValueError("loss weights must be non-negative")
    total = None
    if feat is not None and a != 0:
        total = feat * a
    if sem is not None and b != 0:
        term = sem * b
        total = term if total is None else total + term
    if total is None:
        raise ValueError("at least one loss component must be active")
    return total


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood; logits are (N, C_cls) rows."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError("labels must be (N,) aligned with logits rows")
    if labels.size == 0:
        raise ValueError("cross entropy over an empty batch")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label ids out of range")
    logp = ad.log_softmax(logits, axis=1)
    picked = ad.select_per_column(ad.transpose(logp), labels)
    return ad.neg(ad.tmean(picked))


def _jaccard_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss, errors sorted desc."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    out = jaccard.copy()
    out[1:] = jaccard[1:] - jaccard[:-1]
    return out


def lovasz_softmax(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Lovasz extension of the per-class Jaccard loss, averaged over classes present."""
    labels = np.asarray(labels, dtype=np.int64)
    n, n_cls = probs.shape
    if labels.shape[0] != n:
        raise ShapeError("labels must align with probability rows")
    present = np.unique(labels)
    terms = []
    for c in present:
        fg = (labels == c).astype(probs.dtype)
        pc = ad.reshape(ad.gather_cols(probs, np.array([c])), (n,))
        # error: 1 - p for foreground, p for background
        errors = ad.add(ad.mul(pc, Tensor(1.0 - 2.0 * fg)), Tensor(fg))
        order = np.argsort(-errors.data, kind="stable")
        grad = _jaccard_grad(fg[order])
        terms.append(ad.tsum(ad.mul(ad.gather_rows(errors, order), Tensor(grad))))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total * (1.0 / len(terms))
