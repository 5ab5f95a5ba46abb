"""Training losses for binary and semantic change detection."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

PROB_EPS = 1e-7

COS_MODES = ("hinge", "raw")


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy over all pixels.

    `p` holds change probabilities; values are clamped to
    [PROB_EPS, 1 - PROB_EPS] before the logs.  `y` is a {0,1} array.
    """
    y = np.asarray(y.data if isinstance(y, Tensor) else y)
    if y.shape != p.shape:
        raise ShapeError(f"bce_loss: probabilities {p.shape} vs labels {y.shape}")
    yt = Tensor(y.astype(p.data.dtype))
    pc = T.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    pos = T.mul(yt, T.log(pc))
    neg = T.mul(Tensor(np.ones_like(y, dtype=p.data.dtype)) - yt, T.log(Tensor(np.ones_like(y, dtype=p.data.dtype)) - pc))
    return T.neg(T.mean_axes(T.add(pos, neg)))


def ce_loss(p: Tensor, labels) -> Tensor:
    """Mean multi-class cross-entropy, -log p[label], over all pixels.

    `p` is (..., K) softmax probabilities (each pixel summing to one within
    1e-5); `labels` an integer array of the leading shape.
    """
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    K = p.shape[-1]
    if labels.shape != p.shape[:-1]:
        raise ShapeError(f"ce_loss: probabilities {p.shape} vs labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"ce_loss: label {int(labels.max())} out of range for {K} classes")
    sums = p.data.sum(axis=-1)
    if np.abs(sums - 1.0).max() > 1e-5:
        raise ValueError("ce_loss: probabilities do not sum to 1 per pixel")
    onehot = np.zeros(p.shape, dtype=p.data.dtype)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    picked = T.sum_axes(T.mul(Tensor(onehot), T.log(T.clip(p, PROB_EPS, 1.0))), axes=-1)
    return T.neg(T.mean_axes(picked))


def semantic_consistency_loss(x1: Tensor, x2: Tensor, y_change, mode: str = "hinge",
                              norm_floor: float = 1e-8) -> Tensor:
    """Contrastive cosine loss between per-pixel feature vectors.

    Unchanged pixels (label 0) pay 1 - cos; changed pixels pay
    max(0, cos) in "hinge" mode or raw cos in "raw" mode (raw can go
    negative).  Mean over pixels.
    """
    if mode not in COS_MODES:
        raise ValueError(f"unknown cosine mode {mode!r}")
    if x1.shape != x2.shape:
        raise ShapeError(f"semantic_consistency_loss: shapes differ, {x1.shape} vs {x2.shape}")
    y = np.asarray(y_change.data if isinstance(y_change, Tensor) else y_change)
    if y.shape != x1.shape[:-1]:
        raise ShapeError(f"semantic_consistency_loss: labels {y.shape} vs pixels {x1.shape[:-1]}")
    dt = x1.data.dtype
    dot = T.sum_axes(T.mul(x1, x2), axes=-1)
    n1 = T.sqrt(T.sum_axes(T.mul(x1, x1), axes=-1))
    n2 = T.sqrt(T.sum_axes(T.mul(x2, x2), axes=-1))
    cos = T.div(dot, T.add(T.mul(n1, n2), Tensor(np.asarray(norm_floor, dtype=dt))))
    changed = Tensor((y != 0).astype(dt))
    unchanged = Tensor((y == 0).astype(dt))
    one = Tensor(np.ones(cos.shape, dtype=dt))
    pos_term = T.mul(unchanged, T.sub(one, cos))
    change_cos = T.relu(cos) if mode == "hinge" else cos
    neg_term = T.mul(changed, change_cos)
    return T.mean_axes(T.add(pos_term, neg_term))


def total_scd_loss(l_cd: Tensor, l_sc: Tensor, l_ss1: Tensor, l_ss2: Tensor,
                   lambdas=(1.0, 1.0, 1.0)) -> Tensor:
    """Weighted sum: l1 * cd + l2 * sc + l3 * (ss1 + ss2)."""
    l1, l2, l3 = (float(v) for v in lambdas)
    if min(l1, l2, l3) < 0:
        raise ValueError("loss weights must be non-negative")
    return T.add(T.add(T.mul(Tensor(np.asarray(l1, dtype=l_cd.data.dtype)), l_cd),
                       T.mul(Tensor(np.asarray(l2, dtype=l_sc.data.dtype)), l_sc)),
                 T.mul(Tensor(np.asarray(l3, dtype=l_ss1.data.dtype)), T.add(l_ss1, l_ss2)))
