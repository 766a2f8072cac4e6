"""Training objectives. Each returns the scalar loss and its gradient(s).

Non-differentiable points (zero-length norms, mining ties) take subgradient 0.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from itertools import combinations

import numpy as np

from .errors import MiningError, NumericError, ShapeError

DEFAULT_MARGIN = 0.3
DEFAULT_LAMBDA = 1.0


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _class_nll(logits, labels, width=None):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or len(labels) != logits.shape[0]:
        raise ShapeError(f"need one logit row per label: {logits.shape} vs {labels.shape}")
    if width is not None and logits.shape[1] != width:
        raise ShapeError(f"expected {width} logits per row, got {logits.shape[1]}")
    if len(labels) and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(f"label out of range [0, {logits.shape[1]})")
    n = len(labels)
    logp = _log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def gmn_loss(logits, labels):
    """Binary cross-entropy of the metric net (logit 1 = positive pair)."""
    return _class_nll(logits, labels, width=2)


def cross_entropy(logits, labels):
    return _class_nll(logits, labels)


def _norm_rows(u):
    n = np.sqrt((u * u).sum(axis=-1))
    safe = np.where(n > 0, n, 1.0)
    return n, np.where((n > 0)[..., None], u / safe[..., None], 0.0)


def _pairwise_center_loss(variants):
    # mean over anchors of (1/#pairs) * sum over unordered variant pairs of ||f_i - f_j||
    v = np.asarray(variants, dtype=np.float64)
    n, k = v.shape[0], v.shape[1]
    pairs = list(combinations(range(k), 2))
    if n == 0:
        return 0.0, np.zeros_like(v)
    grad = np.zeros_like(v)
    total = 0.0
    scale = 1.0 / (len(pairs) * n)
    for i, j in pairs:
        norm, unit = _norm_rows(v[:, i] - v[:, j])
        total += norm.sum()
        grad[:, i] += unit * scale
        grad[:, j] -= unit * scale
    return total * scale, grad


def pic_loss(positive, negative):
    """Pair-identity center loss.

    ``positive``: ``(n, 3, d)`` variant vectors per anchor, ``negative``: ``(n, 4, d)``.
    Returns ``(l_pos, l_neg, grad_positive, grad_negative)``.
    """
    positive = np.asarray(positive, dtype=np.float64)
    negative = np.asarray(negative, dtype=np.float64)
    if positive.ndim != 3 or positive.shape[1] != 3:
        raise ShapeError(f"positive variants must be (n, 3, d), got {positive.shape}")
    if negative.ndim != 3 or negative.shape[1] != 4:
        raise ShapeError(f"negative variants must be (n, 4, d), got {negative.shape}")
    if positive.shape[2] != negative.shape[2]:
        raise ShapeError("positive and negative variants differ in dimension")
    l_pos, g_pos = _pairwise_center_loss(positive)
    l_neg, g_neg = _pairwise_center_loss(negative)
    return l_pos, l_neg, g_pos, g_neg


def pairwise_distances(x):
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def triplet_loss_batch_hard(embeddings, identities, margin=DEFAULT_MARGIN):
    """Batch-hard triplet loss on Euclidean distances; ties go to the lowest index."""
    x = np.asarray(embeddings, dtype=np.float64)
    ids = np.asarray(identities)
    n = len(ids)
    dist = pairwise_distances(x)
    same = ids[:, None] == ids[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    bad = np.flatnonzero(~pos_mask.any(axis=1) | ~neg_mask.any(axis=1))
    if len(bad):
        raise MiningError(f"anchor {int(bad[0])} lacks a positive or a negative in the batch")
    hp = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    hn = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)
    rows = np.arange(n)
    d_ap, d_an = dist[rows, hp], dist[rows, hn]
    hinge = margin + d_ap - d_an
    active = hinge > 0
    loss = float(np.where(active, hinge, 0.0).mean())
    grad = np.zeros_like(x)
    _, u_ap = _norm_rows(x - x[hp])
    _, u_an = _norm_rows(x - x[hn])
    w = active[:, None] / n
    np.add.at(grad, rows, w * (u_ap - u_an))
    np.add.at(grad, hp, -w * u_ap)
    np.add.at(grad, hn, w * u_an)
    return loss, grad


@dataclass(frozen=True)
class LossBreakdown:
    l_cls: float = 0.0
    l_tri: float = 0.0
    l_gmn: float = 0.0
    l_pic_pos: float = 0.0
    l_pic_neg: float = 0.0
    lam: float = DEFAULT_LAMBDA
    total: float = 0.0

    COMPONENTS = ("l_cls", "l_tri", "l_gmn", "l_pic_pos", "l_pic_neg")

    def as_dict(self):
        return asdict(self)


def total_loss(l_cls, l_tri, l_gmn, l_pic_pos, l_pic_neg, lam=DEFAULT_LAMBDA) -> LossBreakdown:
    values = dict(l_cls=l_cls, l_tri=l_tri, l_gmn=l_gmn, l_pic_pos=l_pic_pos,
                  l_pic_neg=l_pic_neg, lam=lam)
    for name, v in values.items():
        if not math.isfinite(v):
            raise NumericError(f"non-finite loss component {name}={v}")
    total = l_cls + l_tri + l_gmn + lam * (l_pic_pos + l_pic_neg)
    return LossBreakdown(**{k: float(v) for k, v in values.items()}, total=float(total))
