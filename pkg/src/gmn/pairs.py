"""Sample-pair features and pair sampling inside a batch."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SamplingError, ShapeError


class PairOp(str, enum.Enum):
    SQUARED_DIFF = "squared_diff"
    ABS = "abs"
    MUL = "mul"
    ADD = "add"

    @classmethod
    def parse(cls, value) -> "PairOp":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown pair op {value!r}; choose from "
                              f"{[m.value for m in cls]}") from None


class SamplingVariant(str, enum.Enum):
    RANDOM = "random"
    INTER_DOMAIN = "inter_domain"
    INTRA_DOMAIN = "intra_domain"

    @classmethod
    def parse(cls, value) -> "SamplingVariant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown sampling scheme {value!r}; choose from "
                              f"{[m.value for m in cls]}") from None


@dataclass(frozen=True)
class PairSamplingScheme:
    variant: SamplingVariant = SamplingVariant.RANDOM
    negatives_per_positive: int = 1

    def __post_init__(self):
        object.__setattr__(self, "variant", SamplingVariant.parse(self.variant))
        if int(self.negatives_per_positive) < 1:
            raise ConfigError("negatives_per_positive must be >= 1")


def pair_feature(x, y, op=PairOp.SQUARED_DIFF) -> np.ndarray:
    """Combine two embeddings (or two stacks of embeddings) into pair features."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"pair_feature operands differ in shape: {x.shape} vs {y.shape}")
    op = PairOp.parse(op)
    if op is PairOp.SQUARED_DIFF:
        diff = x - y
        return diff * diff
    if op is PairOp.ABS:
        return np.abs(x - y)
    if op is PairOp.MUL:
        return x * y
    return x + y


def pair_feature_backward(x, y, grad, op=PairOp.SQUARED_DIFF):
    """Gradients of ``sum(grad * pair_feature(x, y, op))`` w.r.t. ``x`` and ``y``.

    ABS uses subgradient 0 where ``x == y``.
    """
    op = PairOp.parse(op)
    if op is PairOp.SQUARED_DIFF:
        gx = 2.0 * (x - y) * grad
        return gx, -gx
    if op is PairOp.ABS:
        gx = np.sign(x - y) * grad
        return gx, -gx
    if op is PairOp.MUL:
        return y * grad, x * grad
    return grad.copy(), grad.copy()


@dataclass(frozen=True)
class PairFeature:
    vector: np.ndarray
    label: int
    pair_identity: tuple[int, int]
    source_ids: tuple[int, int]


@dataclass(frozen=True, eq=False)
class PairSet:
    """Sampled pairs as batch row indices, plus their features when built from embeddings."""

    left: np.ndarray
    right: np.ndarray
    labels: np.ndarray
    vectors: np.ndarray | None = None
    pair_identities: np.ndarray | None = None
    source_ids: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)

    @property
    def num_positive(self) -> int:
        return int(self.labels.sum())

    def __iter__(self):
        for k in range(len(self)):
            yield PairFeature(
                self.vectors[k], int(self.labels[k]),
                tuple(int(v) for v in self.pair_identities[k]),
                tuple(int(v) for v in self.source_ids[k]),
            )


def sample_pair_indices(identities, domains, scheme: PairSamplingScheme, rng):
    """All positive pairs (i < j) plus ``negatives_per_positive`` sampled negatives each.

    Negatives are drawn uniformly without replacement from every admissible
    unordered pair; when there are fewer admissible pairs than requested the
    draw falls back to sampling with replacement.
    """
    identities = np.asarray(identities)
    domains = np.asarray(domains)
    rng = np.random.default_rng(rng)
    if len(np.unique(identities)) < 2:
        raise SamplingError("pair sampling needs at least 2 identities in the batch")
    i, j = np.triu_indices(len(identities), k=1)
    same_id = identities[i] == identities[j]
    pos = np.flatnonzero(same_id)
    if len(pos) == 0:
        raise SamplingError("batch contains no positive pair")
    neg_ok = ~same_id
    if scheme.variant is SamplingVariant.INTER_DOMAIN:
        if len(np.unique(domains)) < 2:
            raise SamplingError("inter-domain negatives need at least 2 domains in the batch")
        neg_ok &= domains[i] != domains[j]
    elif scheme.variant is SamplingVariant.INTRA_DOMAIN:
        neg_ok &= domains[i] == domains[j]
    candidates = np.flatnonzero(neg_ok)
    if len(candidates) == 0:
        raise SamplingError(f"no admissible negative pair for scheme {scheme.variant.value}")
    n_neg = scheme.negatives_per_positive * len(pos)
    replace = n_neg > len(candidates)
    neg = np.sort(rng.choice(candidates, size=n_neg, replace=replace))
    chosen = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos), np.int64), np.zeros(n_neg, np.int64)])
    return i[chosen], j[chosen], labels


def sample_pairs(batch, scheme: PairSamplingScheme, op=PairOp.SQUARED_DIFF, seed=None) -> PairSet:
    left, right, labels = sample_pair_indices(batch.identities, batch.domains, scheme, seed)
    emb = np.asarray(batch.embeddings, dtype=np.float64)
    ids = np.asarray(batch.identities)
    sids = np.asarray(batch.sample_ids)
    return PairSet(
        left, right, labels,
        vectors=pair_feature(emb[left], emb[right], op),
        pair_identities=np.stack([ids[left], ids[right]], axis=1),
        source_ids=np.stack([sids[left], sids[right]], axis=1),
    )


def centroid_matrix(identities):
    """``(labels, M)`` with ``M @ embeddings`` giving per-identity batch means."""
    labels, inverse = np.unique(np.asarray(identities), return_inverse=True)
    m = np.zeros((len(labels), len(inverse)))
    m[inverse, np.arange(len(inverse))] = 1.0
    m /= m.sum(axis=1, keepdims=True)
    return labels, m


def identity_centroids(batch) -> dict[int, np.ndarray]:
    if len(batch.identities) == 0:
        raise SamplingError("identity_centroids of an empty batch")
    labels, m = centroid_matrix(batch.identities)
    means = m @ np.asarray(batch.embeddings, dtype=np.float64)
    return {int(lab): means[k] for k, lab in enumerate(labels)}


@dataclass(frozen=True, eq=False)
class PicVariants:
    """Index pairs into the stacked point set ``[embeddings; centroids]``.

    ``positive`` has shape ``(n_anchors, 3, 2)`` and ``negative`` ``(n_anchors, 4, 2)``;
    entry ``[a, v]`` names the two points whose squared difference forms variant ``v``
    for anchor ``a``. ``centroid_weights`` maps embeddings to centroids.
    """

    anchors: np.ndarray
    partners: np.ndarray
    negatives: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    centroid_labels: np.ndarray
    centroid_weights: np.ndarray
    positive_vectors: np.ndarray | None = None
    negative_vectors: np.ndarray | None = None

    def points(self, embeddings):
        return np.concatenate([embeddings, self.centroid_weights @ embeddings])

    def vectors(self, embeddings):
        z = self.points(embeddings)
        pos = pair_feature(z[self.positive[..., 0]], z[self.positive[..., 1]])
        neg = pair_feature(z[self.negative[..., 0]], z[self.negative[..., 1]])
        return pos, neg

    def backward(self, embeddings, grad_pos, grad_neg):
        """Map gradients on the variant vectors back onto the batch embeddings."""
        z = self.points(embeddings)
        gz = np.zeros_like(z)
        for idx, g in ((self.positive, grad_pos), (self.negative, grad_neg)):
            a, b = idx[..., 0].reshape(-1), idx[..., 1].reshape(-1)
            ga, gb = pair_feature_backward(z[a], z[b], g.reshape(-1, z.shape[1]))
            np.add.at(gz, a, ga)
            np.add.at(gz, b, gb)
        n = embeddings.shape[0]
        return gz[:n] + self.centroid_weights.T @ gz[n:]


def pic_variant_indices(identities, rng) -> PicVariants:
    """One ``(p, p+, q)`` triple per eligible anchor ``p``.

    Every row with at least one other same-identity row is an anchor; ``p+`` is a
    uniformly drawn other row of that identity and ``q`` a uniformly drawn row of
    a different identity.
    """
    identities = np.asarray(identities)
    rng = np.random.default_rng(rng)
    n = len(identities)
    labels, weights = centroid_matrix(identities)
    if len(labels) < 2:
        raise SamplingError("PIC needs at least two identities in the batch")
    cidx = n + np.searchsorted(labels, identities)
    anchors, partners, negatives = [], [], []
    for p in range(n):
        same = np.flatnonzero(identities == identities[p])
        same = same[same != p]
        if len(same) == 0:
            continue
        other = np.flatnonzero(identities != identities[p])
        anchors.append(p)
        partners.append(same[rng.integers(len(same))])
        negatives.append(other[rng.integers(len(other))])
    if not anchors:
        raise SamplingError("PIC needs an identity with at least two samples")
    p, pp, q = (np.array(v, dtype=np.int64) for v in (anchors, partners, negatives))
    cp, cq = cidx[p], cidx[q]
    positive = np.stack([
        np.stack([p, pp], 1), np.stack([p, cp], 1), np.stack([cp, pp], 1),
    ], axis=1)
    negative = np.stack([
        np.stack([p, q], 1), np.stack([p, cq], 1), np.stack([cp, q], 1), np.stack([cp, cq], 1),
    ], axis=1)
    return PicVariants(p, pp, q, positive, negative, labels, weights)


def pic_pair_variants(batch, seed=None) -> PicVariants:
    """PIC variant sets for a labelled batch, with the vectors filled in.

    Positive variants per anchor: ``(p, p+)``, ``(p, mean_p)``, ``(mean_p, p+)``;
    negative variants: ``(p, q)``, ``(p, mean_q)``, ``(mean_p, q)``, ``(mean_p, mean_q)``;
    all combined with the squared difference.
    """
    v = pic_variant_indices(batch.identities, seed)
    pos, neg = v.vectors(np.asarray(batch.embeddings, dtype=np.float64))
    return PicVariants(v.anchors, v.partners, v.negatives, v.positive, v.negative,
                       v.centroid_labels, v.centroid_weights, pos, neg)
