"""Retrieval evaluation (CMC / mAP) under feature-based and metric-net protocols."""
from __future__ import annotations

import enum
import math
import statistics
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .data import Dataset
from .errors import ConfigError, DataError, EvaluationError
from .losses import cross_entropy
from .metric_net import logit_gap_matrix
from .pairs import PairOp, pair_feature


class Protocol(str, enum.Enum):
    FEATURE_EUCLIDEAN = "feature_euclidean"
    FEATURE_COSINE = "feature_cosine"
    MNET = "mnet"

    @classmethod
    def parse(cls, value) -> "Protocol":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown protocol {value!r}; choose from {[m.value for m in cls]}") from None


@dataclass(frozen=True)
class EvalConfig:
    protocol: Protocol = Protocol.MNET
    pair_op: str = "squared_diff"
    tile_size: int = 1024
    cross_camera_filter: bool = True
    ranks: tuple[int, ...] = (1, 5, 10)
    normalize_features: bool = False
    single_threaded: bool = False

    def __post_init__(self):
        object.__setattr__(self, "protocol", Protocol.parse(self.protocol))
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        PairOp.parse(self.pair_op)
        if list(self.ranks) != sorted(set(self.ranks)) or not self.ranks or self.ranks[0] < 1:
            raise ConfigError(f"ranks must be strictly ascending positive integers: {self.ranks}")
        if self.tile_size < 1:
            raise ConfigError("tile_size must be >= 1")


@dataclass
class EvalReport:
    mAP: float
    cmc: dict[int, float]
    num_valid_probes: int
    num_skipped_probes: int = 0
    wall_seconds_similarity: float = 0.0
    wall_seconds_ranking: float = 0.0
    protocol: str = ""
    cmc_curve: list[float] = field(default_factory=list)

    def as_dict(self):
        d = asdict(self)
        d["cmc"] = {str(k): v for k, v in self.cmc.items()}
        return d


def l2_normalize(x, eps=1e-12):
    x = np.asarray(x, dtype=np.float64)
    n = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(n, eps)


def retrieval_metrics(scores, probe_ids, gallery_ids, probe_cams=None, gallery_cams=None,
                      ranks=(1, 5, 10), cross_camera_filter=True, max_curve=None) -> EvalReport:
    """CMC and mAP from a probe x gallery score matrix (higher = more similar).

    Ranking is a stable descending sort, so ties keep gallery order. With the
    cross-camera filter, gallery rows sharing both identity and camera with the
    probe are dropped. AP is the mean of precision@k over the positions of the
    remaining positives; probes without any positive are skipped. Sums use
    ``math.fsum`` so the result does not depend on summation order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    probe_ids = np.asarray(probe_ids)
    gallery_ids = np.asarray(gallery_ids)
    n_p, n_g = scores.shape
    if len(probe_ids) != n_p or len(gallery_ids) != n_g:
        raise EvaluationError("score matrix shape does not match the label vectors")
    if ranks and max(ranks) > n_g:
        raise ConfigError(f"rank {max(ranks)} exceeds gallery size {n_g}")
    if cross_camera_filter and (probe_cams is None or gallery_cams is None):
        raise ConfigError("cross-camera filtering needs camera labels")
    curve_len = n_g if max_curve is None else min(max_curve, n_g)
    first_hits = []
    aps = []
    skipped = 0
    for i in range(n_p):
        order = np.argsort(-scores[i], kind="stable")
        match = gallery_ids[order] == probe_ids[i]
        if cross_camera_filter:
            junk = match & (np.asarray(gallery_cams)[order] == probe_cams[i])
            keep = ~junk
            match = match[keep]
        if not match.any():
            skipped += 1
            continue
        hit_pos = np.flatnonzero(match)
        first_hits.append(hit_pos[0])
        precisions = np.arange(1, len(hit_pos) + 1) / (hit_pos + 1)
        aps.append(math.fsum(precisions.tolist()) / len(hit_pos))
    if not aps:
        raise EvaluationError("no probe has a valid positive in the gallery")
    first_hits = np.asarray(first_hits)
    curve = [int(np.count_nonzero(first_hits < r)) / len(first_hits) for r in range(1, curve_len + 1)]
    cmc = {r: int(np.count_nonzero(first_hits < r)) / len(first_hits) for r in ranks}
    return EvalReport(mAP=math.fsum(aps) / len(aps), cmc=cmc, num_valid_probes=len(aps),
                      num_skipped_probes=skipped, cmc_curve=curve)


def score_matrix(model, probe_emb, gallery_emb, config: EvalConfig):
    """Order-defining score for a protocol (higher = more similar).

    Feature protocols use negative Euclidean distance or cosine similarity; the
    metric-net protocol uses the logit gap, which ranks exactly like the softmax
    similarity but does not saturate to 1.0 for confident pairs.
    """
    p, g = probe_emb, gallery_emb
    if config.normalize_features or config.protocol is Protocol.FEATURE_COSINE:
        p, g = l2_normalize(p), l2_normalize(g)
    if config.protocol is Protocol.MNET:
        if model is None or getattr(model, "mnet", None) is None:
            raise ConfigError("MNET protocol requested but the model has no metric network")
        return logit_gap_matrix(model.mnet, p, g, PairOp.parse(config.pair_op), config.tile_size)
    if config.protocol is Protocol.FEATURE_COSINE:
        return p @ g.T
    sq = (p * p).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * (p @ g.T)
    return -np.sqrt(np.maximum(sq, 0.0))


def _threads(config: EvalConfig):
    return threadpool_limits(1) if config.single_threaded else nullcontext()


def evaluate_embeddings(model, probe: Dataset, gallery: Dataset, probe_emb, gallery_emb,
                        config: EvalConfig) -> EvalReport:
    with _threads(config):
        t0 = time.perf_counter()
        scores = score_matrix(model, probe_emb, gallery_emb, config)
        t1 = time.perf_counter()
        report = retrieval_metrics(scores, probe.identities, gallery.identities, probe.cameras,
                                   gallery.cameras, config.ranks, config.cross_camera_filter,
                                   max_curve=max(50, max(config.ranks)))
        t2 = time.perf_counter()
    report.wall_seconds_similarity = t1 - t0
    report.wall_seconds_ranking = t2 - t1
    report.protocol = config.protocol.value
    return report


def evaluate(probe: Dataset, gallery: Dataset, model, config: EvalConfig) -> EvalReport:
    """Embed both sets with DP off, score by ``config.protocol`` and rank.

    ``model=None`` evaluates the stored embeddings directly (feature protocols only).
    """
    if model is None:
        pe, ge = probe.embeddings, gallery.embeddings
    else:
        pe, ge = model.embed(probe.embeddings), model.embed(gallery.embeddings)
    return evaluate_embeddings(model, probe, gallery, pe, ge, config)


@dataclass
class TimingRow:
    protocol: str
    n_probe: int
    n_gallery: int
    similarity_seconds: float
    ranking_seconds: float

    @property
    def total_seconds(self) -> float:
        return self.similarity_seconds + self.ranking_seconds


def timing_compare(probe: Dataset, gallery: Dataset, model, protocols, repeats=3,
                   base: EvalConfig | None = None) -> list[TimingRow]:
    """Median similarity / ranking wall time per protocol on identical embeddings.

    Repeats are interleaved across protocols so a transient slowdown of the
    machine hits every protocol alike rather than one protocol's whole series.
    """
    base = base or EvalConfig(single_threaded=True)
    pe, ge = model.embed(probe.embeddings), model.embed(gallery.embeddings)
    cfgs = [EvalConfig(**{**asdict(base), "protocol": Protocol.parse(p)}) for p in protocols]
    sims = [[] for _ in cfgs]
    ranks = [[] for _ in cfgs]
    for _ in range(max(1, repeats)):
        for k, cfg in enumerate(cfgs):
            r = evaluate_embeddings(model, probe, gallery, pe, ge, cfg)
            sims[k].append(r.wall_seconds_similarity)
            ranks[k].append(r.wall_seconds_ranking)
    return [TimingRow(cfg.protocol.value, len(probe), len(gallery), statistics.median(s),
                      statistics.median(r)) for cfg, s, r in zip(cfgs, sims, ranks)]


def linear_fit_r2(x, y) -> tuple[float, float, float]:
    """Least-squares ``y = a + b x``; returns ``(a, b, r_squared)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    b, a = np.polyfit(x, y, 1)
    resid = y - (a + b * x)
    ss_tot = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - (resid ** 2).sum() / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), float(r2)


@dataclass
class DomainGapReport:
    instance_space_accuracy: float
    pair_space_accuracy: float
    chance_level: float
    instance_train_accuracy: float = 0.0
    pair_train_accuracy: float = 0.0
    num_domains: int = 0
    samples_per_domain: int = 0

    def as_dict(self):
        return asdict(self)


GAP_ITERATIONS = 200
GAP_LR = 0.1
GAP_TEST_FRACTION = 0.3


def softmax_regression(x, y, num_classes, iterations=GAP_ITERATIONS, lr=GAP_LR):
    """Full-batch gradient descent on a zero-initialised linear softmax classifier."""
    w = np.zeros((num_classes, x.shape[1]))
    b = np.zeros(num_classes)
    for _ in range(iterations):
        _, g = cross_entropy(x @ w.T + b, y)
        w -= lr * (g.T @ x)
        b -= lr * g.sum(axis=0)
    return w, b


def _accuracy(w, b, x, y) -> float:
    return float(np.mean(np.argmax(x @ w.T + b, axis=1) == y))


def _fit_domain_classifier(feats, labels, num_classes, rng):
    # stratified held-out split, same proportion per domain
    test = np.zeros(len(labels), dtype=bool)
    for k in range(num_classes):
        rows = np.flatnonzero(labels == k)
        n_test = max(1, int(round(GAP_TEST_FRACTION * len(rows))))
        test[rng.permutation(rows)[:n_test]] = True
    feats = l2_normalize(feats)
    w, b = softmax_regression(feats[~test], labels[~test], num_classes)
    return _accuracy(w, b, feats[test], labels[test]), _accuracy(w, b, feats[~test], labels[~test])


def domain_gap_diagnostic(dataset: Dataset, num_pairs_per_domain: int = 200, seed=0,
                          embeddings=None) -> DomainGapReport:
    """How well a linear probe recovers the domain from instance vs pair features.

    Per domain, ``num_pairs_per_domain`` random within-domain pairs give the
    squared-difference pair features, and as many random records give the
    instance features. ``embeddings`` overrides the stored vectors (e.g. encoder
    outputs).
    """
    feats = dataset.embeddings if embeddings is None else np.asarray(embeddings, dtype=np.float64)
    domains = np.unique(dataset.domains)
    if len(domains) < 2:
        raise DataError("domain-gap diagnostic needs at least two domains")
    if num_pairs_per_domain < 2:
        raise DataError("num_pairs_per_domain must be >= 2")
    rng = np.random.default_rng(seed)
    inst, pair, labels = [], [], []
    for k, dom in enumerate(domains):
        rows = np.flatnonzero(dataset.domains == dom)
        if len(rows) < 2:
            raise DataError(f"domain {dom} has {len(rows)} record(s); need >= 2 for pairs")
        n = num_pairs_per_domain
        inst.append(feats[rng.choice(rows, n, replace=len(rows) < n)])
        left = rng.choice(rows, n)
        # second element uniform over the other rows of the domain
        offs = rng.integers(1, len(rows), n)
        right = rows[(np.searchsorted(rows, left) + offs) % len(rows)]
        pair.append(pair_feature(feats[left], feats[right]))
        labels.append(np.full(n, k))
    labels = np.concatenate(labels)
    split_seed = rng.integers(2 ** 63)
    inst_test, inst_train = _fit_domain_classifier(np.concatenate(inst), labels, len(domains),
                                                   np.random.default_rng(split_seed))
    pair_test, pair_train = _fit_domain_classifier(np.concatenate(pair), labels, len(domains),
                                                   np.random.default_rng(split_seed))
    return DomainGapReport(inst_test, pair_test, 1.0 / len(domains), inst_train, pair_train,
                           len(domains), num_pairs_per_domain)
