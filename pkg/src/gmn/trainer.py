"""Training loop: PK batches, joint encoder / classifier / metric-net updates.

DP switches on at ``dp_activation_epoch`` (1-based epochs); before that no DP
random numbers are drawn. Three named RNG streams (batch, pair, dp) plus an
init stream are spawned from the master seed, so toggling DP or PIC never
changes which batches are drawn.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses
from .data import Dataset
from .encoder import DpConfig, EncoderParams, encoder_backward, encoder_forward
from .errors import ConfigError, GMNError, NumericError, SamplingError
from .metric_net import MetricNetParams, mnet_backward, mnet_forward
from .pairs import (PairOp, PairSamplingScheme, pair_feature, pair_feature_backward,
                    pic_variant_indices, sample_pair_indices)

log = logging.getLogger(__name__)

STREAMS = ("batch", "pair", "dp")
LOG_COLUMNS = ("epoch", "lr", "l_cls", "l_tri", "l_gmn", "l_pic_pos", "l_pic_neg", "total",
               "wall_seconds")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    dp_activation_epoch: int = 60
    identities_per_batch: int = 16
    samples_per_identity: int = 4
    base_lr: float = 3.5e-4
    lr_decay_epochs: tuple[int, ...] = (40, 90)
    lr_decay_factor: float = 10.0
    lam: float = losses.DEFAULT_LAMBDA
    dp_rate: float = 0.5
    dp_site: int = 0
    dp_inverted_scaling: bool = True
    dp_persistent: bool = True
    pair_scheme: str = "random"
    negatives_per_positive: int = 1
    pair_op: str = "squared_diff"
    margin: float = losses.DEFAULT_MARGIN
    encoder_widths: tuple[int, ...] = (64, 32)
    mnet_hidden: int = 0
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    sgd_momentum: float = 0.9
    use_mnet: bool = True
    use_dp: bool = True
    use_pic: bool = True
    detach_gmn: bool = False
    normalize_embeddings: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        self.validate()

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.dp_activation_epoch <= self.epochs:
            raise ConfigError(f"dp_activation_epoch must lie in [0, epochs={self.epochs}]")
        decay = self.lr_decay_epochs
        if any(b <= a for a, b in zip(decay, decay[1:])) or any(e >= self.epochs or e < 1 for e in decay):
            raise ConfigError(f"lr_decay_epochs must be strictly increasing within [1, epochs): {decay}")
        if self.lr_decay_factor <= 0:
            raise ConfigError("lr_decay_factor must be > 0")
        if self.identities_per_batch < 1 or self.samples_per_identity < 1:
            raise ConfigError("identities_per_batch and samples_per_identity must be >= 1")
        if self.base_lr < 0 or self.lam < 0 or self.margin < 0:
            raise ConfigError("base_lr, lam and margin must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if not self.encoder_widths or min(self.encoder_widths) < 1:
            raise ConfigError("encoder_widths must be a non-empty list of positive widths")
        if not 0 <= self.dp_site < len(self.encoder_widths):
            raise ConfigError(f"dp_site must lie in [0, {len(self.encoder_widths)})")
        DpConfig(rate=self.dp_rate)
        PairSamplingScheme(self.pair_scheme, self.negatives_per_positive)
        PairOp.parse(self.pair_op)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train settings: {sorted(unknown)}")
        return cls(**d)

    @property
    def batch_scheme(self) -> PairSamplingScheme:
        return PairSamplingScheme(self.pair_scheme, self.negatives_per_positive)

    def lr_at(self, epoch: int) -> float:
        n = sum(1 for e in self.lr_decay_epochs if e <= epoch)
        return self.base_lr / self.lr_decay_factor ** n

    def dp_active_at(self, epoch: int) -> bool:
        if not self.use_dp or self.dp_rate == 0 or epoch < self.dp_activation_epoch:
            return False
        return self.dp_persistent or (epoch - self.dp_activation_epoch) % 2 == 0


@dataclass
class Model:
    encoder: EncoderParams
    mnet: MetricNetParams | None
    class_labels: np.ndarray
    pair_op: PairOp = PairOp.SQUARED_DIFF
    normalize: bool = False

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = self.encoder.named_arrays()
        if self.mnet is not None:
            out.update(self.mnet.named_arrays())
        return out

    def embed(self, x) -> np.ndarray:
        """Evaluation-time embeddings (DP off)."""
        emb, _, _ = encoder_forward(self.encoder, None, x, training=False)
        return l2_normalize_forward(emb)[0] if self.normalize else emb

    def class_index(self, identities) -> np.ndarray:
        idx = np.searchsorted(self.class_labels, identities)
        idx = np.clip(idx, 0, len(self.class_labels) - 1)
        if not np.array_equal(self.class_labels[idx], identities):
            raise ConfigError("batch contains identities unknown to the classifier")
        return idx

    def copy(self) -> "Model":
        return _deepcopy_model(self)


def _deepcopy_model(m: Model) -> Model:
    enc = EncoderParams([w.copy() for w in m.encoder.weights], [b.copy() for b in m.encoder.biases],
                        m.encoder.dp_site, m.encoder.classifier_weight.copy(),
                        m.encoder.classifier_bias.copy())
    mnet = None
    if m.mnet is not None:
        mnet = MetricNetParams(m.mnet.w1.copy(), m.mnet.b1.copy(), m.mnet.w2.copy(), m.mnet.b2.copy())
    return Model(enc, mnet, m.class_labels.copy(), m.pair_op, m.normalize)


def build_model(config: TrainConfig, d_in: int, class_labels, rng) -> Model:
    class_labels = np.unique(np.asarray(class_labels, dtype=np.int64))
    enc = EncoderParams.initialize([d_in, *config.encoder_widths], len(class_labels),
                                   config.dp_site, rng)
    mnet = None
    if config.use_mnet:
        mnet = MetricNetParams.initialize(enc.embedding_dim, config.mnet_hidden or None, rng)
    return Model(enc, mnet, class_labels, PairOp.parse(config.pair_op),
                 config.normalize_embeddings)


def l2_normalize_forward(x, eps=1e-12):
    norm = np.maximum(np.sqrt((x * x).sum(axis=1, keepdims=True)), eps)
    return x / norm, norm


def l2_normalize_backward(y, norm, grad):
    # y = x / |x|  =>  dx = (g - y (y . g)) / |x|
    return (grad - y * (y * grad).sum(axis=1, keepdims=True)) / norm


@dataclass
class Optimizer:
    """Adam or momentum SGD over a dict of named arrays, updated in place."""

    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    step_count: int = 0
    slots: dict[str, list[np.ndarray]] = field(default_factory=dict)

    @property
    def slot_names(self) -> tuple[str, ...]:
        return ("m", "v") if self.kind == "adam" else ("velocity",)

    def ensure_slots(self, params: dict[str, np.ndarray]):
        for name, p in params.items():
            if name not in self.slots:
                self.slots[name] = [np.zeros_like(p) for _ in self.slot_names]

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        self.ensure_slots(params)
        self.step_count += 1
        t = self.step_count
        for name, p in params.items():
            g = grads[name]
            if self.kind == "adam":
                m, v = self.slots[name]
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                mhat = m / (1 - self.beta1 ** t)
                vhat = v / (1 - self.beta2 ** t)
                p -= lr * mhat / (np.sqrt(vhat) + self.eps)
            else:
                (vel,) = self.slots[name]
                vel *= self.momentum
                vel += g
                p -= lr * vel


def make_optimizer(config: TrainConfig) -> Optimizer:
    return Optimizer(config.optimizer, config.adam_beta1, config.adam_beta2, config.adam_eps,
                     config.sgd_momentum)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    losses: losses.LossBreakdown


@dataclass
class TrainState:
    config: TrainConfig
    model: Model
    optimizer: Optimizer
    rngs: dict[str, np.random.Generator]
    epoch: int = 0
    history: list[EpochRecord] = field(default_factory=list)
    dp_draws: int = 0


def spawn_streams(seed: int):
    children = np.random.SeedSequence(seed).spawn(len(STREAMS) + 1)
    rngs = {name: np.random.Generator(np.random.PCG64(ss)) for name, ss in zip(STREAMS, children)}
    return rngs, np.random.Generator(np.random.PCG64(children[-1]))


def init_state(config: TrainConfig, train_set: Dataset) -> TrainState:
    rngs, init_rng = spawn_streams(config.seed)
    model = build_model(config, train_set.d_in, train_set.identities, init_rng)
    opt = make_optimizer(config)
    opt.ensure_slots(model.named_arrays())
    return TrainState(config, model, opt, rngs)


def pk_batch(train_set: Dataset, P: int, K: int, rng) -> np.ndarray:
    """Row indices of a batch: per domain, ``P`` identities x ``K`` samples.

    Identities are drawn without replacement; samples without replacement unless
    the identity has fewer than ``K`` records.
    """
    rng = np.random.default_rng(rng)
    out = []
    for dom in np.unique(train_set.domains):
        in_dom = np.flatnonzero(train_set.domains == dom)
        ids = np.unique(train_set.identities[in_dom])
        if len(ids) < P:
            raise SamplingError(f"domain {int(dom)} has {len(ids)} identities, batch needs P={P}")
        for ident in rng.choice(ids, size=P, replace=False):
            members = in_dom[train_set.identities[in_dom] == ident]
            out.append(rng.choice(members, size=K, replace=len(members) < K))
    return np.concatenate(out)


def iterations_per_epoch(config: TrainConfig, train_set: Dataset) -> int:
    batch = train_set.num_domains * config.identities_per_batch * config.samples_per_identity
    return max(1, len(train_set) // batch)


def compute_losses(model: Model, config: TrainConfig, x, identities, domains, pair_rng,
                   dp_rng=None, dp_mask_override=None, need_grads=True):
    """Forward + backward for one batch. Returns ``(LossBreakdown, grads, dp_mask)``.

    ``dp_rng`` enables DP (mask drawn from it); ``dp_mask_override`` replays a fixed mask.
    """
    enc = model.encoder
    dp = None
    if dp_rng is not None:
        dp = DpConfig(rate=config.dp_rate, inverted_scaling=config.dp_inverted_scaling)
    raw, _, cache = encoder_forward(enc, dp, x, training=True, rng=dp_rng,
                                    mask=dp_mask_override)
    if model.normalize:
        emb, norm = l2_normalize_forward(raw)
    else:
        emb = raw
    logits = emb @ enc.classifier_weight.T + enc.classifier_bias
    l_cls, g_logits = losses.cross_entropy(logits, model.class_index(identities))
    l_tri, g_emb = losses.triplet_loss_batch_hard(emb, identities, config.margin)
    grads = {}
    l_gmn = 0.0
    if config.use_mnet and model.mnet is not None:
        left, right, labels = sample_pair_indices(identities, domains, config.batch_scheme, pair_rng)
        feats = pair_feature(emb[left], emb[right], model.pair_op)
        z, mcache = mnet_forward(model.mnet, feats)
        l_gmn, g_z = losses.gmn_loss(z, labels)
        mgrads, g_feats = mnet_backward(model.mnet, mcache, g_z)
        grads.update(mgrads)
        if not config.detach_gmn:
            gl, gr = pair_feature_backward(emb[left], emb[right], g_feats, model.pair_op)
            np.add.at(g_emb, left, gl)
            np.add.at(g_emb, right, gr)
    elif model.mnet is not None:
        grads.update({k: np.zeros_like(v) for k, v in model.mnet.named_arrays().items()})
    l_pos = l_neg = 0.0
    if config.use_pic:
        variants = pic_variant_indices(identities, pair_rng)
        vpos, vneg = variants.vectors(emb)
        l_pos, l_neg, g_pos, g_neg = losses.pic_loss(vpos, vneg)
        if config.lam:
            g_emb += variants.backward(emb, config.lam * g_pos, config.lam * g_neg)
    breakdown = losses.total_loss(l_cls, l_tri, l_gmn, l_pos, l_neg,
                                  config.lam if config.use_pic else 0.0)
    if need_grads:
        grads["classifier.W"] = g_logits.T @ emb
        grads["classifier.b"] = g_logits.sum(axis=0)
        g_emb = g_emb + g_logits @ enc.classifier_weight
        if model.normalize:
            g_emb = l2_normalize_backward(emb, norm, g_emb)
        egrads, _ = encoder_backward(enc, cache, g_emb)
        grads.update({k: v for k, v in egrads.items() if not k.startswith("classifier.")})
    return breakdown, grads, cache.mask


def _mean_breakdown(items: list[losses.LossBreakdown], lam: float) -> losses.LossBreakdown:
    means = {k: float(np.mean([getattr(b, k) for b in items])) for k in losses.LossBreakdown.COMPONENTS}
    return losses.total_loss(**means, lam=lam)


def _append_log(path: Path, record: EpochRecord, wall: float):
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", encoding="utf-8") as fh:
        if new:
            fh.write("\t".join(LOG_COLUMNS) + "\n")
        b = record.losses
        row = [record.epoch, record.lr, b.l_cls, b.l_tri, b.l_gmn, b.l_pic_pos, b.l_pic_neg,
               b.total, wall]
        fh.write("\t".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def train(config: TrainConfig, train_set: Dataset, state: TrainState | None = None,
          until_epoch: int | None = None, log_path=None,
          on_epoch: Callable[[TrainState], None] | None = None):
    """Run epochs ``state.epoch + 1 .. until_epoch`` (default: all). Returns ``(state, history)``."""
    config.validate()
    train_set.check_trainable()
    if state is None:
        state = init_state(config, train_set)
    elif state.config != config:
        raise ConfigError("resumed state was trained with a different configuration")
    last = config.epochs if until_epoch is None else min(until_epoch, config.epochs)
    n_iter = iterations_per_epoch(config, train_set)
    lam_eff = config.lam if config.use_pic else 0.0
    log_path = Path(log_path) if log_path else None
    model, opt = state.model, state.optimizer
    params = model.named_arrays()
    for epoch in range(state.epoch + 1, last + 1):
        t0 = time.perf_counter()
        lr = config.lr_at(epoch)
        dp_on = config.dp_active_at(epoch)
        parts = []
        for it in range(n_iter):
            try:
                idx = pk_batch(train_set, config.identities_per_batch,
                               config.samples_per_identity, state.rngs["batch"])
                batch = train_set.take(idx)
                bd, grads, _ = compute_losses(
                    model, config, batch.embeddings, batch.identities, batch.domains,
                    state.rngs["pair"], state.rngs["dp"] if dp_on else None,
                )
                if dp_on:
                    state.dp_draws += 1
                if not math.isfinite(bd.total):
                    raise NumericError("non-finite total loss")
                opt.step(params, grads, lr)
            except GMNError as exc:
                raise type(exc)(f"epoch {epoch}, iteration {it + 1}: {exc}") from exc
            parts.append(bd)
        record = EpochRecord(epoch, lr, _mean_breakdown(parts, lam_eff))
        state.history.append(record)
        state.epoch = epoch
        wall = time.perf_counter() - t0
        if log_path is not None:
            _append_log(log_path, record, wall)
        log.debug("epoch %d lr %.3g total %.4f (dp %s)", epoch, lr, record.losses.total, dp_on)
        if on_epoch is not None:
            on_epoch(state)
    return state, state.history
