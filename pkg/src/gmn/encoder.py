"""Dense trunk encoder with a channel-dropout perturbation site and an identity head."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, StateError


def relu(x):
    return np.maximum(x, 0.0)


@dataclass
class EncoderParams:
    """Dense layers ``W_l`` (d_out x d_in) and ``b_l``; rectifier after all but the last.

    ``dp_site = k`` applies the perturbation mask to the output of layer ``k``
    (0-based), after its rectifier.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dp_site: int
    classifier_weight: np.ndarray
    classifier_bias: np.ndarray

    def __post_init__(self):
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise ShapeError("encoder needs matching, non-empty weight and bias lists")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(f"layer {k} expects {w.shape[1]} inputs, "
                                 f"layer {k - 1} yields {self.weights[k - 1].shape[0]}")
        if not 0 <= self.dp_site < len(self.weights):
            raise ConfigError(f"dp_site must lie in [0, {len(self.weights)}), got {self.dp_site}")
        if self.classifier_weight.shape[1] != self.embedding_dim:
            raise ShapeError("classifier input width differs from the embedding dimension")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def embedding_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def num_classes(self) -> int:
        return self.classifier_weight.shape[0]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"encoder.W{k}"] = w
            out[f"encoder.b{k}"] = b
        out["classifier.W"] = self.classifier_weight
        out["classifier.b"] = self.classifier_bias
        return out

    def parameter_count(self, include_classifier=False) -> int:
        n = sum(w.size + b.size for w, b in zip(self.weights, self.biases))
        if include_classifier:
            n += self.classifier_weight.size + self.classifier_bias.size
        return n

    @classmethod
    def initialize(cls, dims, num_classes, dp_site=0, rng=None) -> "EncoderParams":
        """He-normal trunk, small-normal classifier, zero biases."""
        rng = np.random.default_rng(rng)
        weights = [rng.standard_normal((o, i)) * math.sqrt(2.0 / i) for i, o in zip(dims, dims[1:])]
        biases = [np.zeros(o) for o in dims[1:]]
        cw = rng.standard_normal((num_classes, dims[-1])) * 0.01
        return cls(weights, biases, dp_site, cw, np.zeros(num_classes))


@dataclass(frozen=True)
class DpConfig:
    rate: float = 0.5
    active: bool = True
    mode: str = "exact_fraction"
    inverted_scaling: bool = True

    def __post_init__(self):
        if not 0 <= self.rate < 1:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.mode != "exact_fraction":
            raise ConfigError(f"unsupported DP mode {self.mode!r}")

    @property
    def is_identity(self) -> bool:
        return not self.active or self.rate == 0


def dp_mask(channels: int, dp: DpConfig, rng=None, n: int | None = None) -> np.ndarray:
    """Exact-fraction channel mask: ``floor(rate * channels)`` zeros per row.

    Survivors are ``1 / (1 - rate)`` under inverted scaling, else 1. Returns a
    vector, or an ``(n, channels)`` matrix with an independent mask per row.
    """
    if channels < 1:
        raise ConfigError("channels must be >= 1")
    rows = 1 if n is None else n
    if dp.is_identity:
        mask = np.ones((rows, channels))
        return mask[0] if n is None else mask
    rng = np.random.default_rng(rng)
    n_drop = int(math.floor(dp.rate * channels))
    keep = 1.0 / (1.0 - dp.rate) if dp.inverted_scaling else 1.0
    mask = np.full((rows, channels), keep)
    if n_drop:
        order = np.argsort(rng.random((rows, channels)), axis=1, kind="stable")
        np.put_along_axis(mask, order[:, :n_drop], 0.0, axis=1)
    return mask[0] if n is None else mask


@dataclass
class EncoderCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    mask: np.ndarray | None = None
    embeddings: np.ndarray | None = None
    consumed: bool = False


def encoder_forward(params: EncoderParams, dp: DpConfig | None, x, training=False, rng=None,
                    mask=None):
    """Returns ``(embeddings, logits, cache)``.

    The DP mask is drawn from ``rng`` only when ``training`` and DP is active;
    an explicit ``mask`` overrides the draw (used to replay a frozen mask).
    """
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.dims[0]:
        raise ShapeError(f"encoder expects (n, {params.dims[0]}) input, got {h.shape}")
    cache = EncoderCache()
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        z = h @ w.T + b
        cache.pre.append(z)
        h = relu(z) if k < last else z
        if k == params.dp_site and training:
            if mask is None and dp is not None and not dp.is_identity:
                mask = dp_mask(h.shape[1], dp, rng, n=h.shape[0])
            if mask is not None:
                if mask.shape != h.shape:
                    raise ShapeError(f"DP mask {mask.shape} does not match activations {h.shape}")
                cache.mask = mask
                h = h * mask
    cache.embeddings = h
    logits = h @ params.classifier_weight.T + params.classifier_bias
    return h, logits, cache


def encoder_backward(params: EncoderParams, cache: EncoderCache, grad_embeddings,
                     grad_logits=None):
    """Reverse pass through the masked network; returns ``(param_grads, grad_inputs)``.

    ``param_grads`` is keyed like :meth:`EncoderParams.named_arrays`.
    """
    if cache is None or cache.embeddings is None or not cache.inputs:
        raise StateError("encoder_backward needs the cache of a matching forward pass")
    if cache.consumed:
        raise StateError("encoder cache already used by a backward pass")
    cache.consumed = True
    emb = cache.embeddings
    g = np.zeros_like(emb) if grad_embeddings is None else np.array(grad_embeddings, dtype=np.float64)
    grads = {}
    if grad_logits is not None:
        grads["classifier.W"] = grad_logits.T @ emb
        grads["classifier.b"] = grad_logits.sum(axis=0)
        g = g + grad_logits @ params.classifier_weight
    else:
        grads["classifier.W"] = np.zeros_like(params.classifier_weight)
        grads["classifier.b"] = np.zeros_like(params.classifier_bias)
    last = len(params.weights) - 1
    for k in range(last, -1, -1):
        if k == params.dp_site and cache.mask is not None:
            g = g * cache.mask
        if k < last:
            g = g * (cache.pre[k] > 0)
        grads[f"encoder.W{k}"] = g.T @ cache.inputs[k]
        grads[f"encoder.b{k}"] = g.sum(axis=0)
        g = g @ params.weights[k]
    return grads, g
