"""The metric network: pair feature -> two logits (index 0 negative, 1 positive)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, StateError
from .pairs import PairOp, pair_feature

NEGATIVE, POSITIVE = 0, 1


@dataclass
class MetricNetParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        h, d = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (2, h) or self.b2.shape != (2,):
            raise ShapeError(
                f"metric net shapes inconsistent: w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w2 {self.w2.shape}, b2 {self.b2.shape}"
            )

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {"mnet.W1": self.w1, "mnet.b1": self.b1, "mnet.W2": self.w2, "mnet.b2": self.b2}

    def parameter_count(self) -> int:
        d, h = self.input_dim, self.hidden
        return d * h + h + h * 2 + 2

    @staticmethod
    def default_hidden(d: int) -> int:
        return max(1, int(round(d / 4)))

    @classmethod
    def initialize(cls, d: int, hidden: int | None = None, rng=None) -> "MetricNetParams":
        h = hidden or cls.default_hidden(d)
        rng = np.random.default_rng(rng)
        return cls(
            rng.standard_normal((h, d)) * math.sqrt(2.0 / d), np.zeros(h),
            rng.standard_normal((2, h)) * math.sqrt(1.0 / h), np.zeros(2),
        )


def summary(params: MetricNetParams) -> str:
    d, h = params.input_dim, params.hidden
    return (f"metric net {d} -> {h} -> 2: {params.parameter_count()} parameters "
            f"({d}*{h} + {h} + {h}*2 + 2)")


@dataclass
class MetricNetCache:
    x: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    consumed: bool = False


def _dense(x, w, b):
    # einsum without path optimisation never calls BLAS: each output is a plain
    # loop over the inputs, so a row's result does not depend on how many rows
    # share the call (BLAS kernels may change summation order with shape)
    return np.einsum("nk,hk->nh", x, w, optimize=False) + b


def mnet_forward(params: MetricNetParams, pair_features):
    x = np.asarray(pair_features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"metric net expects (n, {params.input_dim}) pair features, got {x.shape}")
    pre = _dense(x, params.w1, params.b1)
    hid = np.maximum(pre, 0.0)
    logits = _dense(hid, params.w2, params.b2)
    return logits, MetricNetCache(x, pre, hid)


def mnet_backward(params: MetricNetParams, cache: MetricNetCache, grad_logits):
    """Returns ``(param_grads, grad_pair_features)``."""
    if cache is None or cache.consumed:
        raise StateError("mnet_backward needs an unused cache from mnet_forward")
    cache.consumed = True
    g = np.asarray(grad_logits, dtype=np.float64)
    grads = {"mnet.W2": g.T @ cache.hidden, "mnet.b2": g.sum(axis=0)}
    gh = (g @ params.w2) * (cache.pre > 0)
    grads["mnet.W1"] = gh.T @ cache.x
    grads["mnet.b1"] = gh.sum(axis=0)
    return grads, gh @ params.w1


def similarity(logits):
    """Softmax probability of the positive logit, computed stably.

    Accepts a single ``[z0, z1]`` pair or an ``(..., 2)`` array.
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("similarity of non-finite logits")
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    out = e[..., POSITIVE] / e.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def logit_gap(logits):
    z = np.asarray(logits, dtype=np.float64)
    return z[..., POSITIVE] - z[..., NEGATIVE]


def _score_rows(params, probe, gallery, op, tile_size, score):
    probe = np.asarray(probe, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if tile_size < 1:
        raise ConfigError(f"tile_size must be >= 1, got {tile_size}")
    if probe.ndim != 2 or gallery.ndim != 2 or probe.shape[1] != gallery.shape[1]:
        raise ShapeError(f"probe {probe.shape} and gallery {gallery.shape} must be (n, d) with equal d")
    if probe.shape[1] != params.input_dim:
        raise ShapeError(f"embedding dim {probe.shape[1]} != metric net input {params.input_dim}")
    op = PairOp.parse(op)
    out = np.empty((probe.shape[0], gallery.shape[0]))
    rows = min(tile_size, gallery.shape[0])
    # buffers reused across tiles; the arithmetic matches mnet_forward op for op
    f_buf = np.empty((rows, gallery.shape[1]))
    h_buf = np.empty((rows, params.hidden))
    z_buf = np.empty((rows, 2))
    for i in range(probe.shape[0]):
        for start in range(0, gallery.shape[0], tile_size):
            tile = gallery[start:start + tile_size]
            n = tile.shape[0]
            f, h, z = f_buf[:n], h_buf[:n], z_buf[:n]
            if op is PairOp.SQUARED_DIFF:
                np.subtract(probe[i], tile, out=f)
                np.multiply(f, f, out=f)
            else:
                f[...] = pair_feature(np.broadcast_to(probe[i], tile.shape), tile, op)
            np.einsum("nk,hk->nh", f, params.w1, optimize=False, out=h)
            h += params.b1
            np.maximum(h, 0.0, out=h)
            np.einsum("nk,hk->nh", h, params.w2, optimize=False, out=z)
            z += params.b2
            out[i, start:start + n] = score(z)
    return out


def similarity_matrix(params: MetricNetParams, probe, gallery, op=PairOp.SQUARED_DIFF,
                      tile_size: int = 1024) -> np.ndarray:
    """``S[i, j]`` = metric-net similarity of probe row ``i`` and gallery row ``j``.

    Embeddings are row-major ``(n, d)``. Each probe row is scored against at most
    ``tile_size`` gallery rows at a time, so only ``tile_size * d`` pair features
    exist at once.
    """
    return _score_rows(params, probe, gallery, op, tile_size, similarity)


def logit_gap_matrix(params: MetricNetParams, probe, gallery, op=PairOp.SQUARED_DIFF,
                     tile_size: int = 1024) -> np.ndarray:
    """Same ordering as :func:`similarity_matrix` without sigmoid saturation at large gaps."""
    return _score_rows(params, probe, gallery, op, tile_size, logit_gap)
