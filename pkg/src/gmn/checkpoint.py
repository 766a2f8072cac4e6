"""Binary checkpoint format ("GMNC"), little-endian, bit-exact round trip.

Layout::

    b"GMNC" | version u32
    config_len u32 | config JSON (utf-8, sorted keys)
    n_layers u32 | dims u32 x (n_layers + 1) | dp_site u32 | normalize u8 | pair_op_len u32 | pair_op
    per layer: W f64[d_out * d_in] row-major, b f64[d_out]
    n_classes u32 | class labels i64[n] | classifier W f64[n * emb] | classifier b f64[n]
    has_mnet u8 [positive_index u8 | d u32 | h u32 | W1 | b1 | W2 | b2]
    epoch u32 | dp_draws u64
    optimizer: kind u8 (0 adam, 1 sgd) | step u64 | beta1 f64 | beta2 f64 | eps f64 | momentum f64
              | n_slots u32 | per parameter (model order), per slot: f64 array shaped like the parameter
    rng streams (batch, pair, dp): state u128 | inc u128 | has_uint32 u32 | uinteger u32
    history: n u32 | per epoch: epoch u32 | lr f64 | l_cls l_tri l_gmn l_pic_pos l_pic_neg lam total f64
    crc32 u32 of every preceding byte
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .encoder import EncoderParams
from .errors import CheckpointError, ReportIOError
from .losses import LossBreakdown
from .metric_net import POSITIVE, MetricNetParams
from .pairs import PairOp
from .trainer import STREAMS, EpochRecord, Model, Optimizer, TrainConfig, TrainState

MAGIC = b"GMNC"
VERSION = 1
_OPT_KINDS = ("adam", "sgd")
_MASK64 = (1 << 64) - 1


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt, *values):
        self.buf.write(struct.pack("<" + fmt, *values))

    def array(self, a, dtype="<f8"):
        self.buf.write(np.ascontiguousarray(a, dtype=dtype).tobytes())

    def blob(self, data: bytes):
        self.pack("I", len(data))
        self.buf.write(data)

    def u128(self, v: int):
        self.pack("QQ", v & _MASK64, v >> 64)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def unpack(self, fmt):
        size = struct.calcsize("<" + fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = struct.unpack_from("<" + fmt, self.data, self.pos)
        self.pos += size
        return out if len(out) > 1 else out[0]

    def array(self, shape, dtype="<f8"):
        dt = np.dtype(dtype)
        n = int(np.prod(shape)) if shape else 1
        end = self.pos + n * dt.itemsize
        if end > len(self.data):
            raise CheckpointError("checkpoint truncated")
        a = np.frombuffer(self.data, dtype=dt, count=n, offset=self.pos).reshape(shape)
        self.pos = end
        return a.astype(dt.newbyteorder("="), copy=True)

    def blob(self) -> bytes:
        n = self.unpack("I")
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u128(self) -> int:
        lo, hi = self.unpack("QQ")
        return lo | (hi << 64)


def encode_state(state: TrainState) -> bytes:
    w = _Writer()
    w.buf.write(MAGIC)
    w.pack("I", VERSION)
    w.blob(json.dumps(state.config.to_dict(), sort_keys=True).encode("utf-8"))
    model = state.model
    enc = model.encoder
    dims = enc.dims
    w.pack("I", len(enc.weights))
    w.pack(f"{len(dims)}I", *dims)
    w.pack("I", enc.dp_site)
    w.pack("B", int(model.normalize))
    w.blob(model.pair_op.value.encode("ascii"))
    for wt, b in zip(enc.weights, enc.biases):
        w.array(wt)
        w.array(b)
    w.pack("I", enc.num_classes)
    w.array(model.class_labels, "<i8")
    w.array(enc.classifier_weight)
    w.array(enc.classifier_bias)
    if model.mnet is None:
        w.pack("B", 0)
    else:
        m = model.mnet
        w.pack("BBII", 1, POSITIVE, m.input_dim, m.hidden)
        for a in (m.w1, m.b1, m.w2, m.b2):
            w.array(a)
    w.pack("IQ", state.epoch, state.dp_draws)
    opt = state.optimizer
    w.pack("BQdddd", _OPT_KINDS.index(opt.kind), opt.step_count, opt.beta1, opt.beta2, opt.eps,
           opt.momentum)
    params = model.named_arrays()
    opt.ensure_slots(params)
    w.pack("I", len(opt.slot_names))
    for name in params:
        for slot in opt.slots[name]:
            w.array(slot)
    for stream in STREAMS:
        st = state.rngs[stream].bit_generator.state
        if st["bit_generator"] != "PCG64":
            raise CheckpointError(f"unsupported bit generator {st['bit_generator']}")
        w.u128(st["state"]["state"])
        w.u128(st["state"]["inc"])
        w.pack("II", st["has_uint32"], st["uinteger"])
    w.pack("I", len(state.history))
    for rec in state.history:
        b = rec.losses
        w.pack("Id", rec.epoch, rec.lr)
        w.pack("7d", b.l_cls, b.l_tri, b.l_gmn, b.l_pic_pos, b.l_pic_neg, b.lam, b.total)
    body = w.buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_state(data: bytes) -> TrainState:
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError(f"not a GMNC checkpoint (magic {data[:4]!r})")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.pos = 4
    version = r.unpack("I")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (corrupt file)")
    try:
        config = TrainConfig.from_dict(json.loads(r.blob().decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"unreadable config block: {exc}") from None
    n_layers = r.unpack("I")
    if n_layers < 1:
        raise CheckpointError("checkpoint declares an encoder without layers")
    dims = list(r.unpack(f"{n_layers + 1}I"))
    dp_site = r.unpack("I")
    normalize = bool(r.unpack("B"))
    pair_op = PairOp.parse(r.blob().decode("ascii"))
    weights, biases = [], []
    for d_in, d_out in zip(dims, dims[1:]):
        weights.append(r.array((d_out, d_in)))
        biases.append(r.array((d_out,)))
    n_classes = r.unpack("I")
    labels = r.array((n_classes,), "<i8")
    cw = r.array((n_classes, dims[-1]))
    cb = r.array((n_classes,))
    encoder = EncoderParams(weights, biases, dp_site, cw, cb)
    mnet = None
    if r.unpack("B"):
        positive, d, h = r.unpack("BII")
        if positive != POSITIVE:
            raise CheckpointError(f"checkpoint uses positive-logit index {positive}")
        mnet = MetricNetParams(r.array((h, d)), r.array((h,)), r.array((2, h)), r.array((2,)))
    model = Model(encoder, mnet, labels, pair_op, normalize)
    epoch, dp_draws = r.unpack("IQ")
    kind, step, b1, b2, eps, mom = r.unpack("BQdddd")
    opt = Optimizer(_OPT_KINDS[kind], b1, b2, eps, mom, step)
    n_slots = r.unpack("I")
    for name, p in model.named_arrays().items():
        opt.slots[name] = [r.array(p.shape) for _ in range(n_slots)]
    rngs = {}
    for stream in STREAMS:
        s, inc = r.u128(), r.u128()
        has, uint = r.unpack("II")
        bg = np.random.PCG64()
        bg.state = {"bit_generator": "PCG64", "state": {"state": s, "inc": inc},
                    "has_uint32": has, "uinteger": uint}
        rngs[stream] = np.random.Generator(bg)
    history = []
    for _ in range(r.unpack("I")):
        ep, lr = r.unpack("Id")
        vals = r.unpack("7d")
        history.append(EpochRecord(ep, lr, LossBreakdown(*vals)))
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return TrainState(config, model, opt, rngs, epoch, history, dp_draws)


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    try:
        path.write_bytes(encode_state(state))
    except OSError as exc:
        raise ReportIOError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ReportIOError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_state(data)
