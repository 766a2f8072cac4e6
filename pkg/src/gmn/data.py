"""Samples, datasets, synthetic multi-domain generation and embedding file I/O.

A :class:`Dataset` stores its records column-wise (one numpy array per field);
:class:`SampleRecord` is the row view handed out when iterating.

Embedding files come in two layouts that round-trip bit-exactly.

Text (``.tsv``/``.txt``)::

    #GMNE-TEXT<TAB>version=1<TAB>d_in=<d><TAB>records=<n><TAB>role=<role>
    <sample_id><TAB><identity><TAB><domain><TAB><camera><TAB><e_0> ... <e_{d-1}>

Floats are written with ``repr`` (shortest string that parses back to the same
double). Lines starting with ``#`` after the header are comments.

Binary (``.gmne``), little-endian::

    b"GMNE" | version u32 | d_in u32 | count u64 | role u32
    count x (sample_id i64, identity i64, domain i64, camera i64, d_in x f64)
"""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.linalg import expm

from .errors import ConfigError, IngestionError, ReportIOError, SplitError

ROLES = ("train", "probe", "gallery")
TEXT_MAGIC = "#GMNE-TEXT"
BINARY_MAGIC = b"GMNE"
FORMAT_VERSION = 1
_BIN_HEADER = struct.Struct("<4sIIQI")


@dataclass(frozen=True)
class SampleRecord:
    embedding: np.ndarray
    identity: int
    domain: int
    camera: int
    sample_id: int


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Batch:
    """Labelled rows drawn from a dataset; rows may repeat (PK sampling with replacement)."""

    embeddings: np.ndarray
    identities: np.ndarray
    domains: np.ndarray
    cameras: np.ndarray
    sample_ids: np.ndarray

    def __len__(self):
        return len(self.identities)


@dataclass(frozen=True, eq=False)
class Dataset:
    embeddings: np.ndarray
    identities: np.ndarray
    domains: np.ndarray
    cameras: np.ndarray
    sample_ids: np.ndarray
    role: str = "train"

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2:
            raise IngestionError(f"embeddings must be 2-D, got shape {emb.shape}")
        n = emb.shape[0]
        object.__setattr__(self, "embeddings", _frozen(emb, np.float64))
        for name in ("identities", "domains", "cameras", "sample_ids"):
            col = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1)
            if len(col) != n:
                raise IngestionError(f"{name} has {len(col)} entries for {n} embeddings")
            if name != "sample_ids" and n and col.min() < 0:
                raise IngestionError(f"{name} must be non-negative")
            object.__setattr__(self, name, _frozen(col, np.int64))
        if self.role not in ROLES:
            raise ConfigError(f"role must be one of {ROLES}, got {self.role!r}")
        uniq, counts = np.unique(self.sample_ids, return_counts=True)
        if len(uniq) != n:
            raise IngestionError(f"duplicate sample_id {int(uniq[counts > 1][0])}")

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def d_in(self) -> int:
        return self.embeddings.shape[1]

    @property
    def num_identities(self) -> int:
        return len(np.unique(self.identities))

    @property
    def num_domains(self) -> int:
        return len(np.unique(self.domains))

    @property
    def records(self) -> Iterator[SampleRecord]:
        for k in range(len(self)):
            yield self.record(k)

    def record(self, k: int) -> SampleRecord:
        return SampleRecord(
            self.embeddings[k], int(self.identities[k]), int(self.domains[k]),
            int(self.cameras[k]), int(self.sample_ids[k]),
        )

    def take(self, index) -> Batch:
        index = np.asarray(index, dtype=np.int64)
        return Batch(
            self.embeddings[index], self.identities[index], self.domains[index],
            self.cameras[index], self.sample_ids[index],
        )

    def subset(self, index, role: str | None = None) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            self.embeddings[index], self.identities[index], self.domains[index],
            self.cameras[index], self.sample_ids[index], role or self.role,
        )

    def select_domains(self, domains, role: str | None = None) -> "Dataset":
        mask = np.isin(self.domains, list(domains))
        return self.subset(np.flatnonzero(mask), role)

    def with_embeddings(self, embeddings) -> "Dataset":
        return Dataset(embeddings, self.identities, self.domains, self.cameras,
                       self.sample_ids, self.role)

    def equals(self, other: "Dataset") -> bool:
        """Label equality plus bit-exact embedding equality."""
        if self.role != other.role or self.embeddings.shape != other.embeddings.shape:
            return False
        same_bits = self.embeddings.tobytes() == other.embeddings.tobytes()
        return same_bits and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("identities", "domains", "cameras", "sample_ids")
        )

    def check_trainable(self):
        """Every (identity, domain) group of a training split needs a positive partner."""
        keys, counts = np.unique(
            np.stack([self.identities, self.domains], axis=1), axis=0, return_counts=True
        )
        bad = keys[counts < 2]
        if len(bad):
            raise SplitError(
                "training split needs >= 2 records per (identity, domain); offending: "
                + ", ".join(f"({i},{d})" for i, d in bad[:10])
            )


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Multi-domain embedding generator settings.

    A record of identity ``i`` in domain ``k`` is ``A_k @ (c_i + eps) + b_k``.
    ``A_k = expm(domain_shift_scale / 4 * G_k / sqrt(d_in))`` with ``G_k`` standard
    normal (invertible mixing whose log-magnitude grows with the shift) and
    ``b_k = domain_shift_scale * N(0, I)``. Identities never repeat across domains.
    """

    num_domains: int = 4
    identities_per_domain: int = 32
    records_per_identity: int = 10
    d_in: int = 32
    domain_shift_scale: float = 1.5
    identity_scale: float = 1.0
    noise_scale: float = 0.5
    cameras_per_domain: int = 5
    seed: int = 0

    def validate(self):
        for name in ("num_domains", "identities_per_domain", "records_per_identity",
                     "cameras_per_domain"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"SyntheticSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.d_in < 2:
            raise ConfigError(f"SyntheticSpec.d_in must be >= 2, got {self.d_in}")
        for name in ("domain_shift_scale", "identity_scale", "noise_scale"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"SyntheticSpec.{name} must be finite and >= 0, got {v}")
        if self.identity_scale <= self.noise_scale:
            warnings.warn(
                f"identity_scale ({self.identity_scale}) <= noise_scale ({self.noise_scale}): "
                "identities will be hard to separate",
                stacklevel=3,
            )


def _generator_parts(spec: SyntheticSpec):
    root = np.random.SeedSequence(spec.seed)
    center_ss, domain_ss, noise_ss = root.spawn(3)
    n_ids = spec.num_domains * spec.identities_per_domain
    centers = spec.identity_scale * np.random.default_rng(center_ss).standard_normal(
        (n_ids, spec.d_in)
    )
    drng = np.random.default_rng(domain_ss)
    mats, offsets = [], []
    for _ in range(spec.num_domains):
        g = drng.standard_normal((spec.d_in, spec.d_in))
        b = drng.standard_normal(spec.d_in)
        if spec.domain_shift_scale == 0:
            mats.append(np.eye(spec.d_in))
            offsets.append(np.zeros(spec.d_in))
        else:
            mats.append(expm(spec.domain_shift_scale / 4.0 * g / math.sqrt(spec.d_in)))
            offsets.append(spec.domain_shift_scale * b)
    return centers, np.stack(mats), np.stack(offsets), np.random.default_rng(noise_ss)


def domain_transforms(spec: SyntheticSpec):
    """The per-domain ``(A_k, b_k)`` and identity centers used by :func:`generate_synthetic`."""
    centers, mats, offsets, _ = _generator_parts(spec)
    return centers, mats, offsets


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    spec.validate()
    centers, mats, offsets, noise_rng = _generator_parts(spec)
    ipd, rpi, d = spec.identities_per_domain, spec.records_per_identity, spec.d_in
    emb, ids, doms, cams = [], [], [], []
    for k in range(spec.num_domains):
        gids = k * ipd + np.arange(ipd)
        clean = np.repeat(centers[gids], rpi, axis=0)
        noise = spec.noise_scale * noise_rng.standard_normal((ipd * rpi, d))
        emb.append((clean + noise) @ mats[k].T + offsets[k])
        ids.append(np.repeat(gids, rpi))
        doms.append(np.full(ipd * rpi, k))
        cams.append(np.arange(ipd * rpi) % spec.cameras_per_domain)
    emb = np.concatenate(emb)
    return Dataset(
        emb, np.concatenate(ids), np.concatenate(doms), np.concatenate(cams),
        np.arange(len(emb)), "train",
    )


def split_probe_gallery(dataset: Dataset, probe_fraction: float, seed) -> tuple[Dataset, Dataset]:
    if not 0 < probe_fraction < 1:
        raise ConfigError(f"probe_fraction must lie in (0, 1), got {probe_fraction}")
    uniq, counts = np.unique(dataset.identities, return_counts=True)
    single = uniq[counts < 2]
    if len(single):
        raise SplitError("identities with a single record cannot be split: "
                         + ", ".join(str(int(i)) for i in single))
    rng = np.random.default_rng(seed)
    probe_idx = []
    for ident in uniq:
        members = np.flatnonzero(dataset.identities == ident)
        members = members[rng.permutation(len(members))]
        n_probe = min(max(int(round(probe_fraction * len(members))), 1), len(members) - 1)
        probe_idx.append(members[:n_probe])
    probe_idx = np.sort(np.concatenate(probe_idx))
    gallery_idx = np.setdiff1d(np.arange(len(dataset)), probe_idx)
    return dataset.subset(probe_idx, "probe"), dataset.subset(gallery_idx, "gallery")


# ---------------------------------------------------------------- file formats


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt:
        if fmt not in ("text", "binary"):
            raise ConfigError(f"unknown embedding format {fmt!r}")
        return fmt
    return "binary" if path.suffix == ".gmne" else "text"


def save_embeddings(dataset: Dataset, path, fmt: str | None = None) -> Path:
    path = Path(path)
    fmt = _infer_format(path, fmt)
    try:
        if fmt == "binary":
            path.write_bytes(_encode_binary(dataset))
        else:
            path.write_text(_encode_text(dataset), encoding="utf-8")
    except OSError as exc:
        raise ReportIOError(f"cannot write {path}: {exc}") from exc
    return path


def load_embeddings(path, fmt: str | None = None) -> Dataset:
    path = Path(path)
    fmt = _infer_format(path, fmt)
    try:
        if fmt == "binary":
            return _decode_binary(path.read_bytes())
        return _decode_text(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ReportIOError(f"cannot read {path}: {exc}") from exc


def _encode_text(ds: Dataset) -> str:
    lines = [f"{TEXT_MAGIC}\tversion={FORMAT_VERSION}\td_in={ds.d_in}\trecords={len(ds)}\trole={ds.role}"]
    for k in range(len(ds)):
        head = f"{ds.sample_ids[k]}\t{ds.identities[k]}\t{ds.domains[k]}\t{ds.cameras[k]}"
        lines.append(head + "\t" + "\t".join(repr(float(v)) for v in ds.embeddings[k]))
    return "\n".join(lines) + "\n"


def _decode_text(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(TEXT_MAGIC):
        raise IngestionError("missing #GMNE-TEXT header", row=1)
    header = {}
    for field in lines[0].split("\t")[1:]:
        key, _, value = field.partition("=")
        header[key] = value
    try:
        version, d_in, n = int(header["version"]), int(header["d_in"]), int(header["records"])
    except (KeyError, ValueError) as exc:
        raise IngestionError(f"malformed header: {exc}", row=1) from None
    if version != FORMAT_VERSION:
        raise IngestionError(f"unsupported version {version}", row=1)
    role = header.get("role", "train")
    labels, emb, seen = [], [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4 + d_in:
            raise IngestionError(
                f"expected {4 + d_in} fields (4 labels + d_in={d_in}), got {len(parts)}", row=lineno
            )
        try:
            labels.append([int(p) for p in parts[:4]])
            emb.append([float(p) for p in parts[4:]])
        except ValueError as exc:
            raise IngestionError(f"unparsable value: {exc}", row=lineno) from None
        if any(v < 0 for v in labels[-1][1:]):
            raise IngestionError("labels must be non-negative", row=lineno)
        if labels[-1][0] in seen:
            raise IngestionError(f"duplicate sample_id {labels[-1][0]}", row=lineno)
        seen.add(labels[-1][0])
    if len(labels) != n:
        raise IngestionError(f"header announces {n} records, found {len(labels)}")
    lab = np.array(labels, dtype=np.int64).reshape(-1, 4)
    return Dataset(np.array(emb, dtype=np.float64).reshape(-1, d_in),
                   lab[:, 1], lab[:, 2], lab[:, 3], lab[:, 0], role)


def _record_dtype(d_in: int):
    return np.dtype([("sample_id", "<i8"), ("identity", "<i8"), ("domain", "<i8"),
                     ("camera", "<i8"), ("embedding", "<f8", (d_in,))])


def _encode_binary(ds: Dataset) -> bytes:
    rec = np.zeros(len(ds), dtype=_record_dtype(ds.d_in))
    rec["sample_id"], rec["identity"] = ds.sample_ids, ds.identities
    rec["domain"], rec["camera"] = ds.domains, ds.cameras
    rec["embedding"] = ds.embeddings
    header = _BIN_HEADER.pack(BINARY_MAGIC, FORMAT_VERSION, ds.d_in, len(ds), ROLES.index(ds.role))
    return header + rec.tobytes()


def _decode_binary(blob: bytes) -> Dataset:
    if len(blob) < _BIN_HEADER.size:
        raise IngestionError("file shorter than GMNE header")
    magic, version, d_in, n, role = _BIN_HEADER.unpack_from(blob)
    if magic != BINARY_MAGIC:
        raise IngestionError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise IngestionError(f"unsupported version {version}")
    if role >= len(ROLES):
        raise IngestionError(f"bad role code {role}")
    dtype = _record_dtype(d_in)
    body = blob[_BIN_HEADER.size:]
    if len(body) != n * dtype.itemsize:
        full = len(body) // dtype.itemsize
        raise IngestionError(f"truncated or oversized body: expected {n} records of "
                             f"{dtype.itemsize} bytes", row=full + 1)
    rec = np.frombuffer(body, dtype=dtype, count=n)
    uniq, counts = np.unique(rec["sample_id"], return_counts=True)
    if len(uniq) != n:
        dup = uniq[counts > 1][0]
        row = int(np.flatnonzero(rec["sample_id"] == dup)[1]) + 1
        raise IngestionError(f"duplicate sample_id {int(dup)}", row=row)
    return Dataset(rec["embedding"], rec["identity"], rec["domain"], rec["camera"],
                   rec["sample_id"], ROLES[role])
