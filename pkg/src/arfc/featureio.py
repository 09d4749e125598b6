"""Synthetic paired embeddings, the ARFD dataset file, and deterministic batching.

ARFD layout (little-endian)::

    b"ARFD" | u32 version | u64 N | u32 D | u8 dtype (0 = f32)
    N x ( u8 modality | u32 label | u32 pair_id | D x f32 )
"""

from __future__ import annotations

import os
import struct
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .numkit import Rng

MAGIC = b"ARFD"
VERSION = 1
_HEADER = struct.Struct("<4sIQIB")

VISUAL, TEXT = 0, 1


class FormatError(ValueError):
    """Base class for malformed ARFD / ARFC files."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


def _record_dtype(D: int) -> np.dtype:
    return np.dtype([("modality", "u1"), ("label", "<u4"), ("pair_id", "<u4"), ("x", "<f4", (D,))])


@dataclass
class FeatureDataset:
    features: np.ndarray  # (N, D) float32
    modality: np.ndarray  # (N,) uint8
    labels: np.ndarray  # (N,) uint32
    pair_ids: np.ndarray  # (N,) uint32

    def __post_init__(self):
        f = np.ascontiguousarray(self.features, dtype=np.float32)
        self.features = f if f.ndim == 2 else f.reshape(len(f), -1)
        self.modality = np.asarray(self.modality, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.uint32)
        self.pair_ids = np.asarray(self.pair_ids, dtype=np.uint32)
        n = len(self.features)
        if not (len(self.modality) == len(self.labels) == len(self.pair_ids) == n):
            raise ValueError("per-record arrays disagree on N")

    @property
    def N(self) -> int:
        return len(self.features)

    @property
    def D(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.N else 0

    def subset(self, idx) -> "FeatureDataset":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.intp)
        return FeatureDataset(self.features[idx], self.modality[idx], self.labels[idx], self.pair_ids[idx])

    def with_features(self, features: np.ndarray) -> "FeatureDataset":
        """Same records, different vectors (e.g. compressed codes)."""
        return FeatureDataset(features, self.modality, self.labels, self.pair_ids)

    def by_modality(self, m: int) -> "FeatureDataset":
        return self.subset(np.flatnonzero(self.modality == m))


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 16
    pairs_per_class: int = 32
    dim: int = 64
    latent_dim: int = 64
    noise: float = 0.1
    spread: float = 1.0
    # per-latent-axis scale decays as decay**i, giving a graded PCA spectrum
    decay: float = 0.99
    # size of each modality's private perturbation of the shared latent->feature map
    modality_gap: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim > self.dim:
            raise ValueError("latent_dim must not exceed dim")
        if self.noise < 0 or self.spread < 0 or self.modality_gap < 0:
            raise ValueError("noise, spread and modality_gap must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_synthetic(cfg: SynthConfig) -> FeatureDataset:
    """Two noisy modality views of shared class-clustered latents, L2-normalised.

    Records are interleaved per pair: (visual, text), (visual, text), ...
    """
    rng = Rng(cfg.seed)
    C, P, D, L = cfg.classes, cfg.pairs_per_class, cfg.dim, cfg.latent_dim
    scale = cfg.decay ** np.arange(L)
    centers = rng.fold(0).normal((C, L))
    labels = np.repeat(np.arange(C), P)
    latent = (centers[labels] + cfg.spread * rng.fold(1).normal((C * P, L))) * scale
    shared = rng.fold(2).normal((D, L)) / np.sqrt(L)
    views = []
    for m in (VISUAL, TEXT):
        mrng = rng.fold(3, m)
        A = shared + cfg.modality_gap * mrng.fold(0).normal((D, L)) / np.sqrt(L)
        clean = _unit_rows(latent @ A.T)
        noisy = clean + cfg.noise * mrng.fold(1).normal((C * P, D)) / np.sqrt(D)
        views.append(_unit_rows(noisy))
    n_pairs = C * P
    features = np.empty((2 * n_pairs, D))
    features[0::2], features[1::2] = views[0], views[1]
    modality = np.tile([VISUAL, TEXT], n_pairs)
    pair_ids = np.repeat(np.arange(n_pairs), 2)
    return FeatureDataset(features, modality, np.repeat(labels, 2), pair_ids)


def split_pairs(ds: FeatureDataset, holdout_fraction: float, seed: int) -> tuple[FeatureDataset, FeatureDataset]:
    """Split by pair id, stratified per class, so both members land on the same side."""
    rng = Rng(seed)
    train_pairs, test_pairs = [], []
    for c in range(ds.num_classes):
        pairs = np.unique(ds.pair_ids[ds.labels == c])
        pairs = pairs[rng.fold(c).permutation(len(pairs))]
        n_test = int(round(holdout_fraction * len(pairs)))
        test_pairs.extend(pairs[:n_test])
        train_pairs.extend(pairs[n_test:])
    in_test = np.isin(ds.pair_ids, test_pairs)
    return ds.subset(np.flatnonzero(~in_test)), ds.subset(np.flatnonzero(in_test))


# ---------------------------------------------------------------- file format


def dumps(ds: FeatureDataset) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, ds.N, ds.D, 0)
    rec = np.empty(ds.N, dtype=_record_dtype(ds.D))
    rec["modality"], rec["label"], rec["pair_id"], rec["x"] = ds.modality, ds.labels, ds.pair_ids, ds.features
    return header + rec.tobytes()


def loads(buf: bytes) -> FeatureDataset:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("not an ARFD file (bad magic)")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError("ARFD header is truncated")
    _, version, N, D, dtype = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"ARFD version {version} is not supported (expected {VERSION})")
    if dtype != 0:
        raise FormatError(f"unsupported dtype tag {dtype}")
    rdt = _record_dtype(D)
    need = _HEADER.size + N * rdt.itemsize
    if len(buf) < need:
        raise TruncatedFileError(f"ARFD body is truncated: {len(buf)} < {need} bytes")
    if len(buf) > need:
        raise FormatError("trailing bytes after ARFD records")
    rec = np.frombuffer(buf, dtype=rdt, count=N, offset=_HEADER.size)
    features = rec["x"].reshape(N, D) if N else np.zeros((0, D), dtype=np.float32)
    return FeatureDataset(features.copy(), rec["modality"].copy(), rec["label"].copy(), rec["pair_id"].copy())


def save(ds: FeatureDataset, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(ds))


def load(path: str | os.PathLike) -> FeatureDataset:
    with open(path, "rb") as fh:
        return loads(fh.read())


# ---------------------------------------------------------------- batching


def batches(
    ds: FeatureDataset, B: int, seed: int, paired: bool = False, epochs: int | None = None
) -> Iterator[np.ndarray]:
    """Yield index arrays of size ``B``; reshuffled every epoch from ``(seed, epoch)``.

    In paired mode whole pairs are shuffled and kept together (both members,
    adjacent), so ``B`` must be even. The tail of an epoch that cannot fill a
    batch is dropped. ``epochs=None`` streams forever.
    """
    if B > ds.N or B < 1:
        raise ValueError(f"batch size {B} must lie in [1, N={ds.N}]")
    if paired:
        if B % 2:
            raise ValueError("paired batches need an even batch size")
        order = np.argsort(ds.pair_ids, kind="stable")
        groups = np.split(order, np.flatnonzero(np.diff(ds.pair_ids[order])) + 1)
        if any(len(g) != 2 for g in groups):
            raise ValueError("paired batching needs every pair id to occur exactly twice")
        units = np.stack(groups)
    else:
        units = np.arange(ds.N).reshape(-1, 1)
    per_batch = B // units.shape[1]
    root = Rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        perm = root.fold(epoch).permutation(len(units))
        for start in range(0, len(units) - per_batch + 1, per_batch):
            yield units[perm[start : start + per_batch]].reshape(-1)
        epoch += 1
