"""Embedding dataset container, binary file format, synthetic data, splitting.

The on-disk format (magic ``GAPE``, version 1) is fixed byte-for-byte so other
tools can produce training data without sharing any code with this package:

    magic "GAPE" (4 bytes)
    version      u32  = 1
    count        u64  (N)
    dim          u32  (d)
    num_classes  u32  (C)
    flags        u32  (bit 0: texts present)
    labels       N x u32
    embeddings   N x d x f32, row-major
    texts        N x (byte_len u32, UTF-8 bytes)   -- only if flag bit 0

All integers little-endian. Embeddings are stored in 32-bit floats; training
code may upcast internally.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError

GAPE_MAGIC = b"GAPE"
GAPE_VERSION = 1
FLAG_TEXTS = 1


@dataclass
class EmbeddingDataset:
    """N labeled d-dimensional embedding vectors with optional source texts."""

    labels: np.ndarray          # (N,) int64, values in [0, num_classes)
    embeddings: np.ndarray      # (N, d) float32
    num_classes: int
    texts: list[str] | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        self.validate()

    @property
    def count(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def validate(self):
        if self.embeddings.ndim != 2:
            raise ValueError(f"embeddings must be 2-D, got shape {self.embeddings.shape}")
        n = self.embeddings.shape[0]
        if n == 0:
            raise ValueError("dataset must contain at least one sample")
        if self.embeddings.shape[1] == 0:
            raise ValueError("embedding dimension must be positive")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.labels.shape != (n,):
            raise ValueError(f"labels length {self.labels.shape} does not match count {n}")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("embeddings contain non-finite entries")
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")
        if self.texts is not None and len(self.texts) != n:
            raise ValueError(f"texts length {len(self.texts)} does not match count {n}")

    def subset(self, indices: np.ndarray) -> "EmbeddingDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return EmbeddingDataset(
            labels=self.labels[indices].copy(),
            embeddings=self.embeddings[indices].copy(),
            num_classes=self.num_classes,
            texts=None if self.texts is None else [self.texts[i] for i in indices],
        )


@dataclass
class SyntheticSpec:
    """Gaussian cluster mixture: one cluster per class, isotropic noise."""

    num_clusters: int
    per_cluster: int
    dim: int
    center_spread: float
    noise_sigma: float
    seed: int

    def __post_init__(self):
        if self.num_clusters < 2:
            raise ValueError("num_clusters must be >= 2")
        if self.per_cluster < 1:
            raise ValueError("per_cluster must be >= 1")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if not self.center_spread > 0:
            raise ValueError("center_spread must be > 0")
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be > 0")


def write_gape(dataset: EmbeddingDataset, path) -> None:
    """Write a dataset to ``path`` in the GAPE v1 binary format."""
    dataset.validate()
    flags = FLAG_TEXTS if dataset.texts is not None else 0
    try:
        with open(path, "wb") as f:
            f.write(GAPE_MAGIC)
            f.write(struct.pack("<IQIII", GAPE_VERSION, dataset.count, dataset.dim,
                                dataset.num_classes, flags))
            f.write(dataset.labels.astype("<u4").tobytes())
            f.write(dataset.embeddings.astype("<f4").tobytes())
            if dataset.texts is not None:
                for t in dataset.texts:
                    raw = t.encode("utf-8")
                    f.write(struct.pack("<I", len(raw)))
                    f.write(raw)
    except OSError as e:
        raise DataFormatError(f"cannot write {path}: {e}") from e


def read_gape(path) -> EmbeddingDataset:
    """Read a GAPE v1 file, rejecting malformed input rather than truncating."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataFormatError(f"cannot read {path}: {e}") from e

    if len(blob) < 4 or blob[:4] != GAPE_MAGIC:
        raise DataFormatError(f"{path}: not a GAPE file (bad magic)")
    if len(blob) < 28:
        raise DataFormatError(f"{path}: truncated file (header needs 28 bytes, have {len(blob)})")
    version, count, dim, num_classes, flags = struct.unpack_from("<IQIII", blob, 4)
    if version != GAPE_VERSION:
        raise DataFormatError(f"{path}: unsupported GAPE version {version}")
    if count == 0:
        raise DataFormatError(f"{path}: empty dataset (count is 0)")
    if dim == 0:
        raise DataFormatError(f"{path}: embedding dimension is 0")

    offset = 28
    expected = offset + 4 * count + 4 * count * dim
    if len(blob) < expected:
        raise DataFormatError(
            f"{path}: truncated file (expected at least {expected} bytes, have {len(blob)})")

    labels = np.frombuffer(blob, dtype="<u4", count=count, offset=offset).astype(np.int64)
    offset += 4 * count
    if np.any(labels >= num_classes):
        raise DataFormatError(f"{path}: corrupt labels (label >= num_classes={num_classes})")
    embeddings = np.frombuffer(blob, dtype="<f4", count=count * dim,
                               offset=offset).reshape(count, dim).copy()
    offset += 4 * count * dim
    if not np.all(np.isfinite(embeddings)):
        raise DataFormatError(f"{path}: embeddings contain non-finite entries")

    texts = None
    if flags & FLAG_TEXTS:
        texts = []
        for i in range(count):
            if offset + 4 > len(blob):
                raise DataFormatError(
                    f"{path}: truncated file (text record {i}: expected at least "
                    f"{offset + 4} bytes, have {len(blob)})")
            (nbytes,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            if offset + nbytes > len(blob):
                raise DataFormatError(
                    f"{path}: truncated file (text record {i}: expected at least "
                    f"{offset + nbytes} bytes, have {len(blob)})")
            texts.append(blob[offset:offset + nbytes].decode("utf-8"))
            offset += nbytes

    return EmbeddingDataset(labels=labels, embeddings=embeddings,
                            num_classes=num_classes, texts=texts)


def gen_synthetic(spec: SyntheticSpec) -> EmbeddingDataset:
    """Generate a labeled Gaussian cluster mixture, deterministic given the seed.

    Cluster centers are drawn once as N(0, center_spread^2) per coordinate;
    each cluster's samples are center + N(0, noise_sigma^2). Label = cluster
    index; rows are ordered cluster by cluster.
    """
    rng = np.random.default_rng(spec.seed)
    centers = rng.normal(0.0, spec.center_spread, size=(spec.num_clusters, spec.dim))
    rows = []
    for c in range(spec.num_clusters):
        rows.append(centers[c] + rng.normal(0.0, spec.noise_sigma,
                                            size=(spec.per_cluster, spec.dim)))
    embeddings = np.concatenate(rows, axis=0).astype(np.float32)
    labels = np.repeat(np.arange(spec.num_clusters, dtype=np.int64), spec.per_cluster)
    return EmbeddingDataset(labels=labels, embeddings=embeddings,
                            num_classes=spec.num_clusters)


def split(dataset: EmbeddingDataset, test_fraction: float,
          seed: int) -> tuple[EmbeddingDataset, EmbeddingDataset]:
    """Stratified train/test split via seeded per-class shuffles.

    Each class contributes round(test_fraction * n_c) samples to the test
    side, so per-class proportions are preserved to within one sample. Output
    rows keep their original relative order.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in range(dataset.num_classes):
        class_idx = np.flatnonzero(dataset.labels == c)
        n_test = int(round(test_fraction * len(class_idx)))
        chosen = rng.permutation(class_idx)[:n_test]
        test_idx.append(chosen)
    test_mask = np.zeros(dataset.count, dtype=bool)
    if test_idx:
        test_mask[np.concatenate(test_idx).astype(np.int64)] = True
    n_test = int(test_mask.sum())
    if n_test == 0 or n_test == dataset.count:
        raise ValueError(
            f"test_fraction={test_fraction} produces an empty partition "
            f"({dataset.count - n_test} train / {n_test} test)")
    train = dataset.subset(np.flatnonzero(~test_mask))
    test = dataset.subset(np.flatnonzero(test_mask))
    return train, test
