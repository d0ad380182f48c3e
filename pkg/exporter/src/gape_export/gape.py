"""Minimal writer/reader for the GAPE v1 embedding-dataset file format.

The format is fixed at the byte level so this tool interoperates with any
consumer without sharing code:

    offset 0   magic "GAPE"
    offset 4   u32 version (1)
    offset 8   u64 count N
    offset 16  u32 dim d
    offset 20  u32 num_classes C
    offset 24  u32 flags (bit 0: text records follow the embeddings)
    offset 28  N x u32 labels
    ...        N x d x f32 embeddings, row-major
    ...        N x (u32 byte length, UTF-8 bytes)   when flag bit 0 is set

Everything is little-endian; embeddings are 32-bit floats.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import InputError

MAGIC = b"GAPE"
VERSION = 1
FLAG_TEXTS = 1


def write_gape(path, labels, embeddings, num_classes: int,
               texts: list[str] | None = None) -> None:
    labels = np.asarray(labels, dtype=np.uint32)
    embeddings = np.ascontiguousarray(embeddings, dtype="<f4")
    n, d = embeddings.shape
    if labels.shape != (n,):
        raise ValueError(f"{n} embeddings but {labels.shape[0]} labels")
    if texts is not None and len(texts) != n:
        raise ValueError(f"{n} embeddings but {len(texts)} texts")
    flags = FLAG_TEXTS if texts is not None else 0
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQIII", VERSION, n, d, num_classes, flags))
        f.write(labels.astype("<u4").tobytes())
        f.write(embeddings.tobytes())
        if texts is not None:
            for t in texts:
                raw = t.encode("utf-8")
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)


def read_gape(path) -> tuple[np.ndarray, np.ndarray, int, list[str] | None]:
    """Returns (labels, embeddings, num_classes, texts)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise InputError(f"{path}: bad magic")
    if len(blob) < 28:
        raise InputError(f"{path}: header truncated")
    version, n, d, c, flags = struct.unpack_from("<IQIII", blob, 4)
    if version != VERSION:
        raise InputError(f"{path}: unsupported version {version}")
    need = 28 + 4 * n + 4 * n * d
    if len(blob) < need:
        raise InputError(f"{path}: truncated (need {need} bytes, have {len(blob)})")
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=28).astype(np.int64)
    embeddings = np.frombuffer(blob, dtype="<f4", count=n * d,
                               offset=28 + 4 * n).reshape(n, d).copy()
    texts = None
    if flags & FLAG_TEXTS:
        texts = []
        offset = need
        for i in range(n):
            if offset + 4 > len(blob):
                raise InputError(f"{path}: truncated in text record {i}")
            (nbytes,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            if offset + nbytes > len(blob):
                raise InputError(f"{path}: truncated in text record {i}")
            texts.append(blob[offset:offset + nbytes].decode("utf-8"))
            offset += nbytes
    return labels, embeddings, int(c), texts
