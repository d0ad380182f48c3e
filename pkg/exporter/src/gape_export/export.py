"""Top-level export and verification operations."""

from __future__ import annotations

import collections
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from . import gape, jsonl
from .errors import InputError


@dataclass
class ExportSpec:
    """Everything one export run needs."""

    model_id: str                 # hub name or local model directory
    input_path: str               # JSONL with "text" and "label" per line
    output_path: str              # GAPE file to write
    pooling: str = "cls"
    max_length: int = 256
    batch_size: int = 32

    def __post_init__(self):
        if self.pooling != "cls":
            raise ValueError(f"unsupported pooling {self.pooling!r} "
                             "(only \"cls\" is defined)")
        if self.max_length < 1:
            raise ValueError("max_length must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class ExportSummary:
    count: int
    dim: int
    class_histogram: dict[int, int] = field(default_factory=dict)


def export(spec: ExportSpec) -> ExportSummary:
    """Embed every input line with the frozen encoder and write a GAPE file.

    Sample i of the output corresponds to line i of the input; texts are
    stored alongside the embeddings so downstream reports stay readable.
    """
    texts, labels = jsonl.read_labeled_jsonl(spec.input_path)
    tokenizer, model = enc.load_encoder(spec.model_id)
    embeddings = enc.embed_cls(tokenizer, model, texts,
                               max_length=spec.max_length,
                               batch_size=spec.batch_size)
    num_classes = max(labels) + 1
    gape.write_gape(spec.output_path, labels, embeddings, num_classes,
                    texts=texts)
    histogram = dict(sorted(collections.Counter(labels).items()))
    return ExportSummary(count=len(texts), dim=embeddings.shape[1],
                         class_histogram=histogram)


def check(gape_path, input_path) -> tuple[bool, str]:
    """Cross-check an exported file against its source JSONL.

    Returns (ok, reason); the reason names the first mismatch found.
    """
    try:
        src_texts, src_labels = jsonl.read_labeled_jsonl(input_path)
    except InputError as e:
        return False, f"source unreadable: {e}"
    try:
        labels, embeddings, num_classes, texts = gape.read_gape(gape_path)
    except InputError as e:
        return False, f"GAPE unreadable: {e}"

    if len(labels) != len(src_labels):
        return False, (f"count mismatch: {len(labels)} exported vs "
                       f"{len(src_labels)} source lines")
    if num_classes != max(src_labels) + 1:
        return False, (f"class count mismatch: header says {num_classes}, "
                       f"source has {max(src_labels) + 1}")
    ours = np.bincount(labels, minlength=num_classes)
    theirs = np.bincount(np.asarray(src_labels), minlength=num_classes)
    if not np.array_equal(ours, theirs):
        return False, (f"label histogram mismatch: {ours.tolist()} vs "
                       f"{theirs.tolist()}")
    if not np.array_equal(labels, np.asarray(src_labels)):
        return False, "labels differ from the source order"
    if texts is None:
        return False, "exported file carries no texts"
    for i, (a, b) in enumerate(zip(texts, src_texts)):
        if a != b:
            return False, f"text {i} differs from the source"
    if not np.all(np.isfinite(embeddings)):
        return False, "embeddings contain non-finite values"
    return True, ""


def verify(gape_path, input_path) -> bool:
    ok, _ = check(gape_path, input_path)
    return ok
