"""Labeled-text input: JSON lines with fields "text" and "label"."""

from __future__ import annotations

import json

from .errors import InputError


def read_labeled_jsonl(path) -> tuple[list[str], list[int]]:
    """Parse a JSONL file of {"text": str, "label": int} records.

    Returns (texts, labels) in file order. Any malformed line fails with its
    1-based line number. Labels must form a contiguous 0..C-1 range with
    C >= 2; gaps or negative values are rejected.
    """
    texts: list[str] = []
    labels: list[int] = []
    try:
        f = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}") from e
    with f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                raise InputError(f"{path}:{lineno}: blank line")
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise InputError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(record, dict):
                raise InputError(f"{path}:{lineno}: expected an object, got "
                                 f"{type(record).__name__}")
            if "text" not in record or "label" not in record:
                raise InputError(f"{path}:{lineno}: missing \"text\" or \"label\"")
            text, label = record["text"], record["label"]
            if not isinstance(text, str):
                raise InputError(f"{path}:{lineno}: \"text\" must be a string")
            if isinstance(label, bool) or not isinstance(label, int):
                raise InputError(f"{path}:{lineno}: \"label\" must be an integer")
            if label < 0:
                raise InputError(f"{path}:{lineno}: negative label {label}")
            texts.append(text)
            labels.append(label)

    if not texts:
        raise InputError(f"{path}: no records")
    present = sorted(set(labels))
    top = present[-1]
    if top < 1:
        raise InputError(f"{path}: need at least 2 classes, found only {present}")
    missing = [c for c in range(top + 1) if c not in present]
    if missing:
        raise InputError(f"{path}: label gap - classes {missing} absent from "
                         f"range 0..{top}")
    return texts, labels
