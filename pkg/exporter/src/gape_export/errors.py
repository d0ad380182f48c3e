"""Error types shared across the exporter."""


class InputError(ValueError):
    """The input JSONL (or a flag) is malformed; maps to exit code 2."""


class EncodingError(RuntimeError):
    """The encoder produced unusable output; maps to exit code 3."""
