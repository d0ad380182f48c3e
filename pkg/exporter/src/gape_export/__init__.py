"""Export frozen language-model CLS embeddings of labeled text to GAPE files."""

from .errors import EncodingError, InputError
from .export import ExportSpec, ExportSummary, check, export, verify

__version__ = "0.1.0"

__all__ = [
    "EncodingError",
    "ExportSpec",
    "ExportSummary",
    "InputError",
    "check",
    "export",
    "verify",
]
