"""Command line: export embeddings, verify exported files."""

from __future__ import annotations

import argparse
import sys

from .errors import EncodingError, InputError
from .export import ExportSpec, check, export

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def cmd_export(args) -> int:
    spec = ExportSpec(model_id=args.model, input_path=args.input,
                      output_path=args.out, max_length=args.max_length,
                      batch_size=args.batch_size)
    summary = export(spec)
    hist = " ".join(f"{c}:{n}" for c, n in summary.class_histogram.items())
    print(f"[export] {summary.count} samples, dim={summary.dim}, "
          f"classes {hist} -> {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    ok, reason = check(args.gape, args.input)
    if ok:
        print("[verify] OK")
        return EXIT_OK
    print(f"[verify] MISMATCH: {reason}", file=sys.stderr)
    return EXIT_DATA


def build_parser() -> _Parser:
    parser = _Parser(prog="gape-export",
                     description="Frozen-LM CLS embeddings of labeled text, "
                                 "written as GAPE files")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="embed a JSONL file into a GAPE file")
    p.add_argument("--model", required=True,
                   help="encoder name or local model directory")
    p.add_argument("--input", required=True, help="JSONL with text + label")
    p.add_argument("--out", required=True, help="output GAPE path")
    p.add_argument("--max-length", type=int, default=256)
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("verify", help="check a GAPE file against its source")
    p.add_argument("--gape", required=True)
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    from transformers.utils import logging as hf_logging
    hf_logging.set_verbosity_error()
    hf_logging.disable_progress_bar()

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except EncodingError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
