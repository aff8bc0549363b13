"""Command-line front end; flags mirror the export job fields.

Prints the export report as one JSON object on stdout. Exit codes: 0
success, 2 configuration or encoder problems, 3 unreadable input file,
1 anything else.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .errors import ExportError
from .export import ExportJob, export, export_response_set


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--input", required=True, help="input JSONL path")
    common.add_argument("--out", required=True, help="output CGME path")
    common.add_argument("--encoder", default="hash:64",
                        help="encoder name: hash:<dim> or hf:<model> (default %(default)s)")
    common.add_argument("--batch-size", type=int, default=32)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="encoder-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    exp = sub.add_parser("export", parents=[common],
                         help="encode a message/reply pair corpus")
    exp.add_argument("--languages", default="",
                     help="comma-separated language table; default: derive from input")
    exp.add_argument("--max-message-tokens", type=int, default=64)
    exp.add_argument("--max-reply-tokens", type=int, default=32)

    rs = sub.add_parser("response-set", parents=[common],
                        help="encode a reply frequency table")
    rs.add_argument("--lang", required=True, help="language of the response set")
    rs.add_argument("--max-reply-tokens", type=int, default=32)
    rs.add_argument("--threshold", type=int, default=20,
                    help="keep replies with count strictly above this (default %(default)s)")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "export":
            languages = tuple(l for l in args.languages.split(",") if l)
            report = export(ExportJob(
                input_path=args.input, output_path=args.out, encoder=args.encoder,
                languages=languages, batch_size=args.batch_size,
                max_message_tokens=args.max_message_tokens,
                max_reply_tokens=args.max_reply_tokens))
        else:
            report = export_response_set(
                args.input, args.lang, args.out, encoder=args.encoder,
                batch_size=args.batch_size, max_reply_tokens=args.max_reply_tokens,
                threshold=args.threshold)
    except (ExportError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(dataclasses.asdict(report)))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
