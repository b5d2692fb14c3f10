"""Command line driver: export-images, export-texts, build-manifest.

Diagnostics and progress go to stderr; each command prints one JSON
summary object to stdout so callers can script the pipeline. Exit 0
means the command's outputs are on disk and complete.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .export import ExportJob, export_images, export_texts
from .manifest import (DEFAULT_SEPARATOR, build_manifest, check_references,
                       load_captions, write_captions, write_manifest)
from .stores import ExportError, read_ids


def _emit(payload: dict) -> None:
    json.dump(payload, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")


def cmd_export_images(args) -> int:
    job = ExportJob(encoder=args.encoder, out_path=args.out,
                    image_dir=args.images_dir, batch_size=args.batch_size,
                    device=args.device)
    report = export_images(job, strict=args.strict)
    _emit({"count": report.count, "dim": report.dim,
           "skipped": report.skipped, "out": str(args.out)})
    return 0


def cmd_export_texts(args) -> int:
    job = ExportJob(encoder=args.encoder, out_path=args.out,
                    captions=load_captions(args.captions),
                    batch_size=args.batch_size, device=args.device)
    report = export_texts(job)
    _emit({"count": report.count, "dim": report.dim, "out": str(args.out)})
    return 0


def cmd_build_manifest(args) -> int:
    raw = json.loads(Path(args.listing).read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise ExportError(f"{args.listing}: listing must be a JSON array")
    result = build_manifest(raw, separator=args.separator,
                            category=args.category)
    if args.check_images:
        targets = read_ids(args.check_targets) if args.check_targets else None
        check_references(result.records, read_ids(args.check_images), targets)
    write_manifest(args.out, result.records)
    if args.captions_out:
        write_captions(args.captions_out, result.captions)
    _emit({"rows": len(result.records), "texts": len(result.captions),
           "out": str(args.out)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feature-exporter",
        description="encode retrieval datasets into embedding stores "
                    "and triplet manifests")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--encoder", default="hashed-64",
                       help="encoder tag, e.g. hashed-64")
        p.add_argument("--out", required=True, help="store destination (.emb)")
        p.add_argument("--batch-size", type=int, default=64,
                       dest="batch_size")
        p.add_argument("--device", default="cpu")

    p = sub.add_parser("export-images", help="encode an image directory")
    common(p)
    p.add_argument("--images-dir", required=True, dest="images_dir")
    p.add_argument("--strict", action="store_true",
                   help="abort on the first undecodable image")
    p.set_defaults(func=cmd_export_images)

    p = sub.add_parser("export-texts", help="encode a caption table")
    common(p)
    p.add_argument("--captions", required=True,
                   help="JSON object mapping text id -> caption")
    p.set_defaults(func=cmd_export_texts)

    p = sub.add_parser("build-manifest",
                       help="turn a raw triplet listing into a manifest")
    p.add_argument("--listing", required=True, help="JSON array of rows")
    p.add_argument("--out", required=True, help="manifest destination (.jsonl)")
    p.add_argument("--captions-out", dest="captions_out",
                   help="also write the joined caption table here")
    p.add_argument("--separator", default=DEFAULT_SEPARATOR,
                   help="joiner between multiple captions of one row")
    p.add_argument("--category", help="category tag for rows that carry none")
    p.add_argument("--check-images", dest="check_images",
                   help="store whose ids must cover image references")
    p.add_argument("--check-targets", dest="check_targets",
                   help="separate store covering target references")
    p.set_defaults(func=cmd_build_manifest)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
