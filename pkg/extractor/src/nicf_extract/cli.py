"""nicf-extract command line.

Single image: nicf-extract --image photo.jpg --out photo.nicf
Batch:        nicf-extract --manifest data/manifest.jsonl --out-dir features_out
"""

from __future__ import annotations

import argparse
import sys

from .backbones import DEFAULT_BACKBONE, FEATURE_DIM, BackboneUnavailableError, make_backbone
from .extract import ExtractionError, extract, extract_batch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nicf-extract",
        description="turn images into NICF feature files with a pretrained backbone",
    )
    parser.add_argument("--image", help="extract a single image")
    parser.add_argument("--out", help="output feature path for --image")
    parser.add_argument("--manifest", help="JSON-Lines manifest with image paths")
    parser.add_argument("--out-dir", help="output directory for --manifest mode")
    parser.add_argument("--backbone", default=DEFAULT_BACKBONE,
                        help=f"backbone identifier (default {DEFAULT_BACKBONE})")
    parser.add_argument("--weights", help="local weights file for the pretrained backbone")
    parser.add_argument("--dim", type=int, default=FEATURE_DIM,
                        help="expected feature width (abort on anything else)")
    parser.add_argument("--force", action="store_true",
                        help="re-extract even when the feature file exists")
    parser.add_argument("--jobs", type=int, default=1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    single = bool(args.image)
    batch = bool(args.manifest)
    if single == batch:
        print("error: pass exactly one of --image or --manifest", file=sys.stderr)
        return 2
    if single and not args.out:
        print("error: --image requires --out", file=sys.stderr)
        return 2
    if batch and not args.out_dir:
        print("error: --manifest requires --out-dir", file=sys.stderr)
        return 2
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2

    try:
        backbone = make_backbone(args.backbone, weights_path=args.weights)
    except BackboneUnavailableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3

    try:
        if single:
            extract(args.image, backbone, args.out, expected_dim=args.dim)
            print(f"feature\t{args.out}")
            return 0
        result = extract_batch(
            args.manifest, args.out_dir, backbone,
            force=args.force, jobs=args.jobs, expected_dim=args.dim,
        )
    except ExtractionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    print(f"extracted\t{len(result.extracted)}")
    print(f"skipped\t{len(result.skipped)}")
    print(f"manifest\t{result.manifest_path}")
    for rec_id, message in sorted(result.failures.items()):
        print(f"failed\t{rec_id}\t{message}", file=sys.stderr)
    return 1 if result.failures else 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
