"""Command-line entry point for the exporter."""

from __future__ import annotations

import argparse
import sys

from .encoders import EncoderError
from .export import ExportError, ExportJob, run_export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchfeat-export",
        description="Run a frozen image encoder over an image folder tree and "
                    "emit a binary patch-feature file.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--images", required=True,
                        help="image root; one sub-folder per label "
                             "('good'/'normal' = normal, others = anomaly type)")
    parser.add_argument("--masks", default=None,
                        help="mask root mirroring the image tree (required for "
                             "abnormal images)")
    parser.add_argument("--out", required=True, help="output feature file path")
    parser.add_argument("--encoder", default="projection:384",
                        help="encoder id: 'projection[:channels]' or 'vit-s14'")
    parser.add_argument("--device", default="cpu", help="device hint")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = ExportJob(image_root=args.images, mask_root=args.masks,
                    output_path=args.out, encoder_id=args.encoder,
                    device=args.device)
    try:
        summary = run_export(job)
    except (ExportError, EncoderError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {summary['images']} images x {summary['patches_per_image']} "
          f"patches x {summary['channels']} channels to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
