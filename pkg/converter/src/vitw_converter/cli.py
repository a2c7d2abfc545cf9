"""vitw-convert: checkpoint conversion CLI.

    vitw-convert convert --src DIR|FILE.npz --out MODEL.vitw [--report R.json] [dims] [--seed N]
    vitw-convert make-fixture --out DIR --seed N [dims] [--head-classes 1000]
"""

import argparse
import sys
from pathlib import Path

from .container import ContainerError
from .convert import convert, make_fixture
from .naming import ConversionError, ModelDims


def _add_dims(parser):
    parser.add_argument("--image-size", type=int, default=224)
    parser.add_argument("--patch-size", type=int, default=16)
    parser.add_argument("--channels", type=int, default=3)
    parser.add_argument("--dim", type=int, default=768)
    parser.add_argument("--depth", type=int, default=12)
    parser.add_argument("--heads", type=int, default=12)
    parser.add_argument("--mlp-dim", type=int, default=3072)


def _dims(args) -> ModelDims:
    return ModelDims(image_size=args.image_size, patch_size=args.patch_size,
                     channels=args.channels, dim=args.dim, depth=args.depth,
                     heads=args.heads, mlp_dim=args.mlp_dim)


def build_parser():
    parser = argparse.ArgumentParser(prog="vitw-convert", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("convert", help="convert a checkpoint to VITW")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None, help="write the conversion report as JSON")
    p.add_argument("--seed", type=int, default=0, help="seed for the new head initialization")
    _add_dims(p)

    p = sub.add_parser("make-fixture", help="mint a random source-convention checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--head-classes", type=int, default=1000)
    _add_dims(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        if args.command == "convert":
            report = convert(args.src, _dims(args), args.out, head_seed=args.seed)
            if args.report:
                Path(args.report).write_text(report.to_json(), encoding="utf-8")
            print(report.summary())
        else:
            make_fixture(_dims(args), args.seed, args.out, head_classes=args.head_classes)
            print(f"fixture checkpoint written to {args.out}")
        return 0
    except (ConversionError, ContainerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
