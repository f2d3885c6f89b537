"""Command line for the fixture exporter.

    lrp-export architectures -o fixtures/ [--data-dir DIR] [--only name ...]
    lrp-export synthetic -o fixtures/ [--seed N]
"""

from __future__ import annotations

import argparse
import sys

from .architectures import ARCHITECTURES
from .export import export_architectures, export_synthetic


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lrp-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("architectures", help="export the reference networks")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--data-dir", default=None, help="directory holding mnist/ and cifar-10-batches-py/")
    p.add_argument("--only", nargs="*", choices=sorted(ARCHITECTURES), default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-train", action="store_true", help="export initialized weights only")

    p = sub.add_parser("synthetic", help="export the synthetic property-test networks")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--seed", type=int, default=0)

    args = parser.parse_args(argv)
    if args.command == "architectures":
        dirs = export_architectures(
            args.output,
            data_dir=args.data_dir,
            names=args.only,
            seed=args.seed,
            train=not args.no_train,
        )
        for d in dirs:
            print(f"wrote {d}")
    else:
        for d in export_synthetic(args.output, seed=args.seed):
            print(f"wrote {d}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
