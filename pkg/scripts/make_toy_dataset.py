#!/usr/bin/env python3
"""Write a Gaussian-blob toy dataset (PNGs + JSONL manifest)."""

import argparse

from ulcerforge.toydata import write_blob_dataset


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--count", type=int, default=256)
    parser.add_argument("--size", type=int, default=8)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--label", choices=["real", "synthetic"], default="real")
    args = parser.parse_args()
    manifest = write_blob_dataset(args.out, args.count, size=args.size,
                                  seed=args.seed, label=args.label)
    print(f"wrote {args.count} images, manifest at {manifest}")


if __name__ == "__main__":
    main()
