#!/usr/bin/env python3
"""Build a small demo study directory ready for `ulcerforge study serve`.

Writes N blob images with mixed real/synthetic labels, a manifest, and a
study.json so the rating frontend can be exercised immediately:

    python3 scripts/make_study_demo.py --out /tmp/demo --images 10
    ulcerforge study serve --out /tmp/demo --port 8765 --frontend frontend/public
"""

import argparse
from pathlib import Path

from ulcerforge.dataset import load_manifest
from ulcerforge.study import build_study
from ulcerforge.toydata import write_blob_dataset


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True)
    parser.add_argument("--images", type=int, default=10)
    parser.add_argument("--admin-token", default="demo-admin")
    parser.add_argument("--raters", type=int, default=3)
    parser.add_argument("--shuffle-seed", type=int, default=0)
    args = parser.parse_args()

    out = Path(args.out)
    n_real = args.images // 2
    n_synth = args.images - n_real
    write_blob_dataset(out / "imgs_real", n_real, size=8, seed=1, label="real")
    write_blob_dataset(out / "imgs_synth", n_synth, size=8, seed=2, label="synthetic")

    # merge the two manifests into one
    merged = out / "manifest.jsonl"
    lines = []
    for sub in ("imgs_real", "imgs_synth"):
        for line in (out / sub / "manifest.jsonl").read_text().splitlines():
            lines.append(line.replace('"path": "', f'"path": "{sub}/'))
    merged.write_text("\n".join(lines) + "\n")

    manifest, _ = load_manifest(merged)
    study = build_study(manifest, n_real, n_synth, args.shuffle_seed,
                        args.admin_token, raters_expected=args.raters)
    (out / "study.json").write_text(study.to_json())
    print(f"demo study at {out} ({args.images} images, "
          f"admin token {args.admin_token!r})")
    print(f"serve with: ulcerforge study serve --out {out}")


if __name__ == "__main__":
    main()
