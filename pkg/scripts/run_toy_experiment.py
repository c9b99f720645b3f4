#!/usr/bin/env python3
"""End-to-end toy experiment: train on blobs, sample, curate, score FID/KID.

Mirrors the training acceptance run but prints every intermediate number,
so it doubles as a smoke test for the whole pipeline:

    python3 scripts/run_toy_experiment.py --out /tmp/toy --epochs 250
"""

import argparse
import time

import numpy as np

from ulcerforge.metrics import EmbeddingSpec, embed, fid, fit_gaussian, kid
from ulcerforge.rng import stream
from ulcerforge.schedule import build_linear_schedule
from ulcerforge.toydata import make_blob_images
from ulcerforge.training import (CurationStats, TrainConfig, curate_samples, fit,
                                 sample_batch)
from ulcerforge.unet import UNetConfig, init_denoiser


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=None, help="checkpoint/loss-log directory")
    parser.add_argument("--epochs", type=int, default=250)
    parser.add_argument("--train-count", type=int, default=256)
    parser.add_argument("--holdout-count", type=int, default=64)
    parser.add_argument("--sample-count", type=int, default=64)
    parser.add_argument("--lr", type=float, default=2e-4)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    started = time.monotonic()
    schedule = build_linear_schedule()
    model = UNetConfig(in_channels=1, base_channels=16, channel_multipliers=(1, 2),
                       attention_levels=frozenset({1}), time_embed_dim=32,
                       groups_for_norm=8)
    total = args.train_count + args.holdout_count
    images = make_blob_images(total, size=8, seed=7)
    train_images, held_out = images[:args.train_count], images[args.train_count:]
    spec = EmbeddingSpec(kind="flatten", dim=64)
    reference = fit_gaussian(embed(held_out, spec))

    untrained = init_denoiser(model, args.seed)
    baseline = sample_batch(untrained, schedule, args.sample_count,
                            stream(args.seed, "sampler-untrained"), size=8)
    fid_untrained = fid(fit_gaussian(embed(baseline, spec)), reference)
    print(f"untrained FID: {fid_untrained:.2f}")

    config = TrainConfig(batch_size=32, initial_lr=args.lr, epochs=args.epochs,
                         seed=args.seed, checkpoint_every=1000)
    result = fit(train_images, model, config, schedule, out_dir=args.out)
    losses = [r.loss for r in result.loss_log]
    print(f"trained {len(losses)} steps, loss {losses[0]:.4f} -> "
          f"median(last 10%) {np.median(losses[-max(1, len(losses) // 10):]):.4f}")

    samples = sample_batch(result.params, schedule, args.sample_count,
                           stream(args.seed, "sampler-trained"), size=8)
    fid_trained = fid(fit_gaussian(embed(samples, spec)), reference)
    print(f"trained FID: {fid_trained:.2f} ({fid_trained / fid_untrained:.1%} of untrained)")

    subset = min(50, args.sample_count, args.holdout_count)
    kid_mean, kid_std = kid(embed(samples, spec), embed(held_out, spec),
                            subset_size=subset, subsets=100,
                            rng=stream(args.seed, "kid-subsets"))
    print(f"KID: {kid_mean:.5f} +/- {kid_std:.5f} (subset {subset}, 100 draws)")

    stats = CurationStats.from_images(train_images)
    curation = curate_samples(samples, stats, k_sigma=3.0)
    print(f"curation kept {len(curation.kept)}/{len(samples)}")
    for index, reason in curation.discarded[:5]:
        print(f"  discarded {index}: {reason}")
    print(f"total {time.monotonic() - started:.0f}s")


if __name__ == "__main__":
    main()
