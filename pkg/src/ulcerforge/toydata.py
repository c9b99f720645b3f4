"""Synthetic toy datasets: Gaussian blobs standing in for wound crops.

The licensed source imagery is out of reach, so experiments and the
training acceptance run use these single-channel blob images instead.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import ManifestEntry, WoundBox, from_model_array, save_manifest, write_image
from .rng import stream

Array = np.ndarray


def _blob_geometry(n: int, size: int, seed: int) -> list[tuple[float, float, float, float]]:
    rng = stream(seed, "toy-blobs")
    margin = min(1.5, size / 4)
    out = []
    for _ in range(n):
        cx = rng.uniform(margin, size - 1 - margin)
        cy = rng.uniform(margin, size - 1 - margin)
        sigma = rng.uniform(0.1 * size, 0.25 * size)
        amp = rng.uniform(0.7, 1.0)
        out.append((cx, cy, sigma, amp))
    return out


def make_blob_images(n: int, size: int = 8, seed: int = 0) -> Array:
    """[n, 1, size, size] float32 images in [-1, 1]: one soft blob each."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, 1, size, size), dtype=np.float32)
    for i, (cx, cy, sigma, amp) in enumerate(_blob_geometry(n, size, seed)):
        blob = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma ** 2))
        images[i, 0] = np.clip(-1.0 + 2.0 * amp * blob, -1.0, 1.0).astype(np.float32)
    return images


def write_blob_dataset(out_dir, n: int, size: int = 8, seed: int = 0,
                       label: str = "real") -> Path:
    """Write blob PNGs plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = make_blob_images(n, size=size, seed=seed)
    entries = []
    for i, (cx, cy, sigma, _amp) in enumerate(_blob_geometry(n, size, seed)):
        name = f"blob_{i:04d}.png"
        write_image(out / name, from_model_array(images[i]))
        box = WoundBox(cx=cx, cy=cy, w=min(3.0 * sigma, size), h=min(3.0 * sigma, size))
        entries.append(ManifestEntry(path=name, width=size, height=size,
                                     label=label, wounds=[box.clamped(size, size)]))
    manifest_path = out / "manifest.jsonl"
    save_manifest(manifest_path, entries)
    return manifest_path
