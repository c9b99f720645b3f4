"""Deterministic random streams.

One root seed fans out into labeled substreams ("init", "t-draw",
"eps-draw", "sampler", "shuffle", ...) so each subsystem can be re-run in
isolation without disturbing any other subsystem's draws. Streams may
additionally be keyed by an integer index (e.g. the training step) so a
resumed run replays exactly the draws of an uninterrupted one.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(root_seed: int, label: str, index: int | None = None) -> np.random.Generator:
    """Generator for the substream `label` (optionally per-`index`) of `root_seed`."""
    entropy = [int(root_seed) & _MASK64, zlib.crc32(label.encode("utf-8"))]
    if index is not None:
        entropy.append(int(index) & _MASK64)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def token_hex(rng: np.random.Generator, nbytes: int = 16) -> str:
    """Opaque hex token (default 128-bit) drawn from `rng`."""
    return bytes(rng.integers(0, 256, size=nbytes, dtype=np.uint8).tolist()).hex()
