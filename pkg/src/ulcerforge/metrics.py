"""Embedding extraction and FID/KID similarity metrics with 0-3 normalization.

Embeddings are pluggable: raw pixel flattening, a seeded random
convolutional featurizer, or externally computed features loaded from a
TSV file (header line `id<TAB>d`, then `image_id<TAB>v1,v2,...,vd` rows).
Large pretrained extractors are ingested through the external path, never
computed here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, _sigmoid
from .errors import ConfigError, DataError, NumericError, ShapeError
from .rng import stream

Array = np.ndarray

EMBEDDING_KINDS = ("flatten", "random_conv", "external")

# Pure-Python cyclic Jacobi is the reference eigensolver; above this
# dimension it is impractically slow, so LAPACK takes over behind the
# same clamp rules.
_JACOBI_MAX_DIM = 512


@dataclass(frozen=True)
class EmbeddingSpec:
    kind: str
    dim: int
    seed: int = 0
    path: str = ""

    def __post_init__(self):
        if self.kind not in EMBEDDING_KINDS:
            raise ConfigError(f"embedding kind must be one of {EMBEDDING_KINDS}, got {self.kind!r}")
        if self.dim <= 0:
            raise ConfigError(f"embedding dim must be > 0, got {self.dim}")
        if self.kind == "external" and not self.path:
            raise ConfigError("external embedding needs a feature file path")

    def describe(self) -> str:
        if self.kind == "flatten":
            return f"flatten(dim={self.dim})"
        if self.kind == "random_conv":
            return f"random_conv(seed={self.seed}, dim={self.dim})"
        return f"external({self.path}, dim={self.dim})"


def write_feature_file(path, ids: list[str], rows: Array) -> None:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] != len(ids):
        raise ConfigError(f"feature rows {rows.shape} do not match {len(ids)} ids")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"id\t{rows.shape[1]}\n")
        for image_id, row in zip(ids, rows):
            fh.write(image_id + "\t" + ",".join(repr(float(v)) for v in row) + "\n")


def read_feature_file(path) -> tuple[list[str], Array]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{path}: empty feature file")
    header = lines[0].split("\t")
    if len(header) != 2 or header[0] != "id":
        raise DataError(f"{path}: header must be 'id<TAB>d'")
    try:
        dim = int(header[1])
    except ValueError as err:
        raise DataError(f"{path}: bad dimension in header") from err
    ids: list[str] = []
    rows: list[Array] = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path} line {line_no}: expected 'id<TAB>v1,v2,...'")
        values = np.array([float(v) for v in parts[1].split(",")], dtype=np.float64)
        if values.shape != (dim,):
            raise DataError(f"{path} line {line_no}: row has {values.size} values, header says {dim}")
        ids.append(parts[0])
        rows.append(values)
    return ids, np.stack(rows) if rows else np.zeros((0, dim))


def _conv_forward(x: Array, kernel: Array, padding: int) -> Array:
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, kernel.shape[2:], axis=(2, 3))
    out = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2)


def embed(images, spec: EmbeddingSpec, ids: list[str] | None = None) -> Array:
    """N x dim feature matrix; deterministic per spec, rows guaranteed finite."""
    if spec.kind == "external":
        if ids is None:
            raise ConfigError("external embedding requires image ids")
        file_ids, rows = read_feature_file(spec.path)
        if rows.shape[1] != spec.dim:
            raise ConfigError(f"feature file dimension {rows.shape[1]} != spec dim {spec.dim}")
        index = {image_id: i for i, image_id in enumerate(file_ids)}
        missing = [image_id for image_id in ids if image_id not in index]
        if missing:
            raise DataError(f"feature file missing ids: {missing}")
        return rows[[index[image_id] for image_id in ids]]

    data = images.data if isinstance(images, Tensor) else np.asarray(images)
    if data.ndim != 4:
        raise ShapeError("embed", "rank", 4, data.ndim)
    n, c, h, w = data.shape
    data = data.astype(np.float64)
    if spec.kind == "flatten":
        if spec.dim != c * h * w:
            raise ShapeError("embed", "dim", c * h * w, spec.dim)
        out = data.reshape(n, spec.dim)
    else:  # random_conv
        rng = stream(spec.seed, "random-conv")
        kernel = rng.standard_normal((spec.dim, c, 3, 3)) / math.sqrt(9 * c)
        feat = _conv_forward(data, kernel, padding=1)
        feat = feat * _sigmoid(feat)
        out = feat.mean(axis=(2, 3))
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite embedding rows")
    return out


# ---------------------------------------------------------------------------
# Gaussian statistics and the Frechet distance
# ---------------------------------------------------------------------------

@dataclass
class GaussianStats:
    mean: Array
    cov: Array
    n: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ShapeError("GaussianStats", "cov", (d, d), self.cov.shape)
        if np.max(np.abs(self.cov - self.cov.T)) > 1e-9:
            raise ConfigError("covariance must be symmetric within 1e-9")
        if np.any(np.diag(self.cov) < 0):
            raise ConfigError("covariance diagonal must be >= 0")


def fit_gaussian(rows: Array) -> GaussianStats:
    """Column mean plus unbiased (N-1) sample covariance, symmetrized."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise ShapeError("fit_gaussian", "rank", 2, rows.ndim)
    n = rows.shape[0]
    if n < 2:
        raise DataError(f"covariance needs at least 2 rows, got {n}")
    mean = rows.mean(axis=0)
    centered = rows - mean
    cov = centered.T @ centered / (n - 1)
    cov = (cov + cov.T) / 2.0
    return GaussianStats(mean=mean, cov=cov, n=n)


def _jacobi_eigh(a: Array, tol: float = 1e-12, max_sweeps: int = 64) -> tuple[Array, Array]:
    """Eigenvalues/vectors of a symmetric matrix by cyclic Jacobi rotations."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    if n == 1:
        return a.diagonal().copy(), v
    norm = np.linalg.norm(a)
    if norm == 0.0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        off = math.sqrt(max((a * a).sum() - (np.diag(a) ** 2).sum(), 0.0))
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= tol * norm / (n * n):
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return np.diag(a).copy(), v


def _sym_eigh(a: Array) -> tuple[Array, Array]:
    if a.shape[0] <= _JACOBI_MAX_DIM:
        return _jacobi_eigh(a)
    return np.linalg.eigh(a)


def _clamped_eigs(values: Array, context: str) -> Array:
    # Eigenvalues inside the solver's noise band around zero are zeroed:
    # the Jacobi sweep stops at off-diagonal mass 1e-12 * ||A||, so a
    # rank-deficient matrix carries ~1e-11-scale phantom eigenvalues that
    # sqrt would amplify into trace error. Flooring costs at most
    # d * sqrt(band) on genuinely tiny eigenvalues, which is the same
    # order as the noise it removes.
    noise = 1e-11 * max(float(values.max(initial=0.0)), 1.0)
    values = np.where(np.abs(values) <= noise, 0.0, values)
    low = values.min(initial=0.0)
    if low < -1e-10:
        raise NumericError(f"{context}: eigenvalue {low:.3e} below -1e-10")
    return np.maximum(values, 0.0)


def _psd_sqrt(a: Array, context: str) -> Array:
    values, vectors = _sym_eigh(a)
    values = _clamped_eigs(values, context)
    return (vectors * np.sqrt(values)) @ vectors.T


def fid(a: GaussianStats, b: GaussianStats) -> float:
    """Frechet distance ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The product square root is taken through the symmetric reduction
    S = S_a^(1/2) S_b S_a^(1/2), so only real symmetric eigenproblems
    appear. Symmetric in its arguments; tiny negatives from roundoff
    clamp to 0.
    """
    if a.mean.shape != b.mean.shape:
        raise ShapeError("fid", "dim", a.mean.shape, b.mean.shape)
    diff = a.mean - b.mean
    a_half = _psd_sqrt(a.cov, "fid: cov_a")
    inner = a_half @ b.cov @ a_half
    inner = (inner + inner.T) / 2.0
    values = _clamped_eigs(_sym_eigh(inner)[0], "fid: cross term")
    tr_sqrt = float(np.sqrt(values).sum())
    trace_scale = float(np.trace(a.cov) + np.trace(b.cov))
    value = float(diff @ diff + trace_scale - 2.0 * tr_sqrt)
    if value < 0.0:
        # noise floor of the trace-sqrt at the solver tolerance:
        # d * sqrt(1e-12 * scale); rank-deficient inputs legitimately land here
        floor = max(1e-8, a.mean.shape[0] * math.sqrt(1e-12 * max(trace_scale, 1.0)))
        if value > -floor:
            return 0.0
        raise NumericError(f"fid: negative distance {value:.3e} beyond roundoff")
    return value


# ---------------------------------------------------------------------------
# KID (unbiased squared MMD with the cubic polynomial kernel)
# ---------------------------------------------------------------------------

def _poly_kernel(x: Array, y: Array) -> Array:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: Array, y: Array) -> float:
    """Unbiased MMD^2 with kernel (u.v/d + 1)^3; may legally be negative."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ConfigError("unbiased MMD^2 needs at least 2 rows per set")
    if x.shape[1] != y.shape[1]:
        raise ShapeError("kid", "dim", x.shape[1], y.shape[1])
    kxx = _poly_kernel(x, x)
    kyy = _poly_kernel(y, y)
    kxy = _poly_kernel(x, y)
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(term_x + term_y - 2.0 * kxy.sum() / (m * n))


def kid(x: Array, y: Array, subset_size: int = 50, subsets: int = 100,
        rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Mean and std of unbiased MMD^2 over without-replacement subset draws.

    With subsets = 1 and subset_size = min(M, N), the single estimate is
    computed over the complete sets (no subsampling, rng unused).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError("kid", "rank", 2, (x.ndim, y.ndim))
    m, n = x.shape[0], y.shape[0]
    subset_size = int(subset_size)
    if subset_size < 2:
        raise ConfigError(f"subset_size must be >= 2, got {subset_size}")
    if subset_size > min(m, n):
        raise ConfigError(f"subset_size {subset_size} exceeds available rows {min(m, n)}")
    if subsets < 1:
        raise ConfigError(f"subsets must be >= 1, got {subsets}")
    if subsets == 1 and subset_size == min(m, n):
        return mmd2_unbiased(x, y), 0.0
    if rng is None:
        raise ConfigError("subset sampling requires an rng")
    estimates = np.empty(subsets, dtype=np.float64)
    for i in range(subsets):
        ix = rng.choice(m, size=subset_size, replace=False)
        iy = rng.choice(n, size=subset_size, replace=False)
        estimates[i] = mmd2_unbiased(x[ix], y[iy])
    return float(estimates.mean()), float(estimates.std())


def normalize_scores(values) -> list[float]:
    """Min-max affine map of the values onto [0, 3]."""
    values = [float(v) for v in values]
    if len(values) < 2:
        raise DataError("normalization needs at least 2 values")
    lo, hi = min(values), max(values)
    if lo == hi:
        raise DataError("normalization undefined for all-equal values")
    span = hi - lo
    # divide before scaling so min -> 0.0 and max -> 3.0 are exact
    return [min(max(3.0 * ((v - lo) / span), 0.0), 3.0) for v in values]


@dataclass
class MetricReport:
    fid: float
    kid_mean: float
    kid_std: float
    embedding: str
    normalized: dict[str, float] | None = None

    def __post_init__(self):
        if self.fid < 0:
            raise ConfigError("fid must be >= 0")
        if self.kid_std < 0:
            raise ConfigError("kid_std must be >= 0")
        if self.normalized is not None:
            for key, value in self.normalized.items():
                if not 0.0 <= value <= 3.0:
                    raise ConfigError(f"normalized {key} = {value} outside [0, 3]")

    def to_json(self) -> str:
        body = {
            "fid": self.fid,
            "kid_mean": self.kid_mean,
            "kid_std": self.kid_std,
            "embedding": self.embedding,
            "normalized": self.normalized,
        }
        return json.dumps(body, sort_keys=True, indent=2)
