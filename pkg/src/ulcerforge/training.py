"""DDPM training loop, ancestral sampler, and automated sample curation.

All randomness is drawn from labeled substreams keyed by the absolute
step (or epoch) index, so a run resumed from a checkpoint replays
exactly the draws of an uninterrupted run.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AdamHyper, AdamState, Tensor, adam_step, mul, reduce_mean, sub
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, NumericError
from .rng import stream
from .schedule import NoiseSchedule, forward_diffuse, reverse_step
from .unet import DenoiserParams, UNetConfig, init_denoiser, parameter_shapes, predict_noise

Array = np.ndarray

LOSS_LOG_NAME = "loss_log.tsv"
CHECKPOINT_PATTERN = "ckpt-{step:07d}.dfud"


@dataclass
class TrainConfig:
    batch_size: int = 32
    initial_lr: float = 1e-4
    lr_decay_policy: str = "cosine"
    lr_floor_ratio: float = 0.1
    epochs: int = 500
    seed: int = 0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.initial_lr <= 0:
            raise ConfigError(f"initial_lr must be > 0, got {self.initial_lr}")
        if self.lr_decay_policy not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr decay policy {self.lr_decay_policy!r}")
        if not 0.0 <= self.lr_floor_ratio <= 1.0:
            raise ConfigError(f"lr_floor_ratio must lie in [0, 1], got {self.lr_floor_ratio}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")


def decayed_lr(config: TrainConfig, step: int, total_steps: int) -> float:
    """Learning rate at `step` of `total_steps`; non-increasing, never negative.

    The cosine policy decays from initial_lr to lr_floor_ratio * initial_lr.
    """
    if config.lr_decay_policy == "constant" or total_steps <= 1:
        return config.initial_lr
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    floor = config.lr_floor_ratio
    return config.initial_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


@dataclass
class LossRecord:
    step: int
    t_mean: float
    loss: float
    lr: float


def train_step(params: DenoiserParams, batch: Array, s: NoiseSchedule,
               rng_t: np.random.Generator, rng_eps: np.random.Generator,
               opt: AdamState, lr: float | None = None,
               record: dict | None = None) -> float:
    """One DDPM step: sample t and eps, predict noise, MSE loss, Adam update.

    `batch` is [N, C, H, W] in model units [-1, 1]. Timesteps are drawn
    per sample. Raises NumericError with a diagnostic snapshot if the
    loss leaves the finite range.
    """
    batch = np.asarray(batch, dtype=np.float32)
    n = batch.shape[0]
    t_values = rng_t.integers(1, s.steps + 1, size=n)
    eps = rng_eps.standard_normal(batch.shape).astype(np.float32)
    x_t = forward_diffuse(Tensor(batch), t_values, Tensor(eps), s)
    pred = predict_noise(params, x_t, t_values)
    diff = sub(Tensor(eps), pred)
    loss = reduce_mean(mul(diff, diff))
    loss_value = loss.item()
    if not math.isfinite(loss_value):
        raise NumericError(
            "non-finite training loss",
            diagnostics={"t_values": t_values.tolist(), "loss": loss_value},
        )
    params.zero_grads()
    loss.backward()
    if lr is not None:
        opt.hyper.learning_rate = float(lr)
    adam_step(params.tensors, params.grads(), opt)
    if record is not None:
        record["t_mean"] = float(t_values.mean())
        record["loss"] = loss_value
        record["lr"] = opt.hyper.learning_rate
    return loss_value


@dataclass
class FitResult:
    params: DenoiserParams
    opt: AdamState
    loss_log: list[LossRecord] = field(default_factory=list)


def _checkpoint_meta(model_cfg: UNetConfig, config: TrainConfig, s: NoiseSchedule,
                     step: int, adam_steps: int) -> dict:
    model = asdict(model_cfg)
    model["channel_multipliers"] = list(model_cfg.channel_multipliers)
    model["attention_levels"] = sorted(model_cfg.attention_levels)
    return {
        "model": model,
        "schedule": {"steps": s.steps, "beta_start": s.beta_start, "beta_end": s.beta_end},
        "train": asdict(config),
        "progress": {"step": step, "adam_steps": adam_steps},
    }


def checkpoint_tensors(params: DenoiserParams, opt: AdamState) -> dict[str, Array]:
    out: dict[str, Array] = {}
    for name, t in params.tensors.items():
        out[f"param.{name}"] = t.data
    for name, m in opt.first_moment.items():
        out[f"adam.m.{name}"] = m
    for name, v in opt.second_moment.items():
        out[f"adam.v.{name}"] = v
    return out


def write_checkpoint(path, params: DenoiserParams, opt: AdamState,
                     config: TrainConfig, s: NoiseSchedule, step: int) -> None:
    meta = _checkpoint_meta(params.config, config, s, step, opt.step_count)
    save_checkpoint(path, checkpoint_tensors(params, opt), meta)


def read_checkpoint(path) -> tuple[DenoiserParams, AdamState, TrainConfig, dict]:
    """Rebuild params + optimizer state + train config from a checkpoint."""
    tensors, meta = load_checkpoint(path)
    model_meta = dict(meta["model"])
    model_meta["channel_multipliers"] = tuple(model_meta["channel_multipliers"])
    model_meta["attention_levels"] = frozenset(model_meta["attention_levels"])
    model_cfg = UNetConfig(**model_meta)
    expected = parameter_shapes(model_cfg)
    params = DenoiserParams(config=model_cfg, tensors={})
    for name, shape in expected.items():
        key = f"param.{name}"
        if key not in tensors:
            raise ConfigError(f"checkpoint missing parameter {name!r}")
        if tensors[key].shape != shape:
            raise ConfigError(f"checkpoint parameter {name!r} has shape "
                              f"{tensors[key].shape}, expected {shape}")
        params.tensors[name] = Tensor(tensors[key].copy(), requires_grad=True)
    train_cfg = TrainConfig(**meta["train"])
    opt = AdamState(
        first_moment={n: tensors[f"adam.m.{n}"].copy() for n in expected},
        second_moment={n: tensors[f"adam.v.{n}"].copy() for n in expected},
        step_count=int(meta["progress"]["adam_steps"]),
        hyper=AdamHyper(learning_rate=train_cfg.initial_lr),
    )
    return params, opt, train_cfg, meta


def _latest_checkpoint(out_dir: Path) -> Path | None:
    candidates = sorted(out_dir.glob("ckpt-*.dfud"))
    return candidates[-1] if candidates else None


def fit(images: Array, model_cfg: UNetConfig, config: TrainConfig, s: NoiseSchedule,
        out_dir: "str | os.PathLike | None" = None, resume: bool = False) -> FitResult:
    """Train over shuffled epochs of train_step with the decaying-lr policy.

    Emits one LossRecord per step; when `out_dir` is set, appends
    `step<TAB>loss<TAB>lr` lines to loss_log.tsv and writes checkpoints
    every `checkpoint_every` steps plus one at the end. With
    `resume=True` the run continues from the newest checkpoint in
    `out_dir` and reproduces the uninterrupted run bit for bit.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ConfigError("training set must be a non-empty [N, C, H, W] array")
    if images.shape[1] != model_cfg.in_channels:
        raise ConfigError(f"training images have {images.shape[1]} channels, "
                          f"model expects {model_cfg.in_channels}")
    model_cfg.check_spatial(images.shape[2], images.shape[3])

    count = images.shape[0]
    steps_per_epoch = math.ceil(count / config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    out_path = Path(out_dir) if out_dir is not None else None
    start_step = 0
    if resume:
        if out_path is None:
            raise ConfigError("resume requires an output directory")
        latest = _latest_checkpoint(out_path)
        if latest is None:
            raise ConfigError(f"no checkpoint to resume from in {out_path}")
        params, opt, saved_cfg, meta = read_checkpoint(latest)
        if asdict(saved_cfg) != asdict(config):
            raise ConfigError("checkpointed train config differs from the requested one")
        if params.config != model_cfg:
            raise ConfigError("checkpointed model config differs from the requested one")
        start_step = int(meta["progress"]["step"])
    else:
        params = init_denoiser(model_cfg, config.seed)
        opt = AdamState.initial(params.tensors, AdamHyper(learning_rate=config.initial_lr))
        if out_path is not None:
            out_path.mkdir(parents=True, exist_ok=True)
            (out_path / LOSS_LOG_NAME).write_text("")

    log: list[LossRecord] = []
    log_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_path / LOSS_LOG_NAME, "a", encoding="utf-8")
    try:
        perm = None
        perm_epoch = -1
        for step in range(start_step, total_steps):
            epoch, pos = divmod(step, steps_per_epoch)
            if epoch != perm_epoch:
                perm = stream(config.seed, "shuffle", epoch).permutation(count)
                perm_epoch = epoch
            batch = images[perm[pos * config.batch_size:(pos + 1) * config.batch_size]]
            lr = decayed_lr(config, step, total_steps)
            record: dict = {}
            try:
                train_step(params, batch, s,
                           stream(config.seed, "t-draw", step),
                           stream(config.seed, "eps-draw", step),
                           opt, lr=lr, record=record)
            except NumericError as err:
                err.diagnostics["step"] = step
                err.diagnostics["loss_history"] = [r.loss for r in log[-20:]]
                raise
            rec = LossRecord(step=step, t_mean=record["t_mean"],
                             loss=record["loss"], lr=record["lr"])
            log.append(rec)
            if log_fh is not None:
                log_fh.write(f"{rec.step}\t{rec.loss!r}\t{rec.lr!r}\n")
                log_fh.flush()
            done = step + 1
            if out_path is not None and (done % config.checkpoint_every == 0 or done == total_steps):
                write_checkpoint(out_path / CHECKPOINT_PATTERN.format(step=done),
                                 params, opt, config, s, done)
    finally:
        if log_fh is not None:
            log_fh.close()
    return FitResult(params=params, opt=opt, loss_log=log)


def sample_batch(params: DenoiserParams, s: NoiseSchedule, n: int,
                 rng: np.random.Generator, size: int = 8, clamp: bool = True) -> Array:
    """Ancestral sampling: x_T ~ N(0, I), T reverse steps, fresh z per step.

    No z is drawn at t = 1 (sigma_1 = 0). The final output is clamped to
    [-1, 1] unless `clamp` is False (useful for statistical checks on
    the raw chain). Deterministic per rng seed.
    """
    if n < 1:
        raise ConfigError(f"sample count must be >= 1, got {n}")
    cfg = params.config
    cfg.check_spatial(size, size)
    shape = (n, cfg.in_channels, size, size)
    x = rng.standard_normal(shape).astype(np.float32)
    for t in range(s.steps, 0, -1):
        eps_hat = predict_noise(params, x, t).data
        z = rng.standard_normal(shape).astype(np.float32) if t > 1 else None
        x = reverse_step(Tensor(x), t, Tensor(eps_hat), None if z is None else Tensor(z), s).data
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite sample chain", diagnostics={"t": t})
    return np.clip(x, -1.0, 1.0) if clamp else x


@dataclass
class CurationStats:
    """Per-channel mean/std of the training set's per-image channel means.

    Computed once from the training manifest, in model units [-1, 1];
    the discard rule compares a generated sample's channel means against
    these statistics.
    """

    channel_mean: Array
    channel_std: Array

    def __post_init__(self):
        self.channel_mean = np.asarray(self.channel_mean, dtype=np.float64)
        self.channel_std = np.asarray(self.channel_std, dtype=np.float64)
        if self.channel_mean.shape != self.channel_std.shape:
            raise ConfigError("curation mean/std must have matching shapes")
        if np.any(self.channel_std < 0):
            raise ConfigError("curation std must be >= 0 per channel")

    @classmethod
    def from_images(cls, images: Array) -> "CurationStats":
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[0] == 0:
            raise ConfigError("curation stats need a non-empty [N, C, H, W] array")
        means = images.mean(axis=(2, 3), dtype=np.float64)  # [N, C]
        return cls(channel_mean=means.mean(axis=0), channel_std=means.std(axis=0))


@dataclass
class CurationResult:
    kept: list[int]
    discarded: list[tuple[int, str]]
    warnings: list[str] = field(default_factory=list)


def curate_samples(samples: Array, stats: CurationStats,
                   k_sigma: float = 3.0) -> CurationResult:
    """Discard samples whose channel mean drifts >= k_sigma training stds.

    A sample is discarded iff ANY channel's mean deviates from the
    training channel mean by more than k_sigma * training channel std.
    Zero-std channels degenerate to an exact-mean match (with a
    warning); k_sigma = inf keeps everything.
    """
    samples = np.asarray(samples)
    if samples.ndim != 4:
        raise ConfigError("curate_samples expects [N, C, H, W] samples")
    if samples.shape[1] != stats.channel_mean.shape[0]:
        raise ConfigError(f"samples have {samples.shape[1]} channels, "
                          f"stats have {stats.channel_mean.shape[0]}")
    warnings: list[str] = []
    if math.isinf(k_sigma):
        return CurationResult(kept=list(range(samples.shape[0])), discarded=[],
                              warnings=warnings)
    zero_std = np.flatnonzero(stats.channel_std == 0.0)
    if zero_std.size:
        warnings.append(
            f"channels {zero_std.tolist()} have zero training std; "
            "curation degenerates to an exact-mean match there")
    means = samples.mean(axis=(2, 3), dtype=np.float64)  # [N, C]
    kept: list[int] = []
    discarded: list[tuple[int, str]] = []
    for i, m in enumerate(means):
        deviation = np.abs(m - stats.channel_mean)
        threshold = k_sigma * stats.channel_std
        over = np.flatnonzero(deviation > threshold)
        if over.size:
            c = int(over[0])
            discarded.append((i, f"channel {c}: mean {m[c]:.4f} deviates "
                                 f"{deviation[c]:.4f} > {k_sigma:g} x std {stats.channel_std[c]:.4f}"))
        else:
            kept.append(i)
    return CurationResult(kept=kept, discarded=discarded, warnings=warnings)
