"""Compact U-Net with attention that predicts the noise component of x_t.

Architecture, per resolution level: two conv + group_norm + SiLU residual
blocks with an additive time-embedding projection, optional softmax
self-attention, stride-2 conv downsampling, mirrored nearest-neighbor
upsampling with skip concatenation, and a zero-initialized output conv so
a freshly initialized network predicts exactly zero noise.

The parameter name set is a pure function of the config; see
`parameter_shapes`. Linear weights are stored [in, out]; conv kernels
[out, in, kh, kw].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .rng import stream

Array = np.ndarray


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    base_channels: int = 16
    channel_multipliers: tuple[int, ...] = (1, 2)
    attention_levels: frozenset[int] = frozenset({1})
    attention_heads: int = 1
    time_embed_dim: int = 32
    groups_for_norm: int = 8

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        object.__setattr__(self, "attention_levels", frozenset(int(v) for v in self.attention_levels))
        self.validate()

    def validate(self) -> None:
        if self.in_channels not in (1, 3):
            raise ConfigError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if not self.channel_multipliers or any(m < 1 for m in self.channel_multipliers):
            raise ConfigError(f"channel_multipliers must be positive ints, got {self.channel_multipliers}")
        if self.time_embed_dim <= 0 or self.time_embed_dim % 2 != 0:
            raise ConfigError(f"time_embed_dim must be a positive even int, got {self.time_embed_dim}")
        if self.groups_for_norm < 1 or self.base_channels % self.groups_for_norm != 0:
            raise ConfigError(
                f"base_channels {self.base_channels} not divisible by groups_for_norm {self.groups_for_norm}")
        levels = len(self.channel_multipliers)
        bad = sorted(v for v in self.attention_levels if not 0 <= v < levels)
        if bad:
            raise ConfigError(f"attention_levels {bad} outside 0..{levels - 1}")
        if self.attention_heads < 1:
            raise ConfigError(f"attention_heads must be >= 1, got {self.attention_heads}")
        for lvl in self.attention_levels:
            if self.channels_at(lvl) % self.attention_heads != 0:
                raise ConfigError(
                    f"level {lvl} channels {self.channels_at(lvl)} not divisible by "
                    f"{self.attention_heads} attention heads")

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    def channels_at(self, level: int) -> int:
        return self.base_channels * self.channel_multipliers[level]

    def check_spatial(self, h: int, w: int) -> None:
        div = 1 << (self.levels - 1)
        if h % div != 0 or w % div != 0:
            raise ConfigError(
                f"spatial size {h}x{w} not divisible by 2^(levels-1) = {div}")


def _res_block_shapes(shapes: dict[str, tuple[int, ...]], prefix: str,
                      cin: int, cout: int, temb_dim: int) -> None:
    shapes[f"{prefix}.gn1.gamma"] = (cin,)
    shapes[f"{prefix}.gn1.beta"] = (cin,)
    shapes[f"{prefix}.conv1.weight"] = (cout, cin, 3, 3)
    shapes[f"{prefix}.conv1.bias"] = (cout,)
    shapes[f"{prefix}.temb.weight"] = (temb_dim, cout)
    shapes[f"{prefix}.temb.bias"] = (cout,)
    shapes[f"{prefix}.gn2.gamma"] = (cout,)
    shapes[f"{prefix}.gn2.beta"] = (cout,)
    shapes[f"{prefix}.conv2.weight"] = (cout, cout, 3, 3)
    shapes[f"{prefix}.conv2.bias"] = (cout,)
    if cin != cout:
        shapes[f"{prefix}.skip.weight"] = (cout, cin, 1, 1)
        shapes[f"{prefix}.skip.bias"] = (cout,)


def _attn_shapes(shapes: dict[str, tuple[int, ...]], prefix: str, c: int) -> None:
    shapes[f"{prefix}.gn.gamma"] = (c,)
    shapes[f"{prefix}.gn.beta"] = (c,)
    for proj in ("wq", "wk", "wv", "wo"):
        shapes[f"{prefix}.{proj}"] = (c, c)


def parameter_shapes(config: UNetConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map; a pure function of the config."""
    shapes: dict[str, tuple[int, ...]] = {}
    d = config.time_embed_dim
    shapes["time.lin1.weight"] = (d, d)
    shapes["time.lin1.bias"] = (d,)
    shapes["time.lin2.weight"] = (d, d)
    shapes["time.lin2.bias"] = (d,)
    c0 = config.channels_at(0)
    shapes["stem.conv.weight"] = (c0, config.in_channels, 3, 3)
    shapes["stem.conv.bias"] = (c0,)
    prev = c0
    for i in range(config.levels):
        ci = config.channels_at(i)
        _res_block_shapes(shapes, f"down.{i}.block1", prev, ci, d)
        _res_block_shapes(shapes, f"down.{i}.block2", ci, ci, d)
        if i in config.attention_levels:
            _attn_shapes(shapes, f"down.{i}.attn", ci)
        if i < config.levels - 1:
            shapes[f"down.{i}.down.weight"] = (ci, ci, 3, 3)
            shapes[f"down.{i}.down.bias"] = (ci,)
        prev = ci
    for i in range(config.levels - 2, -1, -1):
        ci = config.channels_at(i)
        shapes[f"up.{i}.upconv.weight"] = (ci, config.channels_at(i + 1), 3, 3)
        shapes[f"up.{i}.upconv.bias"] = (ci,)
        _res_block_shapes(shapes, f"up.{i}.block1", 2 * ci, ci, d)
        _res_block_shapes(shapes, f"up.{i}.block2", ci, ci, d)
        if i in config.attention_levels:
            _attn_shapes(shapes, f"up.{i}.attn", ci)
    shapes["out.gn.gamma"] = (c0,)
    shapes["out.gn.beta"] = (c0,)
    shapes["out.conv.weight"] = (config.in_channels, c0, 3, 3)
    shapes["out.conv.bias"] = (config.in_channels,)
    return shapes


@dataclass
class DenoiserParams:
    """Ordered named parameter set of the noise predictor plus its config."""

    config: UNetConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, Array]:
        missing = [k for k, t in self.tensors.items() if t.grad is None]
        if missing:
            raise ConfigError(f"missing gradients for {missing[:3]}{'...' if len(missing) > 3 else ''}")
        return {k: t.grad for k, t in self.tensors.items()}

    def astype(self, dtype) -> "DenoiserParams":
        return DenoiserParams(
            config=self.config,
            tensors={k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
                     for k, t in self.tensors.items()},
        )


def init_denoiser(config: UNetConfig, seed: int) -> DenoiserParams:
    """Kaiming fan-in init; gains ones, biases zeros, output conv all zeros."""
    config.validate()
    rng = stream(seed, "init")
    tensors: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name.startswith("out.conv."):
            arr = np.zeros(shape, dtype=np.float32)
        elif name.endswith(".gamma"):
            arr = np.ones(shape, dtype=np.float32)
        elif name.endswith((".bias", ".beta")):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else int(shape[0])
            std = np.sqrt(2.0 / fan_in)
            arr = (rng.standard_normal(shape) * std).astype(np.float32)
        tensors[name] = Tensor(arr, requires_grad=True)
    return DenoiserParams(config=config, tensors=tensors)


def _linear(p: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, p[f"{prefix}.weight"]), p[f"{prefix}.bias"])


def _res_block(p: dict[str, Tensor], prefix: str, x: Tensor, temb_act: Tensor,
               groups: int) -> Tensor:
    h = ad.group_norm(x, groups, p[f"{prefix}.gn1.gamma"], p[f"{prefix}.gn1.beta"])
    h = ad.conv2d(ad.silu(h), p[f"{prefix}.conv1.weight"], p[f"{prefix}.conv1.bias"], 1, 1)
    tproj = _linear(p, f"{prefix}.temb", temb_act)
    n, cout = tproj.shape
    h = ad.add(h, ad.reshape(tproj, (n, cout, 1, 1)))
    h = ad.group_norm(h, groups, p[f"{prefix}.gn2.gamma"], p[f"{prefix}.gn2.beta"])
    h = ad.conv2d(ad.silu(h), p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"], 1, 1)
    if f"{prefix}.skip.weight" in p:
        x = ad.conv2d(x, p[f"{prefix}.skip.weight"], p[f"{prefix}.skip.bias"], 1, 0)
    return ad.add(h, x)


def _attn_block(p: dict[str, Tensor], prefix: str, x: Tensor, groups: int,
                heads: int) -> Tensor:
    a = ad.group_norm(x, groups, p[f"{prefix}.gn.gamma"], p[f"{prefix}.gn.beta"])
    a = ad.self_attention(a, p[f"{prefix}.wq"], p[f"{prefix}.wk"],
                          p[f"{prefix}.wv"], p[f"{prefix}.wo"], heads=heads)
    return ad.add(x, a)


def predict_noise(params: DenoiserParams, x_t, t) -> Tensor:
    """Predicted noise for x_t at timestep(s) t; output shape equals input shape.

    Pure function of (params, x_t, t): no hidden state mutates between calls.
    """
    cfg = params.config
    p = params.tensors
    dtype = p["stem.conv.weight"].dtype
    if not isinstance(x_t, Tensor):
        x_t = Tensor(np.asarray(x_t, dtype=dtype))
    elif x_t.dtype != dtype:
        x_t = x_t.astype(dtype)
    if x_t.ndim != 4:
        raise ShapeError("predict_noise", "rank", 4, x_t.ndim)
    n, c, h, w = x_t.shape
    if c != cfg.in_channels:
        raise ShapeError("predict_noise", "channels", cfg.in_channels, c)
    cfg.check_spatial(h, w)
    ts = np.atleast_1d(np.asarray(t))
    if ts.shape == (1,) and n > 1:
        ts = np.full(n, int(ts[0]))
    if ts.shape != (n,):
        raise ShapeError("predict_noise", "t", (n,), ts.shape)
    if np.any(ts < 1):
        raise ConfigError(f"timesteps must be >= 1, got {ts.min()}")

    groups = cfg.groups_for_norm
    temb = ad.time_embedding(ts, cfg.time_embed_dim, dtype=dtype)
    temb = _linear(p, "time.lin2", ad.silu(_linear(p, "time.lin1", temb)))
    temb_act = ad.silu(temb)

    hmap = ad.conv2d(x_t, p["stem.conv.weight"], p["stem.conv.bias"], 1, 1)
    skips: list[Tensor] = []
    for i in range(cfg.levels):
        hmap = _res_block(p, f"down.{i}.block1", hmap, temb_act, groups)
        hmap = _res_block(p, f"down.{i}.block2", hmap, temb_act, groups)
        if i in cfg.attention_levels:
            hmap = _attn_block(p, f"down.{i}.attn", hmap, groups, cfg.attention_heads)
        if i < cfg.levels - 1:
            skips.append(hmap)
            hmap = ad.conv2d(hmap, p[f"down.{i}.down.weight"], p[f"down.{i}.down.bias"], 2, 1)
    for i in range(cfg.levels - 2, -1, -1):
        hmap = ad.upsample_nearest2x(hmap)
        hmap = ad.conv2d(hmap, p[f"up.{i}.upconv.weight"], p[f"up.{i}.upconv.bias"], 1, 1)
        hmap = ad.concat([hmap, skips.pop()], axis=1)
        hmap = _res_block(p, f"up.{i}.block1", hmap, temb_act, groups)
        hmap = _res_block(p, f"up.{i}.block2", hmap, temb_act, groups)
        if i in cfg.attention_levels:
            hmap = _attn_block(p, f"up.{i}.attn", hmap, groups, cfg.attention_heads)
    hmap = ad.group_norm(hmap, groups, p["out.gn.gamma"], p["out.gn.beta"])
    return ad.conv2d(ad.silu(hmap), p["out.conv.weight"], p["out.conv.bias"], 1, 1)
