"""Variance schedule and the closed-form forward/reverse diffusion arithmetic.

Timesteps are 1-based: t runs over 1..T, array index t-1. All derived
arrays are precomputed at 64-bit and stored at 32-bit so the cumulative
product does not drift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, mul, scale, sub
from .errors import ConfigError, ShapeError

Array = np.ndarray


@dataclass(frozen=True)
class NoiseSchedule:
    """beta_t, alpha_t = 1-beta_t, alpha_bar_t = prod alpha, posterior sigma_t."""

    steps: int
    beta: Array
    alpha: Array
    alpha_bar: Array
    posterior_sigma: Array
    beta_start: float
    beta_end: float

    def __post_init__(self):
        t = self.steps
        for name in ("beta", "alpha", "alpha_bar", "posterior_sigma"):
            arr = getattr(self, name)
            if arr.shape != (t,):
                raise ConfigError(f"schedule array {name} must have shape ({t},), got {arr.shape}")
        if not (np.all(self.beta > 0.0) and np.all(self.beta < 1.0)):
            raise ConfigError("schedule requires 0 < beta_t < 1 for all t")
        if np.any(np.diff(self.beta) < 0.0):
            raise ConfigError("linear schedule requires non-decreasing beta")
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ConfigError("alpha_bar must be strictly decreasing")
        if not (0.0 < self.alpha_bar[-1] <= self.alpha_bar[0] < 1.0):
            raise ConfigError("alpha_bar must satisfy 0 < alpha_bar_T <= alpha_bar_1 < 1")
        if self.posterior_sigma[0] != 0.0:
            raise ConfigError("posterior sigma_1 must be 0 (final reverse step adds no noise)")
        if np.any(self.posterior_sigma < 0.0):
            raise ConfigError("posterior sigma must be non-negative")

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.steps:
            raise IndexError(f"timestep {t} outside 1..{self.steps}")
        return t


def build_linear_schedule(steps: int = 1000, beta_start: float = 1e-4,
                          beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp from beta_start (t=1) to beta_end (t=T)."""
    steps = int(steps)
    if steps < 1:
        raise ConfigError(f"schedule needs at least 1 step, got {steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta64 = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alpha64 = 1.0 - beta64
    abar64 = np.cumprod(alpha64)
    prev = np.concatenate([[1.0], abar64[:-1]])  # alpha_bar_0 := 1, hence sigma_1 = 0
    sigma64 = np.sqrt(beta64 * (1.0 - prev) / (1.0 - abar64))
    return NoiseSchedule(
        steps=steps,
        beta=beta64.astype(np.float32),
        alpha=alpha64.astype(np.float32),
        alpha_bar=abar64.astype(np.float32),
        posterior_sigma=sigma64.astype(np.float32),
        beta_start=float(beta_start),
        beta_end=float(beta_end),
    )


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def forward_diffuse(x0, t, eps, s: NoiseSchedule) -> Tensor:
    """Closed-form marginal x_t = sqrt(abar_t) * x0 + sqrt(1-abar_t) * eps.

    `t` may be a single timestep or one per leading-axis sample.
    """
    x0 = _as_tensor(x0)
    eps = _as_tensor(eps)
    if eps.shape != x0.shape:
        raise ShapeError("forward_diffuse", "eps", x0.shape, eps.shape)
    if np.ndim(t) == 0:
        tt = s.check_t(t)
        abar = float(s.alpha_bar[tt - 1])
        return add(scale(x0, np.sqrt(abar)), scale(eps, np.sqrt(1.0 - abar)))
    ts = np.asarray(t)
    if x0.ndim < 1 or ts.shape != (x0.shape[0],):
        raise ShapeError("forward_diffuse", "t", (x0.shape[0],) if x0.ndim else "(N,)", ts.shape)
    idx = np.array([s.check_t(v) - 1 for v in ts])
    abar = s.alpha_bar[idx].astype(x0.dtype)
    bshape = (x0.shape[0],) + (1,) * (x0.ndim - 1)
    ca = Tensor(np.sqrt(abar).reshape(bshape))
    cb = Tensor(np.sqrt(1.0 - abar).reshape(bshape))
    return add(mul(x0, ca), mul(eps, cb))


def reverse_step(x_t, t: int, eps_pred, z, s: NoiseSchedule) -> Tensor:
    """One ancestral step: x_{t-1} = (x_t - beta_t/sqrt(1-abar_t) * eps_hat)/sqrt(alpha_t) + sigma_t * z.

    `z` is ignored at t = 1, where sigma_1 = 0.
    """
    x_t = _as_tensor(x_t)
    eps_pred = _as_tensor(eps_pred)
    if eps_pred.shape != x_t.shape:
        raise ShapeError("reverse_step", "eps_pred", x_t.shape, eps_pred.shape)
    tt = s.check_t(t)
    alpha = float(s.alpha[tt - 1])
    abar = float(s.alpha_bar[tt - 1])
    beta = float(s.beta[tt - 1])
    sigma = float(s.posterior_sigma[tt - 1])
    mean = scale(sub(x_t, scale(eps_pred, beta / np.sqrt(1.0 - abar))),
                 1.0 / np.sqrt(alpha))
    if tt == 1 or z is None:
        return mean
    z = _as_tensor(z)
    if z.shape != x_t.shape:
        raise ShapeError("reverse_step", "z", x_t.shape, z.shape)
    return add(mean, scale(z, sigma))
