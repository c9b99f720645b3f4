"""Central finite-difference gradient checks against the engine's backward pass.

All reference evaluations run in float64 with step 1e-3. An op passes
when the elementwise relative error stays at or below 1e-3; the deep
end-to-end denoiser composition uses a looser 1e-2.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import stream
from .unet import DenoiserParams, UNetConfig, parameter_shapes, predict_noise

OP_TOLERANCE = 1e-3
END_TO_END_TOLERANCE = 1e-2
STEP = 1e-3


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)


def finite_difference_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
                            rng: np.random.Generator, step: float = STEP) -> float:
    """Max relative error between backward() grads and central differences.

    `fn` maps the float64 `inputs` to any-shape output; a fixed random
    projection reduces it to the scalar the differences probe.
    """
    out = fn(*inputs)
    proj = Tensor(rng.standard_normal(out.shape))

    def loss_value() -> float:
        return float(ad.reduce_sum(ad.mul(fn(*inputs), proj)).item())

    for t in inputs:
        t.grad = None
    ad.reduce_sum(ad.mul(out, proj)).backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in inputs]

    worst = 0.0
    for t, ana in zip(inputs, analytic):
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        aflat = ana.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus = loss_value()
            flat[idx] = orig - step
            f_minus = loss_value()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, _rel_err(float(aflat[idx]), numeric))
    return worst


def _t64(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def op_gradient_checks(seed: int) -> dict[str, float]:
    """Per-op max relative error on randomized small shapes for one seed."""
    rng = stream(seed, "gradcheck")
    n = int(rng.integers(1, 3))
    c = int(rng.integers(2, 5))
    h = int(rng.integers(2, 5))
    w = int(rng.integers(2, 5))
    results: dict[str, float] = {}

    a, b = _t64(rng, (c, h)), _t64(rng, (c, h))
    results["add"] = finite_difference_check(ad.add, [a, b], rng)
    results["sub"] = finite_difference_check(ad.sub, [_t64(rng, (c, h)), _t64(rng, (c, h))], rng)
    results["mul"] = finite_difference_check(ad.mul, [_t64(rng, (c, h)), _t64(rng, (c, h))], rng)
    raw = rng.standard_normal((c, h))
    denom = Tensor(raw + np.where(raw >= 0, 1.5, -1.5), requires_grad=True)
    results["div"] = finite_difference_check(ad.div, [_t64(rng, (c, h)), denom], rng)
    bias = _t64(rng, (h,))
    results["add_broadcast"] = finite_difference_check(ad.add, [_t64(rng, (c, h)), bias], rng)

    results["silu"] = finite_difference_check(ad.silu, [_t64(rng, (c, h))], rng)
    results["sigmoid"] = finite_difference_check(ad.sigmoid, [_t64(rng, (c, h))], rng)
    pos = Tensor(np.abs(rng.standard_normal((c, h))) + 0.5, requires_grad=True)
    results["sqrt"] = finite_difference_check(ad.tsqrt, [pos], rng)
    pos2 = Tensor(np.abs(rng.standard_normal((c, h))) + 0.5, requires_grad=True)
    results["pow"] = finite_difference_check(lambda x: ad.pow_const(x, -0.5), [pos2], rng)
    results["exp"] = finite_difference_check(ad.texp, [_t64(rng, (c, h))], rng)
    results["softmax"] = finite_difference_check(lambda x: ad.softmax(x, axis=-1),
                                                 [_t64(rng, (n, c, h))], rng)

    results["sum"] = finite_difference_check(lambda x: ad.reduce_sum(x, axis=1),
                                             [_t64(rng, (c, h, w))], rng)
    results["mean"] = finite_difference_check(lambda x: ad.reduce_mean(x, axis=(0, 2), keepdims=True),
                                              [_t64(rng, (c, h, w))], rng)
    results["reshape"] = finite_difference_check(lambda x: ad.reshape(x, (h, c)),
                                                 [_t64(rng, (c, h))], rng)
    results["transpose"] = finite_difference_check(lambda x: ad.transpose(x, (2, 0, 1)),
                                                   [_t64(rng, (c, h, w))], rng)
    results["concat"] = finite_difference_check(lambda x, y: ad.concat([x, y], axis=1),
                                                [_t64(rng, (c, h)), _t64(rng, (c, w))], rng)
    results["upsample"] = finite_difference_check(ad.upsample_nearest2x,
                                                  [_t64(rng, (n, c, h, w))], rng)

    results["matmul"] = finite_difference_check(ad.matmul, [_t64(rng, (c, h)), _t64(rng, (h, w))], rng)
    results["matmul_batched"] = finite_difference_check(
        ad.matmul, [_t64(rng, (n, c, h)), _t64(rng, (n, h, w))], rng)

    o, kh, kw = int(rng.integers(1, 4)), 2, 3
    x = _t64(rng, (n, c, 4, 5))
    k = _t64(rng, (o, c, kh, kw))
    cb = _t64(rng, (o,))
    results["conv2d"] = finite_difference_check(
        lambda xx, kk, bb: ad.conv2d(xx, kk, bb, stride=1, padding=0), [x, k, cb], rng)
    x2 = _t64(rng, (n, c, 4, 4))
    k2 = _t64(rng, (o, c, 3, 3))
    cb2 = _t64(rng, (o,))
    results["conv2d_stride2_pad1"] = finite_difference_check(
        lambda xx, kk, bb: ad.conv2d(xx, kk, bb, stride=2, padding=1), [x2, k2, cb2], rng)

    cg = 4
    gx = _t64(rng, (n, cg, h, w))
    gamma = Tensor(1.0 + 0.1 * rng.standard_normal(cg), requires_grad=True)
    beta = _t64(rng, (cg,))
    results["group_norm"] = finite_difference_check(
        lambda xx, gg, bb: ad.group_norm(xx, 2, gg, bb, eps=1e-5), [gx, gamma, beta], rng)

    ca = 4
    ax = _t64(rng, (n, ca, 2, 3))
    wq, wk, wv, wo = (_t64(rng, (ca, ca)) for _ in range(4))
    results["self_attention"] = finite_difference_check(
        lambda *args: ad.self_attention(*args, heads=1), [ax, wq, wk, wv, wo], rng)
    ax2 = _t64(rng, (n, ca, 2, 2))
    wq2, wk2, wv2, wo2 = (_t64(rng, (ca, ca)) for _ in range(4))
    results["self_attention_2head"] = finite_difference_check(
        lambda *args: ad.self_attention(*args, heads=2), [ax2, wq2, wk2, wv2, wo2], rng)
    return results


TINY_CONFIG = UNetConfig(
    in_channels=1,
    base_channels=8,
    channel_multipliers=(1, 2),
    attention_levels=frozenset({1}),
    time_embed_dim=16,
    groups_for_norm=4,
)


def random_denoiser_params(config: UNetConfig, seed: int, dtype=np.float64) -> DenoiserParams:
    """Fully random parameters (no zero output conv) for gradient probing."""
    rng = stream(seed, "gradcheck-params")
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else int(shape[0]) if len(shape) == 2 else 1
        arr = (rng.standard_normal(shape) * math.sqrt(1.0 / max(fan_in, 1))).astype(dtype)
        tensors[name] = Tensor(arr, requires_grad=True)
    return DenoiserParams(config=config, tensors=tensors)


def denoiser_gradient_check(seed: int, fraction: float = 0.01,
                            config: UNetConfig = TINY_CONFIG, size: int = 8,
                            step: float = STEP) -> float:
    """End-to-end check on a random subsample of denoiser parameter elements."""
    params = random_denoiser_params(config, seed)
    rng = stream(seed, "gradcheck-e2e")
    x = Tensor(rng.standard_normal((1, config.in_channels, size, size)))
    t = int(rng.integers(1, 1001))
    target = Tensor(rng.standard_normal(x.shape))

    def loss_tensor() -> Tensor:
        d = ad.sub(predict_noise(params, x, t), target)
        return ad.reduce_mean(ad.mul(d, d))

    params.zero_grads()
    loss_tensor().backward()
    grads = {k: v.grad.copy() for k, v in params.tensors.items()}

    names = list(params.tensors)
    sizes = np.array([params.tensors[k].size for k in names])
    bounds = np.cumsum(sizes)
    total = int(bounds[-1])
    k = max(1, int(round(total * fraction)))
    picks = rng.choice(total, size=k, replace=False)

    worst = 0.0
    for flat_idx in picks:
        which = int(np.searchsorted(bounds, flat_idx, side="right"))
        local = int(flat_idx - (bounds[which - 1] if which else 0))
        tensor = params.tensors[names[which]]
        flat = tensor.data.reshape(-1)
        orig = flat[local]
        flat[local] = orig + step
        f_plus = loss_tensor().item()
        flat[local] = orig - step
        f_minus = loss_tensor().item()
        flat[local] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        worst = max(worst, _rel_err(float(grads[names[which]].reshape(-1)[local]), numeric))
    return worst


def run_full_gradcheck(seeds: int = 20, fraction: float = 0.01,
                       report: Callable[[str], None] | None = None) -> tuple[float, float]:
    """(max per-op error, max end-to-end error) across `seeds` seeds."""
    worst_op = 0.0
    worst_e2e = 0.0
    for seed in range(seeds):
        per_op = op_gradient_checks(seed)
        seed_worst = max(per_op.values())
        worst_op = max(worst_op, seed_worst)
        e2e = denoiser_gradient_check(seed, fraction=fraction)
        worst_e2e = max(worst_e2e, e2e)
        if report is not None:
            top = max(per_op, key=per_op.get)
            report(f"seed {seed}: per-op max {seed_worst:.3e} ({top}), end-to-end {e2e:.3e}")
    return worst_op, worst_e2e
