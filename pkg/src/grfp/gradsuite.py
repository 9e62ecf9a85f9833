"""Finite-difference verification of every differentiable building block.

Each check builds a small float64 problem, evaluates the tape gradient and
compares it with central differences through :func:`grfp.tensor.grad_check`.
Flow values are kept at least ``1e-3`` away from integers so the bilinear
kernel is never probed at a kink.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import init_backbone, unary_belief, BackboneParams
from .stgru import ChainConfig, StgruParams, init_params, segmentation_loss, stgru_step, unroll
from .warp import warp_bilinear

FIELD_NAMES = [f.name for f in fields(StgruParams)]


@dataclass
class CheckResult:
    name: str
    max_rel_error: float


def off_integer_flow(rng, shape, low=-2.0, high=2.0, margin=1e-3) -> np.ndarray:
    """Uniform flow whose values all sit at least ``margin`` from an integer."""
    f = rng.uniform(low, high, size=shape)
    frac = f - np.round(f)
    near = np.abs(frac) < margin
    f[near] += np.where(frac[near] >= 0, 2 * margin, -2 * margin)
    return f


def random_belief(rng, shape) -> np.ndarray:
    e = rng.uniform(0.2, 1.0, size=shape)
    return e / e.sum(axis=-1, keepdims=True)


def random_stgru(rng, n_classes: int, ksize: int = 7, scale: float = 0.3) -> StgruParams:
    p = init_params(n_classes, seed=int(rng.integers(1 << 30)), ksize=ksize, dtype=np.float64)
    arrs = {k: v + rng.normal(0, scale / ksize, v.shape) for k, v in p.arrays().items()}
    arrs["log_lambda"] = np.asarray(np.log(2.0) + rng.normal(0, 0.1))
    return StgruParams(**arrs)


def _stgru_from(args) -> StgruParams:
    return StgruParams(**dict(zip(FIELD_NAMES, args)))


def check_warp_x(rng, size=6, channels=2) -> float:
    f = off_integer_flow(rng, (size, size, 2))
    g = rng.normal(size=(size, size, channels))
    return T.grad_check(lambda x: T.total(T.mul(warp_bilinear(x, f), g)),
                        [rng.normal(size=(size, size, channels))])


def check_warp_f(rng, size=6, channels=2) -> float:
    x = rng.normal(size=(size, size, channels))
    g = rng.normal(size=(size, size, channels))
    return T.grad_check(lambda f: T.total(T.mul(warp_bilinear(x, f), g)),
                        [off_integer_flow(rng, (size, size, 2))])


def check_stgru_step(rng, size=6, n_classes=3, max_coords=None) -> float:
    labels = rng.integers(0, n_classes, size=(size, size))
    p = random_stgru(rng, n_classes)

    def fn(h_prev, x_t, I_prev, I_t, f, *params):
        h = stgru_step(h_prev, x_t, I_prev, I_t, f, _stgru_from(params), check=False)
        return segmentation_loss(h, labels)

    inputs = [random_belief(rng, (size, size, n_classes)), random_belief(rng, (size, size, n_classes)),
              rng.uniform(size=(size, size, 3)), rng.uniform(size=(size, size, 3)),
              off_integer_flow(rng, (size, size, 2)), *p.arrays().values()]
    return T.grad_check(fn, inputs, max_coords=max_coords)


def check_unroll(rng, size=6, n_classes=3, n_frames=3, max_coords=None) -> float:
    labels = rng.integers(0, n_classes, size=(size, size))
    p = random_stgru(rng, n_classes)
    n = n_frames

    def fn(*args):
        frames, flows, unaries = args[:n], args[n:2 * n - 1], args[2 * n - 1:3 * n - 1]
        h = unroll(list(frames), list(flows), list(unaries), _stgru_from(args[3 * n - 1:]),
                   ChainConfig(n), check=False)
        return segmentation_loss(h, labels)

    inputs = ([rng.uniform(size=(size, size, 3)) for _ in range(n)]
              + [off_integer_flow(rng, (size, size, 2)) for _ in range(n - 1)]
              + [random_belief(rng, (size, size, n_classes)) for _ in range(n)]
              + list(p.arrays().values()))
    return T.grad_check(fn, inputs, max_coords=max_coords)


def check_backbone(rng, size=8, n_classes=3, max_coords=48) -> float:
    base = init_backbone(n_classes, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    for b in base.biases:
        b += rng.normal(0, 0.05, b.shape)
    labels = rng.integers(0, n_classes, size=(size, size))
    n_layers = len(base.weights)

    def fn(image, *params):
        p = BackboneParams(list(params[:n_layers]), list(params[n_layers:]), base.dilations)
        return segmentation_loss(unary_belief(image, p), labels)

    inputs = [rng.uniform(size=(size, size, 3)), *base.weights, *base.biases]
    return T.grad_check(fn, inputs, max_coords=max_coords)


def check_loss(rng, size=6, n_classes=4) -> float:
    labels = rng.integers(0, n_classes, size=(size, size))
    labels[0, 0] = 255
    return T.grad_check(lambda h: segmentation_loss(h, labels),
                        [random_belief(rng, (size, size, n_classes))])


CHECKS: dict[str, Callable] = {
    "warp_bilinear/x": check_warp_x,
    "warp_bilinear/f": check_warp_f,
    "stgru_step": check_stgru_step,
    "unroll/3": check_unroll,
    "backbone": check_backbone,
    "segmentation_loss": check_loss,
}


def run_suite(seed: int = 0) -> list[CheckResult]:
    """Run all checks in a fixed order; each check gets its own seeded stream."""
    return [CheckResult(name, float(fn(np.random.default_rng([seed, k]))))
            for k, (name, fn) in enumerate(CHECKS.items())]
