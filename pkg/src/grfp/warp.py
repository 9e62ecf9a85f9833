"""Bilinear warping of feature maps along a backward optical-flow field.

A flow field is an ``H x W x 2`` array: channel 0 is the horizontal
displacement (columns), channel 1 the vertical one (rows).  The value at a
target pixel points at the location in the *source* map to sample, so
``y[i, j] = x(i + fy[i, j], j + fx[i, j])`` with bilinear interpolation and
zero outside the source image.
"""
from __future__ import annotations

import numpy as np

from .tensor import ContractError, Tensor, apply, as_array, primitive


def _kernel(t):
    return np.maximum(0.0, 1.0 - np.abs(t))


def _dkernel(t):
    # derivative of max(0, 1 - |t|); zero at the kinks t in {-1, 0, 1}
    a = np.abs(t)
    return np.where((a > 0) & (a < 1), -np.sign(t), 0.0)


def _check(x, f):
    if x.ndim != 3:
        raise ContractError(f"warp: source must be HxWxC, got {x.shape}")
    if f.ndim != 3 or f.shape[-1] != 2:
        raise ContractError(f"warp: flow must be HxWx2, got {f.shape}")
    if x.shape[:2] != f.shape[:2]:
        raise ContractError(f"warp: source {x.shape} and flow {f.shape} differ spatially")


def _taps(x, f):
    """Yield (m, n, ky, kx, ty, tx, valid) for the four bilinear taps."""
    h, w = x.shape[:2]
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    sy = ii + f[..., 1].astype(np.float64)
    sx = jj + f[..., 0].astype(np.float64)
    m0 = np.floor(sy).astype(np.int64)
    n0 = np.floor(sx).astype(np.int64)
    for dm in (0, 1):
        m = m0 + dm
        ty = sy - m
        ky = _kernel(ty)
        for dn in (0, 1):
            n = n0 + dn
            tx = sx - n
            kx = _kernel(tx)
            valid = (m >= 0) & (m < h) & (n >= 0) & (n < w)
            yield m, n, ky, kx, ty, tx, valid


@primitive("warp")
def _warp(x, f):
    _check(x, f)
    h, w = x.shape[:2]
    out = np.zeros(x.shape, dtype=np.result_type(x, f))
    for m, n, ky, kx, _, _, valid in _taps(x, f):
        wt = np.where(valid, ky * kx, 0.0)
        vals = x[np.clip(m, 0, h - 1), np.clip(n, 0, w - 1)]
        out += vals * wt[..., None].astype(out.dtype)
    return out, (x, f)


@_warp.backward
def _warp_bwd(g, saved, needs=(True, True)):
    x, f = saved
    gx, gf = warp_backward(g, x, f, need_x=needs[0], need_f=needs[1])
    return gx, gf


def warp_bilinear(x, f) -> Tensor:
    """Sample ``x`` at each pixel displaced by ``f`` (bilinear, zero padded)."""
    return apply("warp", x, f)


def warp_backward(grad_y, x, f, need_x: bool = True, need_f: bool = True):
    """Gradients of ``sum(grad_y * warp(x, f))`` with respect to ``x`` and ``f``."""
    g = as_array(grad_y)
    x = as_array(x)
    f = as_array(f)
    _check(x, f)
    h, w, c = x.shape
    gx = np.zeros(h * w * c, dtype=x.dtype) if need_x else None
    gfx = np.zeros((h, w))
    gfy = np.zeros((h, w))
    chan = np.arange(c)
    for m, n, ky, kx, ty, tx, valid in _taps(x, f):
        mc, nc = np.clip(m, 0, h - 1), np.clip(n, 0, w - 1)
        if need_x:
            wt = np.where(valid, ky * kx, 0.0)
            idx = ((mc * w + nc) * c)[..., None] + chan
            np.add.at(gx, idx.reshape(-1), (g * wt[..., None]).reshape(-1).astype(x.dtype))
        if need_f:
            gv = np.where(valid, (g * x[mc, nc]).sum(axis=-1), 0.0)
            gfy += gv * _dkernel(ty) * kx
            gfx += gv * ky * _dkernel(tx)
    gf = np.stack([gfx, gfy], axis=-1).astype(f.dtype) if need_f else None
    if need_x:
        gx = gx.reshape(h, w, c)
    return gx, gf


def warp_oracle(x, f) -> np.ndarray:
    """Dense evaluation of the warp as a double sum over every source pixel.

    Quadratic in the image size; meant for checking :func:`warp_bilinear`.
    """
    x = as_array(x)
    f = as_array(f)
    _check(x, f)
    h, w = x.shape[:2]
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    sy = ii + f[..., 1].astype(np.float64)
    sx = jj + f[..., 0].astype(np.float64)
    out = np.zeros(x.shape, dtype=np.result_type(x, f))
    for m in range(h):
        ky = _kernel(sy - m)
        for n in range(w):
            wt = ky * _kernel(sx - n)
            out += x[m, n] * wt[..., None].astype(out.dtype)
    return out
