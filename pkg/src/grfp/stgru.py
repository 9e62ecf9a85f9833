"""Flow-gated convolutional GRU over warped segmentation beliefs.

One step takes the previous belief ``h_prev``, warps it onto the current
frame, and mixes it with the current per-frame belief ``x_t``:

    w   = warp(h_prev, flow)
    r   = 1 - tanh(|W_ir * (I_t - warp(I_prev, flow)) + b_r|)
    h~  = W_xh * x_t + W_hh * (r . w)
    z   = sigmoid(W_xz * x_t + W_hz * w + b_z)
    h_t = softmax(lam * (1 - z) . w + z . h~)

``*`` is a 'same' convolution and ``.`` the Hadamard product.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor
from .tensorio import load_checkpoint, save_checkpoint
from .warp import warp_bilinear

IGNORE = 255
LOG_FLOOR = 1e-12


@dataclass
class StgruParams:
    """Learnable symbols of one recurrent unit.

    Fields hold numpy arrays, or taped Tensors after :meth:`watch`.  The
    propagation weight is stored as its logarithm so it stays positive.
    """

    w_ir: object  # 7 x 7 x 3 x Cr
    b_r: object   # Cr
    w_xh: object  # 7 x 7 x C x C
    w_hh: object
    w_xz: object
    w_hz: object
    b_z: object   # C
    log_lambda: object  # 0-rank

    @property
    def n_classes(self) -> int:
        return T.as_array(self.w_xh).shape[-1]

    @property
    def lam(self) -> float:
        return float(np.exp(T.as_array(self.log_lambda)))

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: T.as_array(getattr(self, f.name)) for f in fields(self)}

    def watch(self, tape: T.Tape) -> "StgruParams":
        return StgruParams(**{k: tape.watch(v) for k, v in self.arrays().items()})

    def astype(self, dtype) -> "StgruParams":
        return StgruParams(**{k: v.astype(dtype) for k, v in self.arrays().items()})

    def copy(self) -> "StgruParams":
        return StgruParams(**{k: v.copy() for k, v in self.arrays().items()})

    def save(self, directory) -> None:
        arrs = self.arrays()
        log_lam = arrs.pop("log_lambda")
        arrs["lambda"] = np.exp(log_lam).astype(log_lam.dtype)
        save_checkpoint(arrs, directory, meta={"kind": "stgru"})

    @classmethod
    def load(cls, directory) -> "StgruParams":
        arrs, meta = load_checkpoint(directory)
        if meta.get("kind") != "stgru":
            raise ValueError(f"{directory} is not an STGRU checkpoint")
        lam = arrs.pop("lambda")
        arrs["log_lambda"] = np.log(lam).astype(lam.dtype)
        return cls(**arrs)


def init_params(n_classes: int, seed: int = 0, ksize: int = 7, reset_channels: int = 1,
                lambda_init: float = 2.0, identity_gain: float = 5.0,
                spread: float = 0.01, dtype=np.float32) -> StgruParams:
    """Initial cell that approximately reproduces the per-frame belief.

    ``W_xh`` has ``identity_gain`` times the identity at its centre tap; every
    other kernel is uniform in ``[-spread, spread]``; biases start at zero.
    """
    rng = np.random.default_rng(seed)
    c = n_classes

    def u(*shape):
        return rng.uniform(-spread, spread, size=shape)

    w_xh = np.zeros((ksize, ksize, c, c))
    w_xh[ksize // 2, ksize // 2] = identity_gain * np.eye(c)
    p = StgruParams(
        w_ir=u(ksize, ksize, 3, reset_channels),
        b_r=np.zeros(reset_channels),
        w_xh=w_xh,
        w_hh=u(ksize, ksize, c, c),
        w_xz=u(ksize, ksize, c, c),
        w_hz=u(ksize, ksize, c, c),
        b_z=np.zeros(c),
        log_lambda=np.asarray(np.log(lambda_init)),
    )
    return p.astype(dtype)


def flow_confidence(I_t, I_prev, f, p: StgruParams) -> Tensor:
    """Per-pixel confidence in ``(0, 1]`` that ``f`` aligns ``I_prev`` with ``I_t``."""
    if T.as_array(I_t).shape != T.as_array(I_prev).shape:
        raise ContractError(f"flow_confidence: images {T.as_array(I_t).shape} and "
                            f"{T.as_array(I_prev).shape} differ")
    residual = T.sub(I_t, warp_bilinear(I_prev, f))
    return T.one_minus(T.tanh(T.absolute(T.conv2d(residual, p.w_ir, p.b_r))))


def _check_normalized(x, name: str, tol: float = 1e-3) -> None:
    s = T.as_array(x).sum(axis=-1)
    if np.any(np.abs(s - 1) > tol):
        raise ContractError(f"{name}: channel sums deviate from 1 by "
                            f"{float(np.max(np.abs(s - 1))):.3g}")


def stgru_step(h_prev, x_t, I_prev, I_t, f, p: StgruParams, check: bool = True) -> Tensor:
    """One recurrent update; returns the fused, channel-normalised belief."""
    if check:
        _check_normalized(x_t, "stgru_step")
    shapes = {T.as_array(a).shape[:2] for a in (h_prev, x_t, I_prev, I_t, f)}
    if len(shapes) != 1:
        raise ContractError(f"stgru_step: spatial sizes differ: {sorted(shapes)}")
    w = warp_bilinear(h_prev, f)
    r = flow_confidence(I_t, I_prev, f, p)
    h_cand = T.add(T.conv2d(x_t, p.w_xh), T.conv2d(T.mul(r, w), p.w_hh))
    z = T.sigmoid(T.add(T.conv2d(x_t, p.w_xz, p.b_z), T.conv2d(w, p.w_hz)))
    lam = T.exp(p.log_lambda)
    keep = T.scale(T.mul(T.one_minus(z), w), lam)
    return T.softmax_channels(T.add(keep, T.mul(z, h_cand)))


@dataclass(frozen=True)
class ChainConfig:
    n_frames: int = 5
    direction: str = "forward"
    fuse_bidirectional: bool = False
    lambda_init: float = 2.0

    def __post_init__(self):
        if self.n_frames < 1:
            raise ContractError(f"n_frames must be >= 1, got {self.n_frames}")
        if self.direction not in ("forward", "backward"):
            raise ContractError(f"direction must be forward or backward, got {self.direction!r}")


def unroll(frames: Sequence, flows: Sequence, unaries: Sequence, p: StgruParams,
           cfg: ChainConfig, check: bool = True) -> Tensor:
    """Run the chain ``unaries[0] -> ... -> unaries[-1]`` with tied parameters.

    ``flows[k]`` maps element ``k + 1`` of the chain back onto element ``k``;
    for a backward chain the caller passes frames in reverse time order and
    the matching reverse flows.
    """
    n = cfg.n_frames
    if len(frames) != n or len(unaries) != n or len(flows) != n - 1:
        raise ContractError(f"unroll: expected {n} frames/unaries and {n - 1} flows, got "
                            f"{len(frames)}/{len(unaries)} and {len(flows)}")
    h = unaries[0]
    if not isinstance(h, Tensor):
        h = Tensor(h)
    for k in range(1, n):
        h = stgru_step(h, unaries[k], frames[k - 1], frames[k], flows[k - 1], p, check=check)
    return h


def fuse_bidirectional(h_fw, h_bw) -> Tensor:
    """Arithmetic mean of the forward and backward beliefs."""
    a, b = T.as_array(h_fw), T.as_array(h_bw)
    if a.shape != b.shape:
        raise ContractError(f"fuse_bidirectional: shapes {a.shape} and {b.shape} differ")
    return T.scale(T.add(h_fw, h_bw), 0.5)


def segmentation_loss(h, labels, ignore: int = IGNORE) -> Tensor:
    """Unnormalised negative log-likelihood summed over labelled pixels."""
    lab = np.asarray(labels)
    if lab.shape != T.as_array(h).shape[:-1]:
        raise ContractError(f"segmentation_loss: labels {lab.shape} do not match "
                            f"belief {T.as_array(h).shape}")
    return T.apply("nll_sum", h, lab, ignore=ignore, floor=LOG_FLOOR)


def with_gate_bias(p: StgruParams, value: float) -> StgruParams:
    """Copy of ``p`` with the update gate pinned by a constant bias."""
    c = p.n_classes
    dt = T.as_array(p.w_xz).dtype
    return replace(p.copy(), w_xz=np.zeros_like(T.as_array(p.w_xz)),
                   w_hz=np.zeros_like(T.as_array(p.w_hz)),
                   b_z=np.full(c, value, dtype=dt))
