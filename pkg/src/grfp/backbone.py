"""Small dilated per-frame segmentation network producing unary beliefs."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensorio import load_checkpoint, save_checkpoint

DEFAULT_WIDTHS = (32, 32, 32, 32, 32)
DEFAULT_DILATIONS = (1, 1, 2, 4, 8, 1)


@dataclass
class BackboneParams:
    weights: list          # kh x kw x cin x cout per layer
    biases: list           # cout per layer
    dilations: tuple[int, ...] = DEFAULT_DILATIONS

    @property
    def n_classes(self) -> int:
        return T.as_array(self.weights[-1]).shape[-1]

    @property
    def receptive_radius(self) -> int:
        return sum(d * (T.as_array(w).shape[0] // 2) for w, d in zip(self.weights, self.dilations))

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{k}"] = T.as_array(w)
            out[f"b{k}"] = T.as_array(b)
        return out

    def watch(self, tape: T.Tape) -> "BackboneParams":
        return BackboneParams([tape.watch(w) for w in self.weights],
                              [tape.watch(b) for b in self.biases], self.dilations)

    def copy(self) -> "BackboneParams":
        return BackboneParams([T.as_array(w).copy() for w in self.weights],
                              [T.as_array(b).copy() for b in self.biases], self.dilations)

    def astype(self, dtype) -> "BackboneParams":
        return BackboneParams([T.as_array(w).astype(dtype) for w in self.weights],
                              [T.as_array(b).astype(dtype) for b in self.biases], self.dilations)

    def save(self, directory) -> None:
        save_checkpoint(self.arrays(), directory, meta={
            "kind": "backbone", "dilations": ",".join(map(str, self.dilations))})

    @classmethod
    def load(cls, directory) -> "BackboneParams":
        arrs, meta = load_checkpoint(directory)
        if meta.get("kind") != "backbone":
            raise ValueError(f"{directory} is not a backbone checkpoint")
        dil = tuple(int(d) for d in meta["dilations"].split(","))
        n = len(dil)
        return cls([arrs[f"w{k}"] for k in range(n)], [arrs[f"b{k}"] for k in range(n)], dil)


def init_backbone(n_classes: int, seed: int = 0, widths=DEFAULT_WIDTHS, gain: float = 6.0,
                  dilations=DEFAULT_DILATIONS, ksize: int = 3, in_channels: int = 3,
                  dtype=np.float32) -> BackboneParams:
    """Uniform ``+-sqrt(gain/fan_in)`` weights and zero biases.

    The default gain of 6 is He-uniform scaling; with ``gain=1`` activations
    shrink through the rectified stack and the net trains poorly.
    """
    if len(dilations) != len(widths) + 1:
        raise ValueError("need one dilation per layer")
    rng = np.random.default_rng(seed)
    chans = [in_channels, *widths, n_classes]
    ws, bs = [], []
    for cin, cout in zip(chans[:-1], chans[1:]):
        bound = np.sqrt(gain / (ksize * ksize * cin))
        ws.append(rng.uniform(-bound, bound, size=(ksize, ksize, cin, cout)).astype(dtype))
        bs.append(np.zeros(cout, dtype=dtype))
    return BackboneParams(ws, bs, tuple(dilations))


def backbone_forward(image, p: BackboneParams) -> T.Tensor:
    """Class scores (pre-softmax) for an HxWx3 or NxHxWx3 image."""
    h = image
    last = len(p.weights) - 1
    for k, (w, b, d) in enumerate(zip(p.weights, p.biases, p.dilations)):
        h = T.conv2d(h, w, b, dilation=d)
        if k < last:
            h = T.relu(h)
    return h


def unary_belief(image, p: BackboneParams) -> T.Tensor:
    return T.softmax_channels(backbone_forward(image, p))


def predict_unaries(frames, p: BackboneParams, batch: int = 8) -> np.ndarray:
    """Untaped beliefs for a stack of frames (N x H x W x 3)."""
    frames = np.asarray(frames)
    out = [unary_belief(frames[i:i + batch], p).data for i in range(0, len(frames), batch)]
    return np.concatenate(out, axis=0)
