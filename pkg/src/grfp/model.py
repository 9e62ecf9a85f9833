"""Inference with a backbone plus forward (and optional backward) STGRU."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BackboneParams, predict_unaries
from .flowdata import VideoSample
from .stgru import ChainConfig, StgruParams, fuse_bidirectional, unroll


@dataclass
class GRFPModel:
    backbone: BackboneParams
    forward: StgruParams
    backward: StgruParams | None = None

    def unaries(self, sample: VideoSample) -> np.ndarray:
        return predict_unaries(sample.frames, self.backbone)


def forward_window(t: int, n_frames: int) -> tuple[list[int], slice]:
    """Frame indices of a forward chain ending at ``t`` and the flow slice."""
    start = t - n_frames + 1
    if start < 0:
        raise ValueError(f"chain of {n_frames} frames ending at {t} starts before the clip")
    return list(range(start, t + 1)), slice(start, t)


def backward_window(t: int, n_frames: int, n_total: int) -> tuple[list[int], list[int]]:
    """Frame indices (reverse time order) of a backward chain ending at ``t``
    and the matching reverse-flow indices."""
    end = t + n_frames - 1
    if end >= n_total:
        raise ValueError(f"backward chain of {n_frames} frames from {t} runs past the clip")
    frames = list(range(end, t - 1, -1))
    return frames, [k - 1 for k in frames[:-1]]


def chain_belief(sample: VideoSample, unaries: np.ndarray, p: StgruParams, t: int,
                 n_frames: int, direction: str = "forward") -> np.ndarray:
    if direction == "forward":
        idx, fl = forward_window(t, n_frames)
        flows = list(sample.flows[fl])
    else:
        idx, fidx = backward_window(t, n_frames, sample.n_frames)
        flows = [sample.rflows[k] for k in fidx]
    cfg = ChainConfig(n_frames=n_frames, direction=direction)
    h = unroll([sample.frames[k] for k in idx], flows, [unaries[k] for k in idx], p, cfg,
               check=False)
    return h.data


def predict_belief(model: GRFPModel, sample: VideoSample, n_frames: int, t: int | None = None,
                   bidirectional: bool = False, unaries: np.ndarray | None = None) -> np.ndarray:
    """GRFP(n_frames) belief at frame ``t`` (default: the labelled frame)."""
    t = sample.label_frame_index if t is None else t
    u = model.unaries(sample) if unaries is None else unaries
    h = chain_belief(sample, u, model.forward, t, n_frames)
    if bidirectional:
        alpha = model.backward if model.backward is not None else model.forward
        hb = chain_belief(sample, u, alpha, t, n_frames, "backward")
        h = fuse_bidirectional(h, hb).data
    return h


def predict_sequence(model: GRFPModel, sample: VideoSample, n_frames: int,
                     unaries: np.ndarray | None = None) -> np.ndarray:
    """Label maps for every frame, each from a forward chain of up to ``n_frames``."""
    u = model.unaries(sample) if unaries is None else unaries
    out = []
    for t in range(sample.n_frames):
        n = min(n_frames, t + 1)
        out.append(chain_belief(sample, u, model.forward, t, n).argmax(axis=-1))
    return np.stack(out).astype(np.uint8)
