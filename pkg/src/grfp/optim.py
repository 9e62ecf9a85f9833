"""Optimisers and the training loops for the backbone and the recurrent units."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import BackboneParams, predict_unaries, unary_belief
from .evaluation import miou
from .flowdata import Dataset, VideoSample, noisy_copy
from .model import GRFPModel, backward_window, forward_window, predict_belief
from .stgru import ChainConfig, StgruParams, fuse_bidirectional, segmentation_loss, unroll

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 2e-5
    beta1: float = 0.95
    beta2: float = 0.99
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0


@dataclass
class MomentumState:
    lr: float = 1e-7
    momentum: float = 0.95
    velocity: dict = field(default_factory=dict)
    skipped: int = 0


def _finite(grads: dict) -> bool:
    return all(np.all(np.isfinite(g)) for g in grads.values())


def _check_shapes(params: dict, grads: dict) -> None:
    for k, p in params.items():
        if np.shape(grads[k]) != np.shape(p):
            raise T.ContractError(f"gradient for {k} has shape {np.shape(grads[k])}, "
                                  f"parameter has {np.shape(p)}")


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """Bias-corrected Adam; a non-finite gradient skips the whole update."""
    _check_shapes(params, grads)
    if not _finite(grads):
        state.skipped += 1
        log.warning("adam_step: non-finite gradient, update skipped")
        return params, state
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    out = {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = b1 * state.m.get(k, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(k, 0.0) + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        m_hat = m / (1 - b1 ** state.t)
        v_hat = v / (1 - b2 ** state.t)
        step = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        out[k] = (p - step).astype(np.asarray(p).dtype)
    return out, state


def sgd_momentum_step(params: dict, grads: dict, state: MomentumState) -> tuple[dict, MomentumState]:
    """``v <- mu v - lr g``; ``p <- p + v``."""
    _check_shapes(params, grads)
    if not _finite(grads):
        state.skipped += 1
        log.warning("sgd_momentum_step: non-finite gradient, update skipped")
        return params, state
    out = {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        v = state.momentum * state.velocity.get(k, 0.0) - state.lr * g
        state.velocity[k] = v
        out[k] = (p + v).astype(np.asarray(p).dtype)
    return out, state


def _backbone_from(arrays: dict, like: BackboneParams) -> BackboneParams:
    n = len(like.weights)
    return BackboneParams([arrays[f"w{k}"] for k in range(n)],
                          [arrays[f"b{k}"] for k in range(n)], like.dilations)


# ---------------------------------------------------------------- backbone

def augment(image: np.ndarray, labels: np.ndarray, rng, crop: int | None = None):
    """Random dihedral transform and optional square crop of an image/label pair."""
    k = int(rng.integers(4))
    image, labels = np.rot90(image, k), np.rot90(labels, k)
    if rng.random() < 0.5:
        image, labels = image[:, ::-1], labels[:, ::-1]
    if crop is not None and crop < min(labels.shape):
        i = int(rng.integers(labels.shape[0] - crop + 1))
        j = int(rng.integers(labels.shape[1] - crop + 1))
        image, labels = image[i:i + crop, j:j + crop], labels[i:i + crop, j:j + crop]
    return np.ascontiguousarray(image), np.ascontiguousarray(labels)


def pretrain_backbone(dataset: Dataset, epochs: int, seed: int = 0, lr: float = 1e-3,
                      init: BackboneParams | None = None, log_path=None,
                      crop: int | None = 48,
                      augment_frames: bool = True) -> tuple[BackboneParams, list[float]]:
    """Per-frame supervised training on the labelled frames of the train split.

    With ``augment_frames`` each step sees a random rotation, flip and
    ``crop``-sized window of its frame; otherwise the whole frame as stored.
    """
    from .backbone import init_backbone

    p = init if init is not None else init_backbone(dataset.n_classes, seed=seed)
    if epochs <= 0:
        return p, []
    clips = dataset.clips("train")
    rng = np.random.default_rng([seed, 11])
    state = AdamState(lr=lr, beta1=0.9, beta2=0.999)
    losses, lines = [], []
    step = 0
    for _ in range(epochs):
        for i in rng.permutation(len(clips)):
            c = clips[i]
            img, lab = c.frames[c.label_frame_index], c.labels
            if augment_frames:
                img, lab = augment(img, lab, rng, crop)
            tape = T.Tape()
            q = p.watch(tape)
            loss = segmentation_loss(unary_belief(img, q), lab)
            g = T.backward(tape, loss)
            grads = {f"w{k}": g.array(w) for k, w in enumerate(q.weights)}
            grads.update({f"b{k}": g.array(b) for k, b in enumerate(q.biases)})
            new, state = adam_step(p.arrays(), grads, state)
            p = _backbone_from(new, p)
            losses.append(loss.item())
            lines.append(f"{step}\t{loss.item():.6f}")
            step += 1
    if log_path is not None:
        Path(log_path).write_text("\n".join(lines) + "\n")
    return p, losses


# ---------------------------------------------------------------- GRFP

@dataclass
class TrainConfig:
    n_frames: int = 5
    backbone_truncation_depth: int = 2
    train_backward: bool = False
    refine_backbone: bool = True
    seed: int = 0
    steps: int = 400
    stgru_lr: float = 1e-3
    backbone_lr: float = 1e-7
    momentum: float = 0.95
    beta1: float = 0.95
    beta2: float = 0.99
    flow_noise: float = 0.0
    val_every: int = 100
    pretrain_epochs: int = 150
    pretrain_lr: float = 1e-3

    def __post_init__(self):
        if not 1 <= self.backbone_truncation_depth <= self.n_frames:
            raise T.ContractError(
                f"backbone_truncation_depth must be in 1..{self.n_frames}, "
                f"got {self.backbone_truncation_depth}")

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        kw = {}
        types = {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}
        for line in text.splitlines():
            if not line.strip():
                continue
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in types:
                raise ValueError(f"unknown config key {k!r}")
            kw[k] = (v == "True") if types[k] is bool else types[k](v)
        return cls(**kw)


def grfp_loss(sample: VideoSample, stgru: StgruParams, n_frames: int,
              backbone: BackboneParams | None = None, depth: int = 2,
              static_unaries: np.ndarray | None = None, alpha: StgruParams | None = None,
              t: int | None = None) -> T.Tensor:
    """Segmentation loss at frame ``t`` (default: the labelled one).

    ``stgru``, ``alpha`` and ``backbone`` may hold taped tensors.  With a
    ``backbone``, the ``depth`` frames of each chain nearest the loss take
    their unaries through it; all other unaries are constants, taken from
    ``static_unaries`` or from an untaped backbone pass.
    """
    t = sample.label_frame_index if t is None else t
    idx, fl = forward_window(t, n_frames)
    near, need = set(idx[-depth:]), set(idx)
    if alpha is not None:
        bidx, bfl = backward_window(t, n_frames, sample.n_frames)
        near |= set(bidx[-depth:])
        need |= set(bidx)
    if backbone is None:
        if static_unaries is None:
            raise ValueError("grfp_loss needs a backbone or precomputed unaries")
        near = set()
    unaries = {}
    far = sorted(need - near)
    if far:
        if static_unaries is not None:
            unaries.update({k: static_unaries[k] for k in far})
        else:
            unaries.update(zip(far, predict_unaries(sample.frames[far], _untaped(backbone))))
    if near:
        order = sorted(near)
        batch = unary_belief(sample.frames[order], backbone)
        unaries.update({k: T.index(batch, j) for j, k in enumerate(order)})

    h = unroll([sample.frames[k] for k in idx], list(sample.flows[fl]),
               [unaries[k] for k in idx], stgru, ChainConfig(n_frames), check=False)
    if alpha is not None:
        hb = unroll([sample.frames[k] for k in bidx], [sample.rflows[k] for k in bfl],
                    [unaries[k] for k in bidx], alpha, ChainConfig(n_frames, "backward"),
                    check=False)
        h = fuse_bidirectional(h, hb)
    return segmentation_loss(h, sample.labels)


def _untaped(p: BackboneParams) -> BackboneParams:
    return BackboneParams([T.as_array(w) for w in p.weights], [T.as_array(b) for b in p.biases],
                          p.dilations)


def evaluate_miou(model: GRFPModel, clips, n_frames: int, n_classes: int,
                  bidirectional: bool = False, flow_noise: float = 0.0, noise_seed: int = 0,
                  unaries: dict | None = None) -> float:
    preds, labels = [], []
    for c in clips:
        s = noisy_copy(c, flow_noise, noise_seed)
        u = None if unaries is None else unaries[c.seed]
        h = predict_belief(model, s, n_frames, bidirectional=bidirectional, unaries=u)
        preds.append(h.argmax(axis=-1))
        labels.append(c.labels)
    return miou(preds, labels, n_classes).mean


def train_grfp(dataset: Dataset, cfg: TrainConfig, backbone: BackboneParams,
               stgru: StgruParams, alpha: StgruParams | None = None, log_path=None):
    """Fit the recurrent unit(s) and optionally refine the backbone.

    Returns ``(model, log_lines)``; each log line is ``step<TAB>loss`` with a
    third ``val_miou`` column every ``cfg.val_every`` steps.
    """
    clips = [c for c in dataset.clips("train") if c.label_frame_index + 1 >= cfg.n_frames]
    skipped = len(dataset.ids("train")) - len(clips)
    if skipped:
        log.warning("skipping %d clips shorter than %d frames", skipped, cfg.n_frames)
    if cfg.train_backward and alpha is None:
        alpha = stgru.copy()
    val = dataset.clips("val")
    rng = np.random.default_rng([cfg.seed, 23])
    adam = AdamState(lr=cfg.stgru_lr, beta1=cfg.beta1, beta2=cfg.beta2)
    adam_bw = AdamState(lr=cfg.stgru_lr, beta1=cfg.beta1, beta2=cfg.beta2)
    sgd = MomentumState(lr=cfg.backbone_lr, momentum=cfg.momentum)
    static = None if cfg.refine_backbone else {
        c.seed: predict_unaries(c.frames, backbone) for c in clips}
    lines = []

    def val_score(model):
        return evaluate_miou(model, val, cfg.n_frames, dataset.n_classes,
                             bidirectional=cfg.train_backward, flow_noise=cfg.flow_noise,
                             noise_seed=cfg.seed + 1)

    for step in range(cfg.steps):
        clip = clips[int(rng.integers(len(clips)))]
        sample = noisy_copy(clip, cfg.flow_noise, cfg.seed * 100003 + step)
        tape = T.Tape()
        q = stgru.watch(tape)
        a = alpha.watch(tape) if cfg.train_backward else None
        b = backbone.watch(tape) if cfg.refine_backbone else None
        loss = grfp_loss(sample, q, cfg.n_frames, backbone=b,
                         depth=cfg.backbone_truncation_depth,
                         static_unaries=None if static is None else static[clip.seed], alpha=a)
        g = T.backward(tape, loss)
        grads = {k: g.array(v) for k, v in vars(q).items()}
        stgru, adam = adam_step(stgru.arrays(), grads, adam)
        stgru = StgruParams(**stgru)
        if a is not None:
            new, adam_bw = adam_step(alpha.arrays(), {k: g.array(v) for k, v in vars(a).items()},
                                     adam_bw)
            alpha = StgruParams(**new)
        if b is not None:
            bg = {f"w{k}": g.array(w) for k, w in enumerate(b.weights)}
            bg.update({f"b{k}": g.array(x) for k, x in enumerate(b.biases)})
            new, sgd = sgd_momentum_step(backbone.arrays(), bg, sgd)
            backbone = _backbone_from(new, backbone)
        line = f"{step}\t{loss.item():.6f}"
        if cfg.val_every and (step + 1) % cfg.val_every == 0:
            line += f"\t{val_score(GRFPModel(backbone, stgru, alpha)):.6f}"
        lines.append(line)
    if log_path is not None:
        Path(log_path).write_text("\n".join(lines) + "\n")
    return GRFPModel(backbone, stgru, alpha), lines
