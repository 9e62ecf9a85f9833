"""Segmentation accuracy (IoU) and trajectory-based temporal consistency."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ContractError
from .warp import _kernel

IGNORE = 255


def confusion_matrix(preds: Sequence[np.ndarray], labels: Sequence[np.ndarray],
                     n_classes: int, ignore: int = IGNORE) -> np.ndarray:
    """``cm[a, b]`` counts pixels of true class ``a`` predicted as ``b``."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, l in zip(preds, labels):
        p = np.asarray(p).astype(np.int64)
        l = np.asarray(l).astype(np.int64)
        if p.shape != l.shape:
            raise ContractError(f"miou: prediction {p.shape} and label {l.shape} differ")
        keep = l != ignore
        if np.any(l[keep] >= n_classes) or np.any(l[keep] < 0):
            raise ContractError(f"miou: label class outside 0..{n_classes - 1}")
        if np.any(p[keep] >= n_classes) or np.any(p[keep] < 0):
            raise ContractError(f"miou: predicted class outside 0..{n_classes - 1}")
        cm += np.bincount(n_classes * l[keep] + p[keep],
                          minlength=n_classes ** 2).reshape(n_classes, n_classes)
    return cm


@dataclass
class IoUResult:
    per_class: np.ndarray   # NaN for classes absent from prediction and truth
    mean: float
    confusion: np.ndarray


def iou_from_confusion(cm: np.ndarray) -> IoUResult:
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        per = np.where(union > 0, tp / union, np.nan)
    mean = float(np.nanmean(per)) if np.any(union > 0) else float("nan")
    return IoUResult(per, mean, cm)


def miou(preds, labels, n_classes: int, ignore: int = IGNORE) -> IoUResult:
    return iou_from_confusion(confusion_matrix(preds, labels, n_classes, ignore))


# ---------------------------------------------------------------- trajectories

@dataclass
class Trajectory:
    start: tuple[int, int]                 # (row, col) on the first frame
    positions: list[tuple[float, float]]   # (row, col) per frame, sub-pixel
    reason: str = "end"                    # end | occluded | out-of-image
    first_frame: int = 0

    def __len__(self) -> int:
        return len(self.positions)


def _nearest(pos, h, w):
    i, j = int(np.floor(pos[0] + 0.5)), int(np.floor(pos[1] + 0.5))
    return i, j, (0 <= i < h and 0 <= j < w)


def invert_flow(flow: np.ndarray, occl: np.ndarray | None = None):
    """Forward displacement on the earlier frame from a backward field.

    Every non-occluded target pixel splats its negated flow to the nearest
    source pixel.  Returns ``(forward, valid)``; pixels that receive no splat
    are invalid (they leave the image or become covered).
    """
    h, w = flow.shape[:2]
    fwd = np.zeros((h, w, 2))
    valid = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            if occl is not None and occl[i, j]:
                continue
            si, sj, inside = _nearest((i + flow[i, j, 1], j + flow[i, j, 0]), h, w)
            if inside:
                fwd[si, sj] = -flow[i, j]
                valid[si, sj] = True
    return fwd, valid


def _interp_displacement(fwd, valid, pos):
    """Bilinear interpolation of the valid forward displacements around ``pos``."""
    h, w = valid.shape
    y, x = pos
    m0, n0 = int(np.floor(y)), int(np.floor(x))
    acc = np.zeros(2)
    wsum = 0.0
    for m in (m0, m0 + 1):
        for n in (n0, n0 + 1):
            if 0 <= m < h and 0 <= n < w and valid[m, n]:
                wt = float(_kernel(y - m) * _kernel(x - n))
                acc += wt * fwd[m, n]
                wsum += wt
    return acc / wsum if wsum > 0 else None


def build_trajectories(flows: Sequence[np.ndarray], occlusions: Sequence[np.ndarray] | None = None,
                       stride: int = 4) -> list[Trajectory]:
    """Track a regular grid from the first frame through the flow chain.

    ``flows[k]`` is the backward field from frame ``k + 1`` to frame ``k``.
    A point stops at an occlusion-mask hit, when it would leave the image,
    or when its pixel has no forward correspondence (it becomes covered).
    """
    flows = [np.asarray(f, dtype=np.float64) for f in flows]
    n = len(flows)
    if n == 0:
        return []
    h, w = flows[0].shape[:2]
    occl = [None] * n if occlusions is None else [np.asarray(o).astype(bool) for o in occlusions]
    inverted = [invert_flow(f, o) for f, o in zip(flows, occl)]
    trajs = []
    off = stride // 2
    for i in range(off, h, stride):
        for j in range(off, w, stride):
            t = Trajectory((i, j), [(float(i), float(j))])
            for k in range(n):
                y, x = t.positions[-1]
                fwd, valid = inverted[k]
                d = _interp_displacement(fwd, valid, (y, x))
                if d is None:
                    # no correspondence: extrapolate with the backward field to tell
                    # an exit from an occlusion
                    ni, nj, _ = _nearest((y, x), h, w)
                    guess = (y - flows[k][ni, nj, 1], x - flows[k][ni, nj, 0])
                    _, _, inside = _nearest(guess, h, w)
                    t.reason = "occluded" if inside else "out-of-image"
                    break
                ny, nx = y + d[1], x + d[0]
                ti, tj, inside = _nearest((ny, nx), h, w)
                if not inside:
                    t.reason = "out-of-image"
                    break
                if occl[k] is not None and occl[k][ti, tj]:
                    t.reason = "occluded"
                    break
                t.positions.append((ny, nx))
            trajs.append(t)
    return trajs


def temporal_consistency(pred_seq: Sequence[np.ndarray], trajs: Sequence[Trajectory]) -> float:
    """Fraction of trajectories (length >= 2) whose predicted label never changes."""
    pred_seq = [np.asarray(p) for p in pred_seq]
    counted = consistent = 0
    for t in trajs:
        if len(t) < 2:
            continue
        h, w = pred_seq[t.first_frame].shape
        labs = set()
        for k, pos in enumerate(t.positions):
            i, j, _ = _nearest(pos, h, w)
            labs.add(int(pred_seq[t.first_frame + k][min(max(i, 0), h - 1), min(max(j, 0), w - 1)]))
        counted += 1
        consistent += len(labs) == 1
    if counted == 0:
        raise ValueError("temporal_consistency: no trajectories of length >= 2")
    return consistent / counted


# ---------------------------------------------------------------- reports

def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    def cell(v):
        if isinstance(v, float):
            return "nan" if np.isnan(v) else f"{v:.4f}"
        return str(v)
    lines = ["\t".join(header)] + ["\t".join(cell(v) for v in r) for r in rows]
    return "\n".join(lines) + "\n"


def frames_ablation(model, clips, n_frames_list: Sequence[int], n_classes: int,
                    flow_noise: float = 0.0, noise_seed: int = 0) -> list[tuple[int, float]]:
    """mIoU at the labelled frame for each chain length, same parameters throughout."""
    from .optim import evaluate_miou

    unaries = {c.seed: model.unaries(c) for c in clips}
    return [(n, evaluate_miou(model, clips, n, n_classes, flow_noise=flow_noise,
                              noise_seed=noise_seed, unaries=unaries))
            for n in n_frames_list]


def overlay(image: np.ndarray, labels: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    from .flowdata import PALETTE

    return (1 - alpha) * image + alpha * PALETTE[np.asarray(labels) % len(PALETTE)]
