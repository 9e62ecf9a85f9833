"""Synthetic moving-shape videos with exact labels, flow and occlusion masks.

Objects are rectangles or disks of a class-specific colour sliding over a
textured, optionally translating background.  Each frame may additionally
carry pixel noise and short-lived *distractor* blobs painted in a class
colour; distractors never appear in the labels, so a per-frame classifier
cannot tell them from real objects while a temporal model can.

Flows follow the warp convention: ``flows[k]`` lives on frame ``k + 1`` and
points back to where each pixel was in frame ``k``.  ``rflows[k]`` lives on
frame ``k`` and points forward to frame ``k + 1`` (used by backward chains).
"""
from __future__ import annotations

import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import ContractError
from .tensorio import (atomic_write, load_tensor, save_tensor, write_pgm, write_ppm)

log = logging.getLogger(__name__)

IGNORE = 255
PALETTE = np.array([
    [0.45, 0.45, 0.45],  # background (only used for overlays)
    [0.85, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.30, 0.85],
    [0.90, 0.80, 0.15],
    [0.80, 0.25, 0.80],
    [0.15, 0.80, 0.80],
    [0.95, 0.55, 0.10],
])
TEXTURE_SIZE = 128


@dataclass(frozen=True)
class SceneObject:
    shape: str                      # "rectangle" or "disk"
    class_id: int
    size: tuple[int, int]           # rows x cols; a disk uses size[0] as diameter
    position: tuple[float, float]   # (x, y) of the top-left corner at frame 0
    velocity: tuple[float, float]   # (vx, vy) px/frame
    z: int


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    n_classes: int = 5
    n_frames: int = 5
    label_frame_index: int | None = None    # defaults to the last of n_frames
    extend_after: int = 4                   # extra frames past the labelled one
    objects: tuple[SceneObject, ...] | None = None  # None: sampled from the seed
    n_objects: tuple[int, int] = (3, 5)
    object_size: tuple[int, int] = (10, 22)
    max_speed: int = 3
    camera_speed: int = 1
    frame_noise: float = 0.03
    n_distractors: int = 1
    distractor_prob: float = 1.0            # chance that each distractor slot is drawn
    distractor_size: tuple[int, int] = (6, 14)
    texture_seed: int | None = None

    @property
    def label_index(self) -> int:
        return self.n_frames - 1 if self.label_frame_index is None else self.label_frame_index

    @property
    def total_frames(self) -> int:
        return self.n_frames + self.extend_after

    def validate(self) -> None:
        if self.n_classes < 2 or self.n_classes > len(PALETTE):
            raise ContractError(f"n_classes must be in 2..{len(PALETTE)}")
        if not 0 <= self.label_index < self.total_frames:
            raise ContractError(f"label_frame_index {self.label_index} outside the clip")
        limit = 0.25 * min(self.height, self.width)
        if self.max_speed * np.sqrt(2) > limit and self.objects is None:
            raise ContractError(f"max_speed {self.max_speed} exceeds {limit} px/frame")
        if self.objects is not None:
            zs = [o.z for o in self.objects]
            if len(set(zs)) != len(zs):
                raise ContractError(f"object z-orders must be unique, got {zs}")
            for o in self.objects:
                if np.hypot(*o.velocity) > limit:
                    raise ContractError(f"object velocity {o.velocity} exceeds {limit} px/frame")
                if not 1 <= o.class_id < self.n_classes:
                    raise ContractError(f"object class {o.class_id} outside 1..{self.n_classes - 1}")
                if o.shape not in ("rectangle", "disk"):
                    raise ContractError(f"unknown shape {o.shape!r}")


@dataclass
class VideoSample:
    frames: np.ndarray        # T x H x W x 3 float32 in [0, 1]
    flows: np.ndarray         # (T-1) x H x W x 2, frame k+1 -> frame k
    occlusions: np.ndarray    # (T-1) x H x W uint8, 1 = no correspondence in frame k
    rflows: np.ndarray        # (T-1) x H x W x 2, frame k -> frame k+1
    roccl: np.ndarray         # (T-1) x H x W uint8
    labels: np.ndarray        # H x W uint8 at label_frame_index
    label_frame_index: int
    seed: int = 0
    class_maps: np.ndarray | None = None   # T x H x W, generator only

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def _smooth_noise(rng, size: int, channels: int, scale: float) -> np.ndarray:
    """Periodic low-pass noise with unit standard deviation."""
    white = rng.standard_normal((size, size, channels))
    k = np.fft.fftfreq(size)
    rad2 = k[:, None] ** 2 + k[None, :] ** 2
    gain = np.exp(-rad2 * (scale ** 2) * 2 * np.pi ** 2)[..., None]
    sm = np.real(np.fft.ifft2(np.fft.fft2(white, axes=(0, 1)) * gain, axes=(0, 1)))
    return (sm - sm.mean()) / (sm.std() + 1e-12)


def _background_texture(seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7])
    lum = 0.45 + 0.09 * _smooth_noise(rng, TEXTURE_SIZE, 1, 6.0)
    tint = 0.03 * _smooth_noise(rng, TEXTURE_SIZE, 3, 10.0)
    grain = 0.04 * _smooth_noise(rng, TEXTURE_SIZE, 1, 1.0)
    return np.clip(lum + tint + grain, 0.05, 0.95)


def _sample_objects(spec: SceneSpec, rng) -> tuple[SceneObject, ...]:
    lo, hi = spec.n_objects
    n = int(rng.integers(lo, hi + 1))
    smin, smax = spec.object_size
    objs = []
    for z in range(n):
        shape = "disk" if rng.random() < 0.5 else "rectangle"
        if shape == "disk":
            d = int(rng.integers(smin, smax + 1))
            size = (d, d)
        else:
            size = (int(rng.integers(smin, smax + 1)), int(rng.integers(smin, smax + 1)))
        vel = tuple(int(v) for v in rng.integers(-spec.max_speed, spec.max_speed + 1, size=2))
        # keep the object mostly in view over the whole clip
        span = spec.total_frames - 1
        pos = []
        for extent, dim, v in ((size[1], spec.width, vel[0]), (size[0], spec.height, vel[1])):
            start_lo = max(-extent // 2, -extent // 2 - v * span)
            start_hi = min(dim - extent // 2, dim - extent // 2 - v * span)
            if start_hi <= start_lo:
                start_lo, start_hi = 0, max(1, dim - extent)
            pos.append(int(rng.integers(start_lo, start_hi)))
        objs.append(SceneObject(shape, int(rng.integers(1, spec.n_classes)), size,
                                (pos[0], pos[1]), vel, z))
    return tuple(objs)


def _object_mask(o: SceneObject, k: int, ii, jj) -> np.ndarray:
    x0 = o.position[0] + o.velocity[0] * k
    y0 = o.position[1] + o.velocity[1] * k
    h, w = o.size
    if o.shape == "rectangle":
        return (ii >= y0) & (ii < y0 + h) & (jj >= x0) & (jj < x0 + w)
    r = h / 2.0
    cy, cx = y0 + r - 0.5, x0 + r - 0.5
    return (ii - cy) ** 2 + (jj - cx) ** 2 <= r * r


def _object_texture(o: SceneObject, k: int, ii, jj, color) -> np.ndarray:
    ly = ii - (o.position[1] + o.velocity[1] * k)
    lx = jj - (o.position[0] + o.velocity[0] * k)
    stripes = 0.08 * np.sin(2 * np.pi * (lx + 0.5 * ly) / 6.0)
    return np.clip(color * (1.0 + stripes[..., None]), 0.0, 1.0)


def _surfaces(objs, k, ii, jj) -> np.ndarray:
    surf = np.zeros(ii.shape, dtype=np.int32)
    for idx in sorted(range(len(objs)), key=lambda i: objs[i].z):
        surf[_object_mask(objs[idx], k, ii, jj)] = idx + 1
    return surf


def _correspondence(surf_tgt, surf_src, vel_of_surface, sign, bg_flow):
    """Flow on the target frame pointing to the source frame plus occlusion mask."""
    h, w = surf_tgt.shape
    v = vel_of_surface[surf_tgt]                 # H x W x 2 motion of the surface
    flow = sign * v
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    qy = np.rint(ii + flow[..., 1]).astype(int)
    qx = np.rint(jj + flow[..., 0]).astype(int)
    inside = (qy >= 0) & (qy < h) & (qx >= 0) & (qx < w)
    same = np.zeros_like(inside)
    same[inside] = surf_src[qy[inside], qx[inside]] == surf_tgt[inside]
    occl = ~same
    flow[occl] = bg_flow
    return flow.astype(np.float32), occl.astype(np.uint8)


def generate_clip(spec: SceneSpec, seed: int) -> VideoSample:
    """Render one clip with labels at ``spec.label_index``."""
    spec.validate()
    rng = np.random.default_rng([seed, 0])
    objs = spec.objects if spec.objects is not None else _sample_objects(spec, rng)
    if spec.camera_speed:
        cam = tuple(int(v) for v in rng.integers(-spec.camera_speed, spec.camera_speed + 1, 2))
    else:
        cam = (0, 0)
    colors = [np.clip(PALETTE[o.class_id] + rng.uniform(-0.05, 0.05, 3), 0, 1) for o in objs]
    tex = _background_texture(seed if spec.texture_seed is None else spec.texture_seed)

    h, w, n = spec.height, spec.width, spec.total_frames
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    vel = np.array([cam] + [o.velocity for o in objs], dtype=np.float64)
    classes = np.array([0] + [o.class_id for o in objs], dtype=np.int32)

    frames, surfs = [], []
    for k in range(n):
        ty = (ii - cam[1] * k) % TEXTURE_SIZE
        tx = (jj - cam[0] * k) % TEXTURE_SIZE
        img = tex[ty, tx].copy()
        for idx in sorted(range(len(objs)), key=lambda i: objs[i].z):
            m = _object_mask(objs[idx], k, ii, jj)
            img[m] = _object_texture(objs[idx], k, ii, jj, colors[idx])[m]
        surfs.append(_surfaces(objs, k, ii, jj))
        frng = np.random.default_rng([seed, 1000 + k])
        dlo, dhi = spec.distractor_size
        for _ in range(spec.n_distractors):
            if frng.random() >= spec.distractor_prob:
                continue
            cls = int(frng.integers(1, spec.n_classes))
            d = int(frng.integers(dlo, dhi + 1))
            blob = SceneObject("disk" if frng.random() < 0.5 else "rectangle", cls, (d, d),
                               (int(frng.integers(-d // 2, w - d // 2)),
                                int(frng.integers(-d // 2, h - d // 2))), (0, 0), -1)
            m = _object_mask(blob, 0, ii, jj)
            col = np.clip(PALETTE[cls] + frng.uniform(-0.05, 0.05, 3), 0, 1)
            img[m] = _object_texture(blob, 0, ii, jj, col)[m]
        if spec.frame_noise > 0:
            img = img + frng.normal(0.0, spec.frame_noise, img.shape)
        frames.append(np.clip(img, 0.0, 1.0).astype(np.float32))

    bg = np.array(cam, dtype=np.float64)
    flows, occl, rflows, roccl = [], [], [], []
    for k in range(n - 1):
        f, o = _correspondence(surfs[k + 1], surfs[k], vel, -1.0, -bg)
        flows.append(f)
        occl.append(o)
        f, o = _correspondence(surfs[k], surfs[k + 1], vel, 1.0, bg)
        rflows.append(f)
        roccl.append(o)

    class_maps = np.stack([classes[s] for s in surfs]).astype(np.uint8)
    empty2 = np.zeros((0, h, w, 2), np.float32)
    empty1 = np.zeros((0, h, w), np.uint8)
    return VideoSample(
        frames=np.stack(frames),
        flows=np.stack(flows) if flows else empty2,
        occlusions=np.stack(occl) if occl else empty1,
        rflows=np.stack(rflows) if rflows else empty2,
        roccl=np.stack(roccl) if roccl else empty1,
        labels=class_maps[spec.label_index].copy(),
        label_frame_index=spec.label_index,
        seed=int(seed),
        class_maps=class_maps,
    )


def add_flow_noise(flows: np.ndarray, sigma: float, rng) -> np.ndarray:
    """Additive Gaussian displacement noise simulating an imperfect estimator."""
    if sigma <= 0:
        return flows
    return (flows + rng.normal(0.0, sigma, flows.shape)).astype(flows.dtype)


def noisy_copy(sample: VideoSample, sigma: float, seed: int) -> VideoSample:
    """Sample with both flow directions perturbed, reproducibly per ``seed``."""
    if sigma <= 0:
        return sample
    rng = np.random.default_rng([seed, sample.seed, 99])
    return replace(sample, flows=add_flow_noise(sample.flows, sigma, rng),
                   rflows=add_flow_noise(sample.rflows, sigma, rng))


# ---------------------------------------------------------------- flow files

def save_flow_file(flow: np.ndarray, path) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[-1] != 2:
        raise ContractError(f"flow must be HxWx2, got {flow.shape}")
    save_tensor(flow, path)
    atomic_write(str(path) + ".txt", b"channels: fx (columns, rightward), fy (rows, downward)\n")


def load_flow_file(path) -> np.ndarray:
    flow = load_tensor(path, expect_rank=3)
    if flow.shape[-1] != 2:
        from .tensorio import FormatError
        raise FormatError(f"expected 2 flow channels, found {flow.shape[-1]}")
    return flow


# ---------------------------------------------------------------- datasets

SPLITS = ("train", "val", "test")


def _spec_to_text(spec: SceneSpec) -> str:
    lines = []
    for f in fields(spec):
        v = getattr(spec, f.name)
        if f.name == "objects":
            continue
        if isinstance(v, tuple):
            v = ",".join(map(str, v))
        lines.append(f"{f.name}={'' if v is None else v}")
    return "\n".join(lines) + "\n"


def _spec_from_text(text: str) -> SceneSpec:
    base = SceneSpec()
    kw = {}
    for line in text.splitlines():
        if "=" not in line:
            continue
        k, v = line.split("=", 1)
        cur = getattr(base, k)
        if k in ("label_frame_index", "texture_seed"):
            kw[k] = None if v == "" else int(v)
        elif isinstance(cur, tuple):
            kw[k] = tuple(int(x) for x in v.split(","))
        elif isinstance(cur, float):
            kw[k] = float(v)
        else:
            kw[k] = int(v)
    return SceneSpec(**kw)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("GRFP_THREADS", "1")))
    except ValueError:
        return 1


def write_clip(sample: VideoSample, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k, fr in enumerate(sample.frames):
        save_tensor(fr, d / f"frame_{k}.GRFPTNSR")
    for k in range(len(sample.flows)):
        save_tensor(sample.flows[k], d / f"flow_{k}.GRFPTNSR")
        save_tensor(sample.occlusions[k], d / f"occl_{k}.GRFPTNSR")
        save_tensor(sample.rflows[k], d / f"rflow_{k}.GRFPTNSR")
        save_tensor(sample.roccl[k], d / f"roccl_{k}.GRFPTNSR")
    save_tensor(sample.labels.astype(np.uint8), d / "label.GRFPTNSR")
    atomic_write(d / "clip.txt", f"seed={sample.seed}\nlabel_frame_index="
                 f"{sample.label_frame_index}\nframes={sample.n_frames}\n".encode())


def read_clip(directory) -> VideoSample:
    d = Path(directory)
    meta = dict(line.split("=", 1) for line in (d / "clip.txt").read_text().split())
    n = int(meta["frames"])
    frames = np.stack([load_tensor(d / f"frame_{k}.GRFPTNSR", 3) for k in range(n)])

    def stack(prefix, rank):
        arrs = [load_tensor(d / f"{prefix}_{k}.GRFPTNSR", rank) for k in range(n - 1)]
        return np.stack(arrs) if arrs else None

    return VideoSample(frames=frames, flows=stack("flow", 3), occlusions=stack("occl", 2),
                       rflows=stack("rflow", 3), roccl=stack("roccl", 2),
                       labels=load_tensor(d / "label.GRFPTNSR", 2),
                       label_frame_index=int(meta["label_frame_index"]), seed=int(meta["seed"]))


def export_previews(sample: VideoSample, directory) -> None:
    """PPM frames and a PGM label map for visual inspection."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k, fr in enumerate(sample.frames):
        write_ppm(d / f"frame_{k}.ppm", fr)
    write_pgm(d / "label.pgm", sample.labels)


def make_dataset(root, n_train: int = 20, n_val: int = 5, n_test: int = 5,
                 template: SceneSpec | None = None, master_seed: int = 0,
                 overwrite: bool = False) -> Path:
    """Generate clips for the three splits under ``root``; deterministic per seed."""
    template = template or SceneSpec()
    template.validate()
    sizes = {"train": n_train, "val": n_val, "test": n_test}
    if min(sizes.values()) < 1:
        raise ContractError(f"split sizes must be >= 1, got {sizes}")
    root = Path(root)
    if not root.parent.exists():
        raise FileNotFoundError(f"parent directory {root.parent} does not exist")
    if root.exists() and any(root.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{root} is not empty; pass overwrite=True to replace it")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)

    total = sum(sizes.values())
    rng = np.random.default_rng(master_seed)
    seeds = [int(s) for s in rng.choice(2 ** 31 - 1, size=total, replace=False)]
    jobs = []
    for split in SPLITS:
        for _ in range(sizes[split]):
            cid = f"{len(jobs):04d}"
            jobs.append((cid, seeds[len(jobs)], split))

    def build(job):
        cid, seed, _ = job
        write_clip(generate_clip(template, seed), root / "clips" / cid)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        list(pool.map(build, jobs))

    atomic_write(root / "manifest.txt",
                 "".join(f"{cid} {seed} {split}\n" for cid, seed, split in jobs).encode())
    for split in SPLITS:
        atomic_write(root / f"{split}.txt",
                     "".join(f"{cid}\n" for cid, _, s in jobs if s == split).encode())
    atomic_write(root / "scene.txt", _spec_to_text(template).encode())
    log.info("wrote %d clips to %s", total, root)
    return root


class Dataset:
    """Read-only view of a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        if not (self.root / "manifest.txt").exists():
            raise FileNotFoundError(f"no dataset manifest at {self.root / 'manifest.txt'}")
        self.spec = _spec_from_text((self.root / "scene.txt").read_text())
        self.entries = []
        for line in (self.root / "manifest.txt").read_text().splitlines():
            cid, seed, split = line.split()
            self.entries.append((cid, int(seed), split))
        self._cache: dict[str, VideoSample] = {}

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    def ids(self, split: str) -> list[str]:
        return [cid for cid, _, s in self.entries if s == split]

    def clip(self, cid: str) -> VideoSample:
        if cid not in self._cache:
            self._cache[cid] = read_clip(self.root / "clips" / cid)
        return self._cache[cid]

    def clips(self, split: str) -> list[VideoSample]:
        return [self.clip(c) for c in self.ids(split)]
