"""``grfp`` command line: generate data, train, evaluate and verify gradients.

Every subcommand is deterministic given ``--seed`` and writes plain files:
GRFPTNSR checkpoints, tab-separated logs and tables, and PPM overlays.
``GRFP_THREADS`` caps the worker pool used for clip generation and
evaluation.
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .backbone import BackboneParams, init_backbone, predict_unaries
from .evaluation import (build_trajectories, format_table, miou, overlay,
                         temporal_consistency)
from .flowdata import Dataset, SceneSpec, make_dataset, noisy_copy, worker_count
from .gradsuite import run_suite
from .model import GRFPModel, predict_belief, predict_sequence
from .optim import TrainConfig, pretrain_backbone, train_grfp
from .stgru import StgruParams, init_params
from .tensorio import atomic_write, write_ppm

log = logging.getLogger("grfp")

BACKBONE_DIR = "backbone"
FORWARD_DIR = "stgru"
BACKWARD_DIR = "stgru_backward"
PRETRAINED_DIR = "pretrained"     # checkpoint holding only the pretrained backbone


class CliError(Exception):
    """A user-facing failure; printed without a traceback, exit code 1."""


def _write(path: Path, text: str) -> None:
    atomic_write(path, text.encode())


def _existing_dir(path: str | None, what: str) -> Path:
    if path is None:
        raise CliError(f"{what} is required")
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"{what} {p} does not exist")
    return p


def _open_dataset(path: str | None) -> Dataset:
    root = _existing_dir(path, "--dataset")
    try:
        return Dataset(root)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from exc


# ---------------------------------------------------------------- generate

def cmd_generate(args) -> int:
    if args.out is None:
        raise CliError("--out is required")
    out = Path(args.out)
    if not out.parent.exists():
        raise CliError(f"parent directory {out.parent} of --out does not exist")
    spec = SceneSpec(n_frames=args.frames)
    try:
        make_dataset(out, args.train, args.val, args.test, template=spec,
                     master_seed=args.seed, overwrite=args.overwrite)
    except FileExistsError as exc:
        raise CliError(str(exc)) from exc
    print(f"dataset: {out}")
    print(f"clips: train={args.train} val={args.val} test={args.test} master_seed={args.seed}")
    print(f"scene: {spec.height}x{spec.width}, {spec.n_classes} classes, "
          f"{spec.n_frames} frames labelled at frame {spec.label_index}, "
          f"{spec.extend_after} extra frames after the label")
    print(f"objects per clip: {spec.n_objects[0]}-{spec.n_objects[1]}, "
          f"max speed {spec.max_speed} px/frame, camera speed {spec.camera_speed} px/frame")
    print(f"distractors per frame: {spec.n_distractors}, pixel noise sigma {spec.frame_noise}")
    return 0


# ---------------------------------------------------------------- train

def _train_config(args) -> TrainConfig:
    from .tensor import ContractError

    try:
        return TrainConfig(
            n_frames=args.frames, backbone_truncation_depth=args.truncation,
            train_backward=args.backward, refine_backbone=not args.no_refine_backbone,
            seed=args.seed, steps=args.steps, stgru_lr=args.stgru_lr,
            backbone_lr=args.backbone_lr, flow_noise=args.flow_noise,
            val_every=args.val_every, pretrain_epochs=args.pretrain_epochs)
    except ContractError as exc:
        raise CliError(str(exc)) from exc


def cmd_train(args) -> int:
    ds = _open_dataset(args.dataset)
    if args.out is None:
        raise CliError("--out is required")
    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.txt", cfg.to_text())

    if args.checkpoint is not None:
        ck = _existing_dir(args.checkpoint, "--checkpoint")
        backbone = BackboneParams.load(ck / BACKBONE_DIR)
        if backbone.n_classes != ds.n_classes:
            raise CliError(f"checkpoint has {backbone.n_classes} classes, "
                           f"dataset has {ds.n_classes}")
        print(f"backbone: loaded from {ck / BACKBONE_DIR}")
    else:
        backbone, losses = pretrain_backbone(
            ds, cfg.pretrain_epochs, seed=cfg.seed, lr=cfg.pretrain_lr,
            init=init_backbone(ds.n_classes, seed=cfg.seed),
            log_path=out / "pretrain_log.tsv")
        backbone.save(out / PRETRAINED_DIR / BACKBONE_DIR)
        if losses:
            print(f"backbone: pretrained {cfg.pretrain_epochs} epochs, "
                  f"final loss {losses[-1]:.4f}")

    stgru = init_params(ds.n_classes, seed=cfg.seed)
    model, lines = train_grfp(ds, cfg, backbone, stgru, log_path=out / "train_log.tsv")
    model.backbone.save(out / BACKBONE_DIR)
    model.forward.save(out / FORWARD_DIR)
    if model.backward is not None:
        model.backward.save(out / BACKWARD_DIR)
    if lines:
        print(f"grfp: {cfg.steps} steps, last log line: {lines[-1]}")
    print(f"checkpoint: {out}")
    return 0


# ---------------------------------------------------------------- eval

def _load_model(ck: Path, n_classes: int, seed: int) -> tuple[GRFPModel, bool]:
    try:
        backbone = BackboneParams.load(ck / BACKBONE_DIR)
    except (FileNotFoundError, ValueError) as exc:
        raise CliError(f"no backbone checkpoint under {ck}: {exc}") from exc
    trained = (ck / FORWARD_DIR).is_dir()
    forward = StgruParams.load(ck / FORWARD_DIR) if trained else init_params(n_classes, seed=seed)
    backward = StgruParams.load(ck / BACKWARD_DIR) if (ck / BACKWARD_DIR).is_dir() else None
    for name, c in (("backbone", backbone.n_classes), ("stgru", forward.n_classes)):
        if c != n_classes:
            raise CliError(f"{name} checkpoint has {c} classes, dataset has {n_classes}")
    return GRFPModel(backbone, forward, backward), trained


def _clip_report(model: GRFPModel, clip, n_frames: int, flow_noise: float, seed: int,
                 bidirectional: bool, stride: int) -> dict:
    u = predict_unaries(clip.frames, model.backbone)
    noisy = noisy_copy(clip, flow_noise, seed)
    out = {"static": u[clip.label_frame_index].argmax(axis=-1),
           "ablation": [predict_belief(model, noisy, n, unaries=u).argmax(axis=-1)
                        for n in range(1, n_frames + 1)]}
    if bidirectional:
        out["fwbw"] = predict_belief(model, noisy, n_frames, bidirectional=True,
                                     unaries=u).argmax(axis=-1)
    trajs = build_trajectories(clip.flows, clip.occlusions, stride=stride)
    out["cons_static"] = temporal_consistency(u.argmax(axis=-1), trajs)
    out["cons_grfp"] = temporal_consistency(predict_sequence(model, noisy, n_frames, u), trajs)
    return out


def cmd_eval(args) -> int:
    ds = _open_dataset(args.dataset)
    ck = _existing_dir(args.checkpoint, "--checkpoint")
    if args.out is None:
        raise CliError("--out is required")
    model, trained = _load_model(ck, ds.n_classes, args.seed)
    n = args.frames
    last = ds.spec.label_index
    if n > last + 1:
        raise CliError(f"--frames {n} exceeds the {last + 1} frames up to the label")
    if args.backward and last + n > ds.spec.total_frames:
        raise CliError(f"--backward needs {n - 1} frames after the label; clips have "
                       f"{ds.spec.total_frames - last - 1}")
    ids = ds.ids(args.split)
    clips = ds.clips(args.split)
    c = ds.n_classes

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        reports = list(pool.map(
            lambda cl: _clip_report(model, cl, n, args.flow_noise, args.seed, args.backward,
                                    args.stride), clips))
    labels = [cl.labels for cl in clips]

    ablation = [(k, miou([r["ablation"][k - 1] for r in reports], labels, c).mean)
                for k in range(1, n + 1)]
    static = miou([r["static"] for r in reports], labels, c)
    grfp = miou([r["ablation"][-1] for r in reports], labels, c)
    header = ["class", "static", f"GRFP({n})"]
    columns = [static.per_class, grfp.per_class]
    means = [static.mean, grfp.mean]
    if args.backward:
        fwbw = miou([r["fwbw"] for r in reports], labels, c)
        header.append(f"GRFP({n}) fwbw")
        columns.append(fwbw.per_class)
        means.append(fwbw.mean)
    per_class = [[k, *(float(col[k]) for col in columns)] for k in range(c)]
    per_class.append(["Average", *means])
    cons = [[cid, r["cons_static"], r["cons_grfp"]] for cid, r in zip(ids, reports)]
    cons.append(["Average", float(np.mean([r["cons_static"] for r in reports])),
                 float(np.mean([r["cons_grfp"] for r in reports]))])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tables = {
        "frames_ablation.tsv": format_table(["frames", "mIoU"], ablation),
        "per_class_iou.tsv": format_table(header, per_class),
        "consistency.tsv": format_table(["clip", "static", f"GRFP({n})"], cons),
    }
    for name, text in tables.items():
        _write(out / name, text)
    ov = out / "overlays"
    ov.mkdir(exist_ok=True)
    for cid, cl, r in zip(ids, clips, reports):
        frame = cl.frames[cl.label_frame_index]
        write_ppm(ov / f"{cid}_static.ppm", overlay(frame, r["static"]))
        write_ppm(ov / f"{cid}_grfp.ppm", overlay(frame, r["ablation"][-1]))
        write_ppm(ov / f"{cid}_truth.ppm", overlay(frame, cl.labels))

    state = "trained" if trained else "untrained"
    print(f"split {args.split}: {len(clips)} clips, {state} STGRU, flow noise {args.flow_noise}")
    for name, text in tables.items():
        print(f"== {name}")
        print(text, end="")
    return 0


# ---------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    results = run_suite(args.seed)
    rows = [[r.name, f"{r.max_rel_error:.3e}", "pass" if r.max_rel_error <= args.threshold else "FAIL"]
            for r in results]
    text = format_table(["check", "max_rel_error", "status"], rows)
    print(text, end="")
    if args.out is not None:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        _write(Path(args.out), text)
    failed = [r.name for r in results if not r.max_rel_error <= args.threshold]
    if failed:
        print(f"{len(failed)} check(s) above threshold {args.threshold:g}: {', '.join(failed)}",
              file=sys.stderr)
        return 1
    print(f"all {len(results)} checks within {args.threshold:g}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    defaults = TrainConfig()
    parser = argparse.ArgumentParser(
        prog="grfp", description="Gated recurrent flow propagation for video segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, frames_default=defaults.n_frames):
        p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
        p.add_argument("--out", help="output directory (or file for gradcheck)")
        p.add_argument("--frames", type=int, default=frames_default,
                       help=f"frames per chain (default: {frames_default})")

    g = sub.add_parser("generate", help="write a synthetic dataset")
    common(g)
    g.add_argument("--train", type=int, default=20, help="training clips (default: 20)")
    g.add_argument("--val", type=int, default=5, help="validation clips (default: 5)")
    g.add_argument("--test", type=int, default=5, help="test clips (default: 5)")
    g.add_argument("--overwrite", action="store_true", help="replace a non-empty --out")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="pretrain the backbone and train the recurrent unit")
    common(t)
    t.add_argument("--dataset", help="dataset directory from 'generate'")
    t.add_argument("--checkpoint", help="start from this checkpoint's backbone, skip pretraining")
    t.add_argument("--truncation", type=int, default=defaults.backbone_truncation_depth,
                   help="recurrent steps nearest the loss that reach the backbone "
                        f"(default: {defaults.backbone_truncation_depth})")
    t.add_argument("--backward", action="store_true", help="also train a backward chain")
    t.add_argument("--flow-noise", type=float, default=defaults.flow_noise,
                   help=f"Gaussian flow noise sigma in px (default: {defaults.flow_noise})")
    t.add_argument("--no-refine-backbone", action="store_true",
                   help="keep the backbone fixed while training the recurrent unit")
    t.add_argument("--steps", type=int, default=defaults.steps,
                   help=f"recurrent training steps (default: {defaults.steps})")
    t.add_argument("--stgru-lr", type=float, default=defaults.stgru_lr,
                   help=f"Adam learning rate (default: {defaults.stgru_lr:g})")
    t.add_argument("--backbone-lr", type=float, default=defaults.backbone_lr,
                   help=f"backbone SGD learning rate (default: {defaults.backbone_lr:g})")
    t.add_argument("--val-every", type=int, default=defaults.val_every,
                   help=f"validation interval in steps, 0 disables (default: {defaults.val_every})")
    t.add_argument("--pretrain-epochs", type=int, default=defaults.pretrain_epochs,
                   help=f"backbone pretraining epochs (default: {defaults.pretrain_epochs})")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="mIoU, frames ablation and temporal consistency tables")
    common(e)
    e.add_argument("--dataset", help="dataset directory from 'generate'")
    e.add_argument("--checkpoint", help="directory written by 'train'")
    e.add_argument("--backward", action="store_true", help="add forward+backward fusion")
    e.add_argument("--flow-noise", type=float, default=0.0,
                   help="Gaussian flow noise sigma in px at inference (default: 0)")
    e.add_argument("--split", choices=("train", "val", "test"), default="val",
                   help="split to evaluate (default: val)")
    e.add_argument("--stride", type=int, default=4, help="trajectory grid stride (default: 4)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    c.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    c.add_argument("--out", help="also write the report to this file")
    c.add_argument("--threshold", type=float, default=1e-4,
                   help="largest accepted relative error (default: 1e-4)")
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"grfp {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
