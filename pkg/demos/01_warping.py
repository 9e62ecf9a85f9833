"""Backward warping a frame along ground-truth flow, and what its gradients look like.

Run:  python3 demos/01_warping.py
"""
import numpy as np

from grfp import tensor as T
from grfp.flowdata import SceneSpec, generate_clip
from grfp.gradsuite import check_warp_f, check_warp_x
from grfp.warp import warp_bilinear

clip = generate_clip(SceneSpec(frame_noise=0.0, n_distractors=0), seed=4)
print(f"clip: {clip.n_frames} frames of {clip.frames.shape[1:3]}, labels at frame "
      f"{clip.label_frame_index}")

# Pull frame 0 onto frame 1: every pixel of frame 1 reads frame 0 where its flow points.
pred = warp_bilinear(clip.frames[0], clip.flows[0]).data
err = np.abs(pred - clip.frames[1]).max(axis=-1)
visible = clip.occlusions[0] == 0
print(f"largest colour error on visible pixels: {err[visible].max():.4f}")
print(f"pixels flagged as newly uncovered:      {int((~visible).sum())}")
print(f"mean error on those pixels:             {err[~visible].mean():.4f}")

# Gradients reach both the image and the flow field.  The true flows here are
# whole pixels, where the bilinear kernel has a kink and the flow gradient is
# taken as zero, so shift them by a quarter pixel first.
tape = T.Tape()
x = tape.watch(clip.frames[0].astype(np.float64))
f = tape.watch(clip.flows[0].astype(np.float64) + 0.25)
g = T.backward(tape, T.total(warp_bilinear(x, f)))
print(f"d(sum)/d(image) sums to {g.array(x).sum():.1f}, the total interpolation weight landing inside the image")
print(f"d(sum)/d(flow) is non-zero at {int((g.array(f) != 0).any(-1).sum())} pixels")

rng = np.random.default_rng(0)
print(f"finite-difference check, image input: {check_warp_x(rng):.1e}")
print(f"finite-difference check, flow input:  {check_warp_f(rng):.1e}")
