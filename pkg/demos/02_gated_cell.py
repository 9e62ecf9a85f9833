"""How the gated cell mixes warped history with the current per-frame belief.

A hand-made two-class belief is propagated along a rightward motion.  The
update-gate bias decides whether the cell keeps the warped history or
re-predicts from the current frame.

Run:  python3 demos/02_gated_cell.py
"""
import numpy as np

from grfp.stgru import flow_confidence, init_params, stgru_step, with_gate_bias
from grfp.warp import warp_bilinear

size, c = 8, 2
frame = np.random.default_rng(1).uniform(size=(size, size, 3))
flow = np.zeros((size, size, 2))
flow[..., 0] = -1.0                     # content moved one column right
moved = warp_bilinear(frame, flow).data

history = np.full((size, size, c), 0.5)
history[:, 3, :] = (0.05, 0.95)          # a confident stripe of class 1 in column 3
current = np.full((size, size, c), 0.5)  # the per-frame net has no opinion

base = init_params(c, seed=0, dtype=np.float64)
print("column 4 after one step (class-1 probability), by gate bias:")
for bias in (-6.0, 0.0, 6.0):
    p = with_gate_bias(base, bias)
    h = stgru_step(history, current, frame, moved, flow, p)
    print(f"  bias {bias:+.0f}: {h.data[0, 4, 1]:.3f}")

r_good = flow_confidence(moved, frame, flow, base).data
r_bad = flow_confidence(moved, frame, np.zeros_like(flow), base).data
print(f"flow confidence, correct flow: mean {r_good.mean():.3f}")
print(f"flow confidence, zero flow:    mean {r_bad.mean():.3f}")
print("(confidence is exactly 1 where the warped previous frame matches the current one)")
