"""Independent plain-numpy transcriptions used as test oracles."""
import numpy as np

from grfp.warp import warp_oracle


def conv_loops(x, w, b=None, dilation=1):
    """Nested-loop 'same' cross-correlation."""
    h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    b = np.zeros(cout) if b is None else b
    out = np.zeros((h, wd, cout))
    for i in range(h):
        for j in range(wd):
            for o in range(cout):
                acc = b[o]
                for a in range(kh):
                    for c in range(kw):
                        m = i + (a - kh // 2) * dilation
                        n = j + (c - kw // 2) * dilation
                        if 0 <= m < h and 0 <= n < wd:
                            for q in range(cin):
                                acc += x[m, n, q] * w[a, c, q, o]
                out[i, j, o] = acc
    return out


def softmax(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def confidence_script(I_t, I_prev, f, w_ir, b_r):
    return 1.0 - np.tanh(np.abs(conv_loops(I_t - warp_oracle(I_prev, f), w_ir, b_r)))


def step_script(h_prev, x_t, I_prev, I_t, f, p):
    """The five cell equations written out directly on arrays."""
    a = p.arrays()
    w = warp_oracle(h_prev, f)
    r = confidence_script(I_t, I_prev, f, a["w_ir"], a["b_r"])
    h_cand = conv_loops(x_t, a["w_xh"]) + conv_loops(r * w, a["w_hh"])
    z = 1.0 / (1.0 + np.exp(-(conv_loops(x_t, a["w_xz"], a["b_z"]) + conv_loops(w, a["w_hz"]))))
    lam = np.exp(a["log_lambda"])
    return softmax(lam * (1 - z) * w + z * h_cand)
