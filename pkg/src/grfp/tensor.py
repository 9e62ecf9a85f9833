"""Dense tensors with a reverse-mode tape.

Values are plain numpy arrays wrapped in :class:`Tensor`.  A :class:`Tape`
records every primitive applied to a watched tensor, together with the
forward values its backward rule needs, so that :func:`backward` can walk
the record in reverse.  Spatial tensors are laid out ``H x W x C`` with an
optional leading batch extent.
"""
from __future__ import annotations

import inspect
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np


class ContractError(ValueError):
    """An operation was called with arguments outside its contract."""


class Tensor:
    """An immutable array value, optionally linked to a tape."""

    __slots__ = ("data", "tape", "id")

    def __init__(self, data, tape: "Tape | None" = None, id: int | None = None):
        self.data = np.asarray(data)
        self.tape = tape
        self.id = id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tape_id(self) -> int | None:
        return self.id

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        where = f", tape_id={self.id}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{where})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[int, ...]
    output: int
    attrs: dict[str, Any]
    saved: Any
    needs: tuple[bool, ...] = ()


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Leaves are registered with :meth:`watch` (differentiable inputs) or
    implicitly as constants when an untaped value meets a taped one.
    """

    entries: list[TapeEntry] = field(default_factory=list)
    values: dict[int, np.ndarray] = field(default_factory=dict)
    leaves: list[int] = field(default_factory=list)
    constants: list[int] = field(default_factory=list)
    requires: set[int] = field(default_factory=set)

    def _new_id(self) -> int:
        return len(self.values)

    def watch(self, x) -> Tensor:
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        i = self._new_id()
        self.values[i] = data
        self.leaves.append(i)
        self.requires.add(i)
        return Tensor(data, self, i)

    def constant(self, x) -> Tensor:
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        i = self._new_id()
        self.values[i] = data
        self.constants.append(i)
        return Tensor(data, self, i)

    def _record(self, op: str, inputs: tuple[int, ...], out: np.ndarray,
                attrs: dict, saved) -> Tensor:
        i = self._new_id()
        self.values[i] = out
        needs = tuple(j in self.requires for j in inputs)
        if any(needs):
            self.requires.add(i)
        self.entries.append(TapeEntry(op, inputs, i, attrs, saved, needs))
        return Tensor(out, self, i)

    def replay(self, leaf_values: Mapping[int, np.ndarray] | None = None) -> dict[int, np.ndarray]:
        """Re-evaluate every entry in recorded order; returns id -> value."""
        values = {i: self.values[i] for i in self.leaves + self.constants}
        for k, v in (leaf_values or {}).items():
            k = k.id if isinstance(k, Tensor) else k
            values[k] = np.asarray(v)
        for e in self.entries:
            fwd = _PRIMITIVES[e.op][0]
            out, _ = fwd(*(values[i] for i in e.inputs), **e.attrs)
            values[e.output] = out
        return values


# primitive registry: name -> (forward(*arrays, **attrs) -> (out, saved),
#                              backward(g, saved, **attrs) -> grads per input)
# a backward taking ``needs`` may skip inputs that need no gradient
_PRIMITIVES: dict[str, tuple[Callable, Callable]] = {}
_TAKES_NEEDS: set[str] = set()


def primitive(name: str):
    def deco(fwd):
        def register_backward(bwd):
            _PRIMITIVES[name] = (fwd, bwd)
            if "needs" in inspect.signature(bwd).parameters:
                _TAKES_NEEDS.add(name)
            return bwd
        fwd.backward = register_backward
        return fwd
    return deco


def apply(op: str, *args, **attrs) -> Tensor:
    """Evaluate primitive ``op``; record it if any argument is taped."""
    tape = None
    for a in args:
        if isinstance(a, Tensor) and a.tape is not None:
            if tape is not None and a.tape is not tape:
                raise ContractError(f"{op}: inputs live on different tapes")
            tape = a.tape
    fwd = _PRIMITIVES[op][0]
    arrays = [a.data if isinstance(a, Tensor) else np.asarray(a) for a in args]
    out, saved = fwd(*arrays, **attrs)
    if tape is None:
        return Tensor(out)
    ids = []
    for a in args:
        if not (isinstance(a, Tensor) and a.tape is tape):
            a = tape.constant(a)
        ids.append(a.id)
    return tape._record(op, tuple(ids), out, attrs, saved)


def as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ---------------------------------------------------------------- elementwise

def _broadcast_pair(op: str, x: np.ndarray, y: np.ndarray) -> None:
    if x.shape == y.shape:
        return
    if (x.ndim == y.ndim and x.ndim >= 1 and x.shape[:-1] == y.shape[:-1]
            and (x.shape[-1] == 1 or y.shape[-1] == 1)):
        return
    raise ContractError(f"{op}: incompatible shapes {x.shape} and {y.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=-1, keepdims=True)


@primitive("add")
def _add(x, y):
    _broadcast_pair("add", x, y)
    return x + y, (x.shape, y.shape)


@_add.backward
def _add_bwd(g, saved):
    sx, sy = saved
    return _unbroadcast(g, sx), _unbroadcast(g, sy)


@primitive("sub")
def _sub(x, y):
    _broadcast_pair("sub", x, y)
    return x - y, (x.shape, y.shape)


@_sub.backward
def _sub_bwd(g, saved):
    sx, sy = saved
    return _unbroadcast(g, sx), _unbroadcast(-g, sy)


@primitive("mul")
def _mul(x, y):
    _broadcast_pair("hadamard", x, y)
    return x * y, (x, y)


@_mul.backward
def _mul_bwd(g, saved):
    x, y = saved
    return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)


@primitive("scale")
def _scale(x, s):
    if s.ndim != 0:
        raise ContractError(f"scale: factor must be 0-rank, got shape {s.shape}")
    return x * s.astype(x.dtype), (x, s)


@_scale.backward
def _scale_bwd(g, saved):
    x, s = saved
    return g * s.astype(x.dtype), np.asarray(np.sum(g * x), dtype=s.dtype)


@primitive("add_scalar")
def _add_scalar(x, *, c):
    return x + x.dtype.type(c), None


@_add_scalar.backward
def _add_scalar_bwd(g, saved, *, c):
    return (g,)


@primitive("neg")
def _neg(x):
    return -x, None


@_neg.backward
def _neg_bwd(g, saved):
    return (-g,)


@primitive("sigmoid")
def _sigmoid(x):
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return y, y


@_sigmoid.backward
def _sigmoid_bwd(g, y):
    return (g * y * (1 - y),)


@primitive("tanh")
def _tanh(x):
    y = np.tanh(x)
    return y, y


@_tanh.backward
def _tanh_bwd(g, y):
    return (g * (1 - y * y),)


@primitive("abs")
def _abs(x):
    return np.abs(x), np.sign(x)


@_abs.backward
def _abs_bwd(g, sign):
    return (g * sign,)


@primitive("exp")
def _exp(x):
    y = np.exp(x)
    return y, y


@_exp.backward
def _exp_bwd(g, y):
    return (g * y,)


@primitive("relu")
def _relu(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


@_relu.backward
def _relu_bwd(g, mask):
    return (np.where(mask, g, 0).astype(g.dtype, copy=False),)


@primitive("softmax_channels")
def _softmax(x):
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ContractError(f"softmax_channels: need a channel axis, got {x.shape}")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return y, y


@_softmax.backward
def _softmax_bwd(g, y):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


@primitive("sum")
def _sum(x):
    return np.asarray(x.sum(), dtype=x.dtype), x.shape


@_sum.backward
def _sum_bwd(g, shape):
    return (np.broadcast_to(g, shape).copy(),)


@primitive("nll_sum")
def _nll_sum(p, labels, *, ignore, floor):
    labels = labels.astype(np.int64)
    c = p.shape[-1]
    valid = labels != ignore
    if np.any(labels[valid] >= c) or np.any(labels[valid] < 0):
        raise ContractError(f"segmentation_loss: label outside 0..{c - 1}")
    idx = np.where(valid, labels, 0)[..., None]
    picked = np.take_along_axis(p, idx, axis=-1)[..., 0]
    clamped = np.maximum(picked, floor)
    loss = -np.sum(np.where(valid, np.log(clamped), 0))
    return np.asarray(loss, dtype=p.dtype), (p.shape, p.dtype, idx, valid, picked, clamped)


@_nll_sum.backward
def _nll_sum_bwd(g, saved, *, ignore, floor):
    shape, dtype, idx, valid, picked, clamped = saved
    gp = np.zeros(shape, dtype=dtype)
    live = valid & (picked > floor)
    vals = np.where(live, -g / clamped, 0).astype(dtype)
    np.put_along_axis(gp, idx, vals[..., None], axis=-1)
    return gp, None


@primitive("index")
def _index(x, *, i):
    return x[i], (x.shape, x.dtype)


@_index.backward
def _index_bwd(g, saved, *, i):
    shape, dtype = saved
    gx = np.zeros(shape, dtype=dtype)
    gx[i] = g
    return (gx,)


# ---------------------------------------------------------------- convolution

def _conv_check(x, w, b, dilation):
    if x.ndim not in (3, 4):
        raise ContractError(f"conv2d: input must be HxWxC or NxHxWxC, got {x.shape}")
    if w.ndim != 4:
        raise ContractError(f"conv2d: kernel must be kh x kw x cin x cout, got {w.shape}")
    if x.shape[-1] != w.shape[2]:
        raise ContractError(f"conv2d: input {x.shape} does not match kernel {w.shape}")
    if w.shape[0] % 2 == 0 or w.shape[1] % 2 == 0:
        raise ContractError(f"conv2d: kernel extents must be odd, got {w.shape}")
    if b is not None and b.shape != (w.shape[3],):
        raise ContractError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    if dilation < 1:
        raise ContractError(f"conv2d: dilation must be >= 1, got {dilation}")


def _conv_core(x4, w, dilation):
    n, h, wd, _ = x4.shape
    kh, kw, _, cout = w.shape
    ph, pw = dilation * (kh // 2), dilation * (kw // 2)
    xp = np.pad(x4, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((n, h, wd, cout), dtype=np.result_type(x4, w))
    for a in range(kh):
        for b in range(kw):
            win = xp[:, a * dilation:a * dilation + h, b * dilation:b * dilation + wd, :]
            out += win @ w[a, b]
    return out, xp


@primitive("conv2d")
def _conv2d(x, w, b, *, dilation=1):
    bias = None if b.ndim == 0 else b
    _conv_check(x, w, bias, dilation)
    x4 = x[None] if x.ndim == 3 else x
    out, xp = _conv_core(x4, w, dilation)
    if bias is not None:
        out += bias
    if x.ndim == 3:
        out = out[0]
    return out, (xp, w, x.shape, bias is not None)


@_conv2d.backward
def _conv2d_bwd(g, saved, *, dilation=1, needs=(True, True, True)):
    xp, w, xshape, has_bias = saved
    g4 = g[None] if g.ndim == 3 else g
    n, h, wd, cout = g4.shape
    kh, kw, cin, _ = w.shape
    gflat = g4.reshape(-1, cout)
    gw = np.empty_like(w)
    gxp = np.zeros_like(xp)
    for a in range(kh):
        for b in range(kw):
            sl = (slice(None), slice(a * dilation, a * dilation + h),
                  slice(b * dilation, b * dilation + wd), slice(None))
            if needs[1]:
                gw[a, b] = xp[sl].reshape(-1, cin).T @ gflat
            if needs[0]:
                gxp[sl] += g4 @ w[a, b].T
    ph, pw = dilation * (kh // 2), dilation * (kw // 2)
    gx = gxp[:, ph:ph + h, pw:pw + wd, :]
    if len(xshape) == 3:
        gx = gx[0]
    gb = gflat.sum(axis=0) if has_bias and needs[2] else None
    return gx, gw, gb


# ---------------------------------------------------------------- public ops

def conv2d(x, weights, bias=None, dilation: int = 1) -> Tensor:
    """'Same'-size cross-correlation with zero padding and optional bias."""
    b = np.zeros((), dtype=as_array(weights).dtype) if bias is None else bias
    return apply("conv2d", x, weights, b, dilation=int(dilation))


def add(x, y) -> Tensor:
    return apply("add", x, y)


def sub(x, y) -> Tensor:
    return apply("sub", x, y)


def mul(x, y) -> Tensor:
    """Hadamard product (a 1-channel operand is replicated across channels)."""
    return apply("mul", x, y)


hadamard = mul


def scale(x, s) -> Tensor:
    """Multiply by a scalar; a 0-rank Tensor factor receives a gradient."""
    if not isinstance(s, Tensor):
        s = np.asarray(s, dtype=as_array(x).dtype)
    return apply("scale", x, s)


def add_scalar(x, c: float) -> Tensor:
    return apply("add_scalar", x, c=float(c))


def one_minus(x) -> Tensor:
    return add_scalar(neg(x), 1.0)


def neg(x) -> Tensor:
    return apply("neg", x)


def sigmoid(x) -> Tensor:
    return apply("sigmoid", x)


def tanh(x) -> Tensor:
    return apply("tanh", x)


def absolute(x) -> Tensor:
    return apply("abs", x)


def exp(x) -> Tensor:
    return apply("exp", x)


def relu(x) -> Tensor:
    return apply("relu", x)


def softmax_channels(x) -> Tensor:
    return apply("softmax_channels", x)


def index(x, i: int) -> Tensor:
    """Select element ``i`` along the leading (batch) axis."""
    return apply("index", x, i=int(i))


def total(x) -> Tensor:
    """Sum of all elements as a 0-rank tensor."""
    return apply("sum", x)


_POINTWISE = {"sigmoid": sigmoid, "tanh": tanh, "abs": absolute, "neg": neg}


def pointwise(x, fn: str, factor: float | None = None) -> Tensor:
    """Elementwise ``sigmoid``, ``tanh``, ``abs``, ``neg`` or ``scale``."""
    if fn == "scale":
        return scale(x, 1.0 if factor is None else factor)
    try:
        return _POINTWISE[fn](x)
    except KeyError:
        raise ContractError(f"pointwise: unknown function {fn!r}") from None


# ---------------------------------------------------------------- backward

class Gradients(Mapping):
    """Gradient map keyed by tensor handle (a taped Tensor or its id)."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._g = grads

    def __getitem__(self, key) -> Tensor:
        k = key.id if isinstance(key, Tensor) else key
        return Tensor(self._g[k])

    def array(self, key) -> np.ndarray:
        k = key.id if isinstance(key, Tensor) else key
        return self._g[k]

    def __iter__(self) -> Iterator[int]:
        return iter(self._g)

    def __len__(self) -> int:
        return len(self._g)


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse sweep from a scalar loss; every watched leaf gets a gradient."""
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.tape is None:
        # the loss never touched a watched value: every gradient is zero
        return Gradients({i: np.zeros_like(tape.values[i]) for i in tape.leaves})
    if loss.tape is not tape:
        raise ContractError("backward: loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for e in reversed(tape.entries):
        g = grads.pop(e.output, None) if e.output != loss.id else grads.get(e.output)
        if g is None:
            continue
        if not any(e.needs):
            continue
        bwd = _PRIMITIVES[e.op][1]
        kw = dict(e.attrs, needs=e.needs) if e.op in _TAKES_NEEDS else e.attrs
        for i, gi, need in zip(e.inputs, bwd(g, e.saved, **kw), e.needs):
            if gi is None or not need:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    out = {}
    for i in tape.leaves:
        g = grads.get(i)
        out[i] = np.zeros_like(tape.values[i]) if g is None else g.reshape(tape.values[i].shape)
    return Gradients(out)


def value_and_grad(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray]):
    """Evaluate ``fn`` on watched copies of ``inputs``; return (loss, grads)."""
    tape = Tape()
    xs = [tape.watch(np.asarray(a)) for a in inputs]
    loss = fn(*xs)
    g = backward(tape, loss)
    return loss.item(), [g.array(x) for x in xs]


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    The error for each coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``max_coords`` optionally limits each input to a random subset of coordinates.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    _, analytic = value_and_grad(fn, inputs)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, a in enumerate(inputs):
        coords = np.arange(a.size)
        if max_coords is not None and a.size > max_coords:
            coords = np.sort(rng.choice(a.size, max_coords, replace=False))
        flat = a.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = fn(*[Tensor(v) for v in inputs]).item()
            flat[c] = orig - eps
            fm = fn(*[Tensor(v) for v in inputs]).item()
            flat[c] = orig
            numeric = (fp - fm) / (2 * eps)
            err = abs(analytic[k].reshape(-1)[c] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
