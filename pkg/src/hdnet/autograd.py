"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation records a backward closure on the output tensor; ``backward``
replays the closures in reverse construction order, which is a valid reverse
topological order because inputs are always created before their outputs.
All arithmetic is 64-bit so finite-difference checks at 1e-4 tolerances are
meaningful.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Shapes of the operands do not satisfy the operation's contract."""


class ContractError(ValueError):
    """A non-shape precondition of an operation was violated."""


_seq = itertools.count()
_grad_enabled = True
_debug_checks = False


def debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf assertions after every forward op (off by default)."""
    global _debug_checks
    _debug_checks = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array with an optional gradient slot.

    ``data`` is always C-contiguous float64. ``grad`` is ``None`` until a
    backward pass accumulates into it; repeated backward passes keep
    accumulating until ``zero_grad`` clears the slot.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.data.shape)}{flag})"

    # arithmetic sugar; constants are lifted to untracked tensors
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _result(data: np.ndarray, parents, backward) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise and reduction ops

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _result(a.data / b.data, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    a = _lift(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * out_data)

    return _result(out_data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    a = _lift(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * 0.5 / out_data)

    return _result(out_data, (a,), backward)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out_data = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if not a.requires_grad:
            return
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accumulate(a, np.broadcast_to(gg, a.data.shape))

    return _result(out_data, (a,), backward)


def activation_elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    """Exponential linear unit: x for x > 0, alpha*(exp(x)-1) otherwise."""
    if alpha <= 0:
        raise ContractError(f"elu alpha must be positive, got {alpha}")
    a = _lift(a)
    x = a.data
    neg = alpha * np.expm1(np.minimum(x, 0.0))
    out_data = np.where(x > 0, x, neg)

    def backward(g):
        if a.requires_grad:
            # derivative on the exp branch is alpha*exp(x) == neg + alpha
            _accumulate(a, g * np.where(x > 0, 1.0, neg + alpha))

    return _result(out_data, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``; output rows are positive and sum to 1."""
    a = _lift(a)
    if a.data.size == 0:
        raise DimensionError("softmax of an empty tensor")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            _accumulate(a, out_data * (g - dot))

    return _result(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# shape and indexing ops

def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.data.shape))

    return _result(out_data, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.T)

    return _result(a.data.T, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects matrices, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner axes disagree: {a.shape[1]} (a axis 1) vs {b.shape[0]} (b axis 0)")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW tensors along the channel axis."""
    a, b = _lift(a), _lift(b)
    if a.ndim != 4 or b.ndim != 4:
        raise DimensionError(f"concat_channels expects NCHW tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(
            f"concat_channels batch/spatial axes disagree: {a.shape} vs {b.shape}")
    ca = a.shape[1]

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g[:, :ca])
        if b.requires_grad:
            _accumulate(b, g[:, ca:])

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), backward)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    a = _lift(a)
    if a.ndim != 4:
        raise DimensionError(f"slice_channels expects an NCHW tensor, got {a.shape}")

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            _accumulate(a, full)

    return _result(a.data[:, start:stop], (a,), backward)


def gather_columns(m: Tensor, idx: np.ndarray) -> Tensor:
    """Select columns of a [C, N] matrix; ``idx`` may be any integer shape.

    Output shape is [C, *idx.shape]. Backward scatter-adds, so duplicate
    indices accumulate correctly.
    """
    m = _lift(m)
    if m.ndim != 2:
        raise DimensionError(f"gather_columns expects a matrix, got {m.shape}")
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= m.shape[1]):
        raise ContractError("gather_columns index out of range")

    def backward(g):
        if m.requires_grad:
            gm = np.zeros_like(m.data)
            np.add.at(gm, (slice(None), idx), g)
            _accumulate(m, gm)

    return _result(m.data[:, idx], (m,), backward)


def scatter_columns(v: Tensor, idx: np.ndarray, n_cols: int) -> Tensor:
    """Place the columns of ``v`` [C, n] at positions ``idx`` in a [C, n_cols] zero matrix."""
    v = _lift(v)
    idx = np.asarray(idx)
    if v.ndim != 2 or idx.ndim != 1 or idx.shape[0] != v.shape[1]:
        raise DimensionError(
            f"scatter_columns expects [C, n] values and n indices, got {v.shape} and {idx.shape}")
    out_data = np.zeros((v.shape[0], n_cols), dtype=np.float64)
    out_data[:, idx] = v.data

    def backward(g):
        if v.requires_grad:
            _accumulate(v, g[:, idx])

    return _result(out_data, (v,), backward)


def overwrite_columns(base: Tensor, values: Tensor, idx: np.ndarray) -> Tensor:
    """Copy of ``base`` [C, N] with columns at ``idx`` replaced by ``values`` [C, n].

    Unreplaced columns keep their exact bits. ``idx`` entries must be unique.
    """
    base, values = _lift(base), _lift(values)
    idx = np.asarray(idx)
    if base.ndim != 2 or values.ndim != 2 or idx.ndim != 1:
        raise DimensionError(
            f"overwrite_columns expects matrices and flat indices, got "
            f"{base.shape}, {values.shape}, {idx.shape}")
    if base.shape[0] != values.shape[0] or values.shape[1] != idx.shape[0]:
        raise DimensionError(
            f"overwrite_columns row/column counts disagree: base {base.shape}, "
            f"values {values.shape}, {idx.shape[0]} indices")
    if idx.size and (idx.min() < 0 or idx.max() >= base.shape[1]):
        raise ContractError("overwrite_columns index out of range")
    if np.unique(idx).size != idx.size:
        raise ContractError("overwrite_columns indices must be unique")
    out_data = base.data.copy()
    out_data[:, idx] = values.data

    def backward(g):
        if values.requires_grad:
            _accumulate(values, g[:, idx])
        if base.requires_grad:
            gb = g.copy()
            gb[:, idx] = 0.0
            _accumulate(base, gb)

    return _result(out_data, (base, values), backward)


def take_per_row(s: Tensor, idx: np.ndarray) -> Tensor:
    """Gather ``idx.shape[1]`` entries from each row of a matrix: out[i, k] = s[i, idx[i, k]]."""
    s = _lift(s)
    idx = np.asarray(idx)
    if s.ndim != 2 or idx.ndim != 2 or idx.shape[0] != s.shape[0]:
        raise DimensionError(
            f"take_per_row expects [R, N] matrix and [R, K] indices, got {s.shape} and {idx.shape}")
    rows = np.arange(s.shape[0])[:, None]

    def backward(g):
        if s.requires_grad:
            gs = np.zeros_like(s.data)
            np.add.at(gs, (rows, idx), g)
            _accumulate(s, gs)

    return _result(s.data[rows, idx], (s,), backward)


# ---------------------------------------------------------------------------
# spatial ops

def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with an [Cout, Cin, kh, kw] kernel.

    Output spatial size is (H + 2*padding - kh) // stride + 1 per axis.
    Backward produces gradients for the input, the weight and the bias.
    """
    x, w, b = _lift(x), _lift(w), _lift(b)
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be NCHW, got shape {x.shape}")
    if w.ndim != 4:
        raise DimensionError(f"conv2d weight must be [Cout, Cin, kh, kw], got shape {w.shape}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    n, cin, h, wdt = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin_w != cin:
        raise DimensionError(
            f"conv2d channel axes disagree: input axis 1 is {cin}, weight axis 1 is {cin_w}")
    if b.shape != (cout,):
        raise DimensionError(f"conv2d bias must have shape ({cout},), got {b.shape}")
    hp, wp = h + 2 * padding, wdt + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} exceeds padded extent {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = np.empty((n, cin, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    out = np.tensordot(cols, w.data, axes=([1, 2, 3], [1, 2, 3]))  # [N, Ho, Wo, Cout]
    out = out.transpose(0, 3, 1, 2) + b.data[None, :, None, None]

    def backward(g):
        if b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            _accumulate(w, np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5])))
        if x.requires_grad:
            gc = np.tensordot(g, w.data, axes=(1, 0))  # [N, Ho, Wo, Cin, kh, kw]
            gc = gc.transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros((n, cin, hp, wp), dtype=np.float64)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gc[:, :, i, j]
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + wdt]
            _accumulate(x, gxp)

    return _result(out, (x, w, b), backward)


def resample(x: Tensor, mode: str) -> Tensor:
    """Change spatial resolution: ``down2`` is 2x2 average pooling, ``up2`` nearest x2."""
    x = _lift(x)
    if x.ndim != 4:
        raise DimensionError(f"resample expects an NCHW tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    if mode == "down2":
        if h % 2 or w % 2:
            raise DimensionError(f"down2 needs even spatial size, got {h}x{w}")
        out_data = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

        def backward(g):
            if x.requires_grad:
                _accumulate(x, np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25)

        return _result(out_data, (x,), backward)
    if mode == "up2":
        out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

        def backward(g):
            if x.requires_grad:
                _accumulate(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

        return _result(out_data, (x,), backward)
    raise ContractError(f"resample mode must be 'down2' or 'up2', got {mode!r}")


# ---------------------------------------------------------------------------
# backward pass and gradient verification

def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every tensor feeding ``root``.

    ``root`` must be scalar. Does not zero anything: repeated calls add up.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    nodes = []
    seen = set()
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)
    _accumulate(root, np.ones_like(root.data))
    for t in nodes:
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference check."""
    max_rel_error: float
    n_checked: int
    n_skipped: int


def grad_check(f, x: Tensor, eps: float = 1e-5, kink_tol: float | None = None,
               max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare the autograd gradient of ``f`` w.r.t. ``x`` against central differences.

    ``f`` must be a pure function of the current contents of ``x`` returning a
    scalar tensor. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
    denominator. Coordinates within ``kink_tol`` of zero are skipped (central
    differences degrade across an activation kink). ``max_coords`` limits the
    check to a seeded random coordinate subset, for large tensors.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractError(f"grad_check eps must be in [1e-7, 1e-3], got {eps}")
    prev_flag = x.requires_grad
    x.requires_grad = True
    prev_grad = x.grad
    x.grad = None
    try:
        out = f(x)
        if out.data.size != 1:
            raise ContractError(f"grad_check function must be scalar-valued, got shape {out.shape}")
        backward(out)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    finally:
        x.requires_grad = prev_flag
        x.grad = prev_grad

    flat = x.data.reshape(-1)
    analytic_flat = analytic.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        rng = np.random.default_rng(seed)
        coords = rng.choice(flat.size, size=max_coords, replace=False)
    max_rel = 0.0
    checked = 0
    skipped = 0
    for i in coords:
        orig = flat[i]
        if kink_tol is not None and abs(orig) < kink_tol:
            skipped += 1
            continue
        with no_grad():
            flat[i] = orig + eps
            f_plus = float(f(x).data)
            flat[i] = orig - eps
            f_minus = float(f(x).data)
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic_flat[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel > max_rel:
            max_rel = rel
        checked += 1
    return GradCheckReport(max_rel_error=max_rel, n_checked=checked, n_skipped=skipped)
