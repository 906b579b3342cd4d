"""Dense tensors with a dynamic tape and reverse-mode differentiation.

Every forward op records a node holding its parents and an adjoint closure.
``backward`` orders the graph topologically once and replays it in reverse,
visiting each node exactly once.

Storage is float32 unless the engine is switched to float64 with
``set_precision(64)`` or the ``precision(64)`` context manager; all gradient
checks run in 64-bit mode.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_state = threading.local()


def _dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def set_precision(bits: int) -> None:
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _state.dtype = np.dtype(np.float32 if bits == 32 else np.float64)


def get_precision() -> int:
    return 64 if _dtype() == np.float64 else 32


@contextlib.contextmanager
def precision(bits: int):
    old = _dtype()
    set_precision(bits)
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    old = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    """N-d array of the engine dtype, optionally tracked for differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _node: _Node | None = None):
        arr = np.asarray(data)
        if arr.dtype != _dtype():
            arr = arr.astype(_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node = _node

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a forward result, recording a tape node when any parent is tracked."""
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _node=_Node(op, tuple(parents), backward))
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Topologically ordered record of the primitives that produced a tensor."""

    records: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in t._node.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.records)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor that requires grad")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.records):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parent_grads = t._node.backward(g)
        for p, pg in zip(t._node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        gb = -g * out / b.data
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, "div", (a, b), bw)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(x.data * s, "scale", (x,), lambda g: (g * s,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)
    return _make(x.data**p, "pow", (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, "sqrt", (x,), lambda g: (g * 0.5 / out,))


def abs_(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), "abs", (x,), lambda g: (g * np.sign(x.data),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so neither branch overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the adjoint to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _make(np.maximum(a.data, b.data), "maximum", (a, b), bw)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.asarray(out), "sum", (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = math.prod(x.shape[a] for a in axes)
    return scale(sum_(x, axes, keepdims), 1.0 / n)


def amax(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the adjoint goes to the first maximal element."""
    axes = _norm_axes(axis, x.ndim)
    out = x.data.max(axis=axes, keepdims=True)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        hit = x.data == out
        # keep only the first hit along the flattened reduced axes
        moved = np.moveaxis(hit, axes, tuple(range(-len(axes), 0)))
        flat = moved.reshape(moved.shape[: moved.ndim - len(axes)] + (-1,))
        first = np.zeros_like(flat)
        np.put_along_axis(first, flat.argmax(axis=-1)[..., None], True, axis=-1)
        first = np.moveaxis(first.reshape(moved.shape), tuple(range(-len(axes), 0)), axes)
        return (g * first,)

    res = out if keepdims else np.squeeze(out, axis=axes)
    return _make(np.asarray(res), "amax", (x,), bw)


# ---------------------------------------------------------------------------
# Shape and indexing
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    """Basic slicing (ints, slices with steps, Ellipsis, None)."""

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _make(np.array(x.data[index]), "slice", (x,), bw)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather ``x`` along ``axis`` with an integer index array of any shape."""
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return _make(np.take(x.data, idx, axis=axis), "take", (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, bw)


PAD_MODES = ("zero", "circular", "replicate")


def _pad_index(n: int, before: int, after: int, mode: str) -> np.ndarray:
    i = np.arange(-before, n + after)
    if mode == "circular":
        if before > n or after > n:
            raise ValueError(f"circular pad {before}/{after} exceeds extent {n}")
        return i % n
    if mode == "replicate":
        return np.clip(i, 0, n - 1)
    return np.where((i >= 0) & (i < n), i, -1)


def pad(x: Tensor, widths: Sequence[tuple[int, int]], modes: Sequence[str] | str = "zero") -> Tensor:
    """Pad every axis by ``(before, after)`` with a per-axis mode.

    Modes: ``zero``, ``circular`` (wrap) and ``replicate`` (edge copy).
    """
    widths = [tuple(w) for w in widths]
    if len(widths) != x.ndim:
        raise ValueError(f"pad widths {widths} do not match rank {x.ndim}")
    if isinstance(modes, str):
        modes = [modes] * x.ndim
    for m in modes:
        if m not in PAD_MODES:
            raise ValueError(f"unknown pad mode {m!r}")
    data = x.data
    index_maps = []
    for ax, ((b, a), m) in enumerate(zip(widths, modes)):
        if b == 0 and a == 0:
            index_maps.append(None)
            continue
        idx = _pad_index(x.shape[ax], b, a, m)
        index_maps.append(idx)
        data = np.take(data, np.maximum(idx, 0), axis=ax)
        if m == "zero":
            shape = [1] * data.ndim
            shape[ax] = -1
            data = data * (idx >= 0).reshape(shape).astype(data.dtype)

    def bw(g):
        for ax in reversed(range(x.ndim)):
            idx = index_maps[ax]
            if idx is None:
                continue
            n = x.shape[ax]
            b = widths[ax][0]
            gm = np.moveaxis(g, ax, 0)
            out = gm[b : b + n].copy()
            edges = np.concatenate([np.arange(b), np.arange(b + n, len(idx))])
            src = idx[edges]
            keep = src >= 0
            if keep.any():
                np.add.at(out, src[keep], gm[edges[keep]])
            g = np.moveaxis(out, 0, ax)
        return (g,)

    return _make(np.ascontiguousarray(data), "pad", (x,), bw)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of the trailing two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, "matmul", (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (x,), bw)


def conv2d_valid(x: Tensor, w: Tensor, stride: int = 1, groups: int = 1) -> Tensor:
    """Unpadded 2-d cross-correlation of ``x[B,Cin,H,W]`` with ``w[Cout,Cin/groups,k,k]``.

    Only ``groups == 1`` and depthwise (``groups == Cin == Cout``) are supported.
    """
    x, w = as_tensor(x), as_tensor(w)
    B, C, H, W = x.shape
    Co, Cg, kh, kw = w.shape
    if C != Cg * groups:
        raise ValueError(f"conv channel mismatch: input {x.shape}, weight {w.shape}, groups={groups}")
    if groups != 1 and not (groups == C == Co and Cg == 1):
        raise ValueError("only dense or depthwise convolution is supported")
    if H < kh or W < kw:
        raise ValueError(f"input {x.shape} smaller than kernel {w.shape}")
    s = int(stride)
    Ho = (H - kh) // s + 1
    Wo = (W - kw) // s + 1
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]  # B,C,Ho,Wo,kh,kw
    if groups == 1:
        # one contiguous im2col matrix, reused by the weight adjoint
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
        wmat = w.data.reshape(Co, C * kh * kw)
        out = (cols @ wmat.T).reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)
    else:
        out = np.einsum("bchwij,cij->bchw", win, w.data[:, 0], optimize=True)
    out = np.ascontiguousarray(out)

    def bw(g):
        if groups == 1:
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, Co)
            gw = (g2.T @ cols).reshape(w.shape)
            # tap-major layout so each scatter-add reads a contiguous block
            dcols = np.ascontiguousarray((g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw).transpose(4, 5, 0, 1, 2, 3))
            gxt = np.zeros((B, H, W, C), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxt[:, i : i + s * Ho : s, j : j + s * Wo : s] += dcols[i, j]
            gx = gxt.transpose(0, 3, 1, 2)
        else:
            gx = np.zeros(x.shape, dtype=g.dtype)
            gw = np.einsum("bchw,bchwij->cij", g, win, optimize=True)[:, None]
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += g * w.data[:, 0, i, j][None, :, None, None]
        return gx, gw

    return _make(out, "conv2d", (x, w), bw)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-input comparison of analytic and central-difference gradients."""

    max_rel_error: dict[str, float]
    max_abs_error: dict[str, float]
    checked: dict[str, int]
    skipped_kinks: dict[str, int]
    nonfinite: dict[str, list]
    rtol: float
    atol_floor: float
    passed: bool

    def summary(self) -> str:
        lines = []
        for name in self.max_rel_error:
            lines.append(
                f"{name:<40s} rel={self.max_rel_error[name]:.2e} abs={self.max_abs_error[name]:.2e} "
                f"n={self.checked[name]} kinks={self.skipped_kinks[name]}"
                + (f" NONFINITE={self.nonfinite[name]}" if self.nonfinite[name] else "")
            )
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def grad_check(
    f: Callable[..., Tensor],
    inputs: dict[str, Tensor] | Sequence[Tensor],
    eps: float = 1e-6,
    tol: float = 1e-4,
    floor: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``backward`` against central differences, coordinate by coordinate.

    ``f`` is called with no arguments and must read ``inputs`` (which are
    perturbed in place).  Error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    A coordinate whose one-sided differences disagree, and keep disagreeing
    at half the step, straddles a kink of ``f`` and is skipped and counted.
    ``max_coords`` samples that many coordinates per input (seeded).
    """
    if get_precision() != 64:
        raise RuntimeError("grad_check must run in 64-bit mode; wrap it in precision(64)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not isinstance(inputs, dict):
        inputs = {f"input{i}": t for i, t in enumerate(inputs)}
    for t in inputs.values():
        t.grad = None
    out = f()
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    rng = np.random.default_rng(seed)

    rel, ab, checked, kinks, bad = {}, {}, {}, {}, {}
    passed = True
    for name, t in inputs.items():
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst_rel = worst_abs = 0.0
        n_kink = 0
        nonfinite = []
        with no_grad():
            f0 = float(f().data)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + eps
                fp = float(f().data)
                flat[c] = orig - eps
                fm = float(f().data)
                flat[c] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    nonfinite.append(int(c))
                    continue
                num = (fp - fm) / (2 * eps)
                fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
                a = float(analytic.reshape(-1)[c])
                thr = max(tol * max(abs(fwd), abs(bwd)), floor)
                gap = fwd - bwd
                if abs(gap) > thr:
                    # curvature shrinks the one-sided gap linearly with the step; a kink does not
                    h = eps / 2
                    flat[c] = orig + h
                    fp2 = float(f().data)
                    flat[c] = orig - h
                    fm2 = float(f().data)
                    flat[c] = orig
                    gap2 = (fp2 - f0) / h - (f0 - fm2) / h
                    if abs(gap - 2 * gap2) > thr:
                        n_kink += 1
                        continue
                err = abs(a - num)
                worst_abs = max(worst_abs, err)
                worst_rel = max(worst_rel, err / max(abs(a), abs(num), floor))
        rel[name], ab[name] = worst_rel, worst_abs
        checked[name], kinks[name], bad[name] = len(coords) - n_kink - len(nonfinite), n_kink, nonfinite
        if worst_rel > tol or nonfinite:
            passed = False
    return GradCheckReport(rel, ab, checked, kinks, bad, tol, floor, passed)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
