"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

A Tape records primitive applications in topological order; backward walks
it once in reverse. Broadcasting is restricted to leading-axis expansion:
two shapes are compatible when one is a suffix of the other. Anything else
requires an explicit reshape, which keeps every gradient rule auditable.

Tensors recorded on a tape must not be mutated; constants (requires_grad
False) never touch a tape and are freely shareable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import erf

DEBUG_FINITE = False

_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
LAYERNORM_EPS = 1e-10
L2NORM_EPS = 1e-20


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError):
    pass


class NonScalarRoot(AutodiffError):
    pass


@dataclass
class _Node:
    inputs: tuple[int, ...]
    out_shape: tuple[int, ...]
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Append-only record of primitive applications.

    A tape is single-threaded. backward() marks it consumed; build a fresh
    tape per optimization step or call reset().
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._nodes: list[_Node | None] = []
        self._consumed = False
        self.last_backward_visits = 0

    def __len__(self) -> int:
        return len(self._nodes)

    def reset(self) -> None:
        self._nodes.clear()
        self._consumed = False

    def leaf(self, data) -> "Tensor":
        """A differentiable leaf holding a copy of data cast to the tape dtype."""
        arr = np.ascontiguousarray(data, dtype=self.dtype)
        return self._register(arr, inputs=(), backward=None)

    def _register(self, arr, inputs, backward) -> "Tensor":
        if self._consumed:
            raise AutodiffError("tape already consumed; reset() or build a new one")
        if DEBUG_FINITE and not np.all(np.isfinite(arr)):
            raise AutodiffError("non-finite value produced on tape")
        node_id = len(self._nodes)
        self._nodes.append(_Node(inputs, np.shape(arr), backward))
        return Tensor(arr, requires_grad=True, tape=self, node_id=node_id)

    def backward(self, root: "Tensor") -> dict[int, np.ndarray]:
        """Accumulate gradients of a scalar root for every recorded node.

        Returns a map node_id -> gradient array. Leaves that the root does
        not depend on get zero gradients of matching shape.
        """
        if root.tape is not self:
            raise AutodiffError("root tensor does not live on this tape")
        if root.data.shape != ():
            raise NonScalarRoot(f"backward root must be scalar, got shape {root.data.shape}")
        if self._consumed:
            raise AutodiffError("tape already consumed")
        self._consumed = True
        grads: dict[int, np.ndarray] = {
            root.node_id: np.asarray(1.0, dtype=self.dtype)
        }
        visits = 0
        for nid in range(root.node_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self._nodes[nid]
            visits += 1
            if node.backward is None:
                continue
            for input_id, ig in zip(node.inputs, node.backward(g)):
                if ig is None:
                    continue
                acc = grads.get(input_id)
                grads[input_id] = ig if acc is None else acc + ig
        self.last_backward_visits = visits
        for nid, node in enumerate(self._nodes):
            if node.backward is None and nid not in grads:
                grads[nid] = np.zeros(node.out_shape, dtype=self.dtype)
        return grads


@dataclass
class Tensor:
    """Dense array value, optionally recorded on a tape.

    Supports +, -, *, @, unary -, slicing, .reshape/.transpose/.sum/.mean.
    """

    data: np.ndarray
    requires_grad: bool = False
    tape: Tape | None = None
    node_id: int = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def constant(data, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=False)


def _coerce(x, like: Tensor | None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.requires_grad:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise AutodiffError("inputs live on different tapes")
    return tape


def _emit(tape: Tape | None, arr: np.ndarray, inputs, backward) -> Tensor:
    if tape is None:
        return Tensor(np.asarray(arr), requires_grad=False)
    ids = tuple(t.node_id for t in inputs)
    return tape._register(arr, ids, backward)


def _check_suffix(a_shape, b_shape):
    small, big = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if len(small) and big[len(big) - len(small):] != small:
        raise ShapeMismatch(
            f"shapes {a_shape} and {b_shape}: smaller must be a trailing suffix"
        )


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# Elementwise arithmetic

def add(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _check_suffix(a.shape, b.shape)
    out = a.data + b.data
    tape = _tape_of(a, b)
    ash, bsh = a.shape, b.shape
    ga = a.requires_grad
    gb = b.requires_grad
    return _emit(
        tape, out, (a, b) if tape else (),
        lambda g: (
            _unbroadcast(g, ash) if ga else None,
            _unbroadcast(g, bsh) if gb else None,
        ),
    )


def sub(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _check_suffix(a.shape, b.shape)
    out = a.data - b.data
    tape = _tape_of(a, b)
    ash, bsh = a.shape, b.shape
    ga, gb = a.requires_grad, b.requires_grad
    return _emit(
        tape, out, (a, b) if tape else (),
        lambda g: (
            _unbroadcast(g, ash) if ga else None,
            _unbroadcast(-g, bsh) if gb else None,
        ),
    )


def mul(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _check_suffix(a.shape, b.shape)
    out = a.data * b.data
    tape = _tape_of(a, b)
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape
    ga, gb = a.requires_grad, b.requires_grad
    return _emit(
        tape, out, (a, b) if tape else (),
        lambda g: (
            _unbroadcast(g * bd, ash) if ga else None,
            _unbroadcast(g * ad, bsh) if gb else None,
        ),
    )


# ---------------------------------------------------------------------------
# Linear algebra and shape ops

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Either operand may be rank 2 (shared weights) or both carry identical
    leading batch axes; other broadcast patterns are rejected.
    """
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.ndim != 2 and b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul leading dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    tape = _tape_of(a, b)
    ad, bd = a.data, b.data
    ga, gb = a.requires_grad, b.requires_grad

    def backward(g):
        grad_a = grad_b = None
        if ga:
            if bd.ndim == 2:
                # single GEMM instead of a stack of small ones
                grad_a = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
            else:
                grad_a = g @ np.swapaxes(bd, -1, -2)
                if ad.ndim == 2 and g.ndim > 2:
                    grad_a = grad_a.reshape(-1, ad.shape[0], ad.shape[1]).sum(axis=0)
        if gb:
            if bd.ndim == 2:
                grad_b = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                grad_b = np.swapaxes(ad, -1, -2) @ g
        return grad_a, grad_b

    return _emit(tape, out, (a, b) if tape else (), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    tape = _tape_of(a)
    inv = tuple(np.argsort(axes))
    return _emit(tape, out, (a,) if tape else (), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    tape = _tape_of(a)
    old = a.shape
    return _emit(tape, out, (a,) if tape else (), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else constant(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    tape = _tape_of(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    needs = [t.requires_grad for t in tensors]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if need else None for p, need in zip(pieces, needs))

    return _emit(tape, out, tuple(tensors) if tape else (), backward)


def slice_(a: Tensor, key) -> Tensor:
    out = a.data[key]
    if out.base is not None:
        out = out.copy()
    tape = _tape_of(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return _emit(tape, out, (a,) if tape else (), backward)


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Take rows along an axis by integer index (embedding lookup)."""
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, idx, axis=axis)
    tape = _tape_of(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _emit(tape, out, (a,) if tape else (), backward)


# ---------------------------------------------------------------------------
# Reductions

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None) -> Tensor:
    axt = _axis_tuple(axis, a.ndim)
    out = a.data.sum(axis=axt)
    tape = _tape_of(a)
    shape = a.shape

    def backward(g):
        expanded = np.expand_dims(g, axt)
        return (np.broadcast_to(expanded, shape).copy(),)

    return _emit(tape, out, (a,) if tape else (), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    axt = _axis_tuple(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axt])) if a.ndim else 1
    out = a.data.mean(axis=axt) if a.ndim else a.data.copy()
    tape = _tape_of(a)
    shape = a.shape

    def backward(g):
        expanded = np.expand_dims(g / n, axt)
        return (np.broadcast_to(expanded, shape).copy(),)

    return _emit(tape, out, (a,) if tape else (), backward)


# ---------------------------------------------------------------------------
# Nonlinearities

def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    tape = _tape_of(a)
    return _emit(tape, out, (a,) if tape else (), lambda g: (g * (0.5 / out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    tape = _tape_of(a)
    return _emit(tape, out, (a,) if tape else (), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    tape = _tape_of(a)
    ad = a.data
    return _emit(tape, out, (a,) if tape else (), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    tape = _tape_of(a)
    pos = a.data > 0.0
    return _emit(tape, out, (a,) if tape else (), lambda g: (g * pos,))


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian error linear unit x * Phi(x)."""
    x = a.data
    cdf = (0.5 * (1.0 + erf(x * _SQRT1_2))).astype(x.dtype, copy=False)
    out = x * cdf
    tape = _tape_of(a)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _emit(tape, out, (a,) if tape else (), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    tape = _tape_of(a)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _emit(tape, out, (a,) if tape else (), backward)


def layernorm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    x = a.data
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeMismatch(f"layernorm gain/bias must be shape ({n},)")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    tape = _tape_of(a, gain, bias)
    ga, gg, gb = a.requires_grad, gain.requires_grad, bias.requires_grad
    gdata = gain.data

    def backward(g):
        grad_a = grad_gain = grad_bias = None
        gx = g * gdata
        if ga:
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            grad_a = inv * (gx - m1 - xhat * m2)
        if gg:
            grad_gain = (g * xhat).reshape(-1, n).sum(axis=0)
        if gb:
            grad_bias = g.reshape(-1, n).sum(axis=0)
        return grad_a, grad_gain, grad_bias

    return _emit(tape, out, (a, gain, bias) if tape else (), backward)


def l2_normalize(a: Tensor, eps: float = L2NORM_EPS) -> Tensor:
    """Scale rows (last axis) to unit L2 norm."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
    out = x / norm
    tape = _tape_of(a)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * dot) / norm,)

    return _emit(tape, out, (a,) if tape else (), backward)


# ---------------------------------------------------------------------------
# Gradient checking

@dataclass
class CheckReport:
    max_err: float
    mean_err: float
    n_coords: int
    worst: tuple[int, int] = (-1, -1)  # (input index, flat coordinate)

    def passes(self, threshold: float) -> bool:
        return self.max_err < threshold


def grad_check(
    f: Callable[..., Tensor],
    xs: list[np.ndarray],
    step: float = 1e-5,
    n_sample: int | None = None,
    seed: int = 0,
) -> CheckReport:
    """Compare tape gradients of a scalar function against central differences.

    f receives one leaf Tensor per input array and must return a scalar
    Tensor. Relative error uses denominator max(1, |a|, |b|) so that
    near-zero gradients are compared absolutely. When n_sample is given,
    that many coordinates per input are probed (seeded); otherwise all.
    """
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    tape = Tape(dtype=np.float64)
    leaves = [tape.leaf(x) for x in xs]
    root = f(*leaves)
    grads = tape.backward(root)
    analytic = [grads[leaf.node_id] for leaf in leaves]

    def eval_at(arrays) -> float:
        consts = [constant(a) for a in arrays]
        return float(f(*consts).data)

    rng = np.random.default_rng(seed)
    errs = []
    worst = (-1, -1)
    max_err = 0.0
    for i, x in enumerate(xs):
        flat = x.reshape(-1)
        n = flat.size
        coords = (
            range(n)
            if n_sample is None or n_sample >= n
            else sorted(rng.choice(n, size=n_sample, replace=False).tolist())
        )
        for c in coords:
            orig = flat[c]
            pert = [a.copy() for a in xs]
            pert[i].reshape(-1)[c] = orig + step
            fp = eval_at(pert)
            pert[i].reshape(-1)[c] = orig - step
            fm = eval_at(pert)
            fd = (fp - fm) / (2.0 * step)
            ad = float(analytic[i].reshape(-1)[c])
            err = abs(ad - fd) / max(1.0, abs(ad), abs(fd))
            errs.append(err)
            if err > max_err:
                max_err = err
                worst = (i, c)
    errs_arr = np.array(errs) if errs else np.zeros(1)
    return CheckReport(float(errs_arr.max()), float(errs_arr.mean()), len(errs), worst)
