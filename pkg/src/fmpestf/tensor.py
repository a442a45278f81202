"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation records its inputs and a backward closure on an implicit
tape (the graph of ``_parents`` links).  Calling :meth:`Tensor.backward` on a
scalar result replays the tape in reverse topological order and accumulates
gradients into every reachable node; :class:`Parameter` leaves keep a
preallocated gradient buffer so untouched parameters read as zero gradient.

Conventions:
  * all values are float64; finite inputs must produce finite outputs,
  * elementwise binary ops broadcast only scalar operands or operands whose
    shape is a trailing suffix of the other (leading-axis expansion),
  * forward evaluation is single-threaded and bitwise deterministic.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericsError(ArithmeticError):
    """A non-finite value appeared where the contract requires finite ones."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (pure forward evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_f64(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """Immutable dense value node in the computation graph."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, _parents: tuple = (), _backward: Callable | None = None):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A constant view of this value, cut off from the tape."""
        return Tensor(self.data)

    def backward(self) -> None:
        """Reverse-mode accumulation from this scalar into all reachable nodes."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return bmatmul(self, _lift(other))


class Parameter(Tensor):
    """Named trainable leaf with a persistent gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add ``g`` into ``t``'s gradient.

    ``own=True`` promises ``g`` is freshly computed for this call and not
    handed to any other node, so the first contribution can be adopted
    without copying.  Closures that pass an incoming gradient through
    unchanged (or hand slices of one array to several parents) must leave
    ``own`` False.
    """
    if t.grad is None:
        t.grad = g if own else np.array(g)
    else:
        t.grad += g


def _make(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    if not _GRAD_ENABLED:
        return Tensor(data)
    return Tensor(data, _parents=parents, _backward=backward)


def _check_elementwise(sa: tuple, sb: tuple) -> None:
    # Allowed: equal shapes, scalar, or one shape a trailing suffix of the other.
    if sa == sb or sa == () or sb == ():
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if big[len(big) - len(small):] == small:
        return
    raise ShapeError(
        f"shapes {sa} and {sb} are not broadcast-compatible "
        "(only scalar or leading-axis expansion is supported)"
    )


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to ``shape`` by summing broadcast axes."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a.shape, b.shape)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a.shape, b.shape)
    out_data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape), own=True)

    return _make(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    _check_elementwise(a.shape, b.shape)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape), own=True)
        _accum(b, _unbroadcast(g * a.data, b.shape), own=True)

    return _make(out_data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a.shape, b.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data
    if not np.all(np.isfinite(out_data)):
        raise NumericsError("division produced non-finite values")

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape), own=True)
        _accum(b, _unbroadcast(-g * out_data / b.data, b.shape), own=True)

    return _make(out_data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g, own=True)

    return _make(-a.data, (a,), backward)


# ---------------------------------------------------------------------------
# contractions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul requires 2-D operands with matching inner "
                         f"dimension, got {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T, own=True)
        _accum(b, a.data.T @ g, own=True)

    return _make(out_data, (a, b), backward)


def bmatmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, numpy-broadcast over the rest."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmatmul requires trailing dims (m,k)x(k,n), "
                         f"got {a.shape} and {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape), own=True)
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape), own=True)

    return _make(out_data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None, axis: int = -3) -> Tensor:
    """Affine map along ``axis``: contracts it with ``weight[out, in]``.

    All other axes broadcast.  Fused into a single tape node because it is
    the hottest operation in the model.
    """
    if weight.ndim != 2:
        raise ShapeError(f"linear weight must be 2-D, got {weight.shape}")
    n_out, n_in = weight.shape
    if x.shape[axis] != n_in:
        raise ShapeError(f"linear axis {axis} of input {x.shape} has length "
                         f"{x.shape[axis]}, weight expects {n_in}")
    if bias is not None and bias.shape != (n_out,):
        raise ShapeError(f"linear bias shape {bias.shape} != ({n_out},)")

    xm = np.moveaxis(x.data, axis, -1)
    ym = xm @ weight.data.T
    if bias is not None:
        ym = ym + bias.data
    out_data = np.moveaxis(ym, -1, axis)

    def backward(g):
        gm = np.moveaxis(g, axis, -1)
        _accum(x, np.moveaxis(gm @ weight.data, -1, axis), own=True)
        g2 = gm.reshape(-1, n_out)
        _accum(weight, g2.T @ xm.reshape(-1, n_in), own=True)
        if bias is not None:
            _accum(bias, g2.sum(axis=0), own=True)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_data, parents, backward)


def time_conv(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Convolution over the last (time) axis with a length-k kernel.

    ``x`` has channels at axis -3 and nodes at axis -2; the kernel spans only
    the time axis so nodes never mix.  Symmetric zero padding keeps the time
    length unchanged.  ``weight`` is ``[out_ch, in_ch, k]``.
    """
    if weight.ndim != 3:
        raise ShapeError(f"time_conv weight must be [out, in, k], got {weight.shape}")
    n_out, n_in, k = weight.shape
    if x.ndim < 3 or x.shape[-3] != n_in:
        raise ShapeError(f"time_conv input {x.shape} has {x.shape[-3] if x.ndim >= 3 else '?'} "
                         f"channels at axis -3, weight expects {n_in}")
    t = x.shape[-1]
    left = (k - 1) // 2
    right = k - 1 - left

    xm = np.moveaxis(x.data, -3, -1)                       # [..., N, T, C]
    xp = np.zeros(xm.shape[:-2] + (t + k - 1, n_in))
    xp[..., left:left + t, :] = xm
    cols = np.concatenate([xp[..., j:j + t, :] for j in range(k)], axis=-1)
    wf = weight.data.transpose(0, 2, 1).reshape(n_out, k * n_in)
    ym = cols @ wf.T
    if bias is not None:
        ym = ym + bias.data
    out_data = np.moveaxis(ym, -1, -3)

    def backward(g):
        gm = np.moveaxis(g, -3, -1)
        dcols = gm @ wf
        dxp = np.zeros_like(xp)
        for j in range(k):
            dxp[..., j:j + t, :] += dcols[..., j * n_in:(j + 1) * n_in]
        _accum(x, np.moveaxis(dxp[..., left:left + t, :], -1, -3), own=True)
        g2 = gm.reshape(-1, n_out)
        dwf = g2.T @ cols.reshape(-1, k * n_in)
        _accum(weight, dwf.reshape(n_out, k, n_in).transpose(0, 2, 1), own=True)
        if bias is not None:
            _accum(bias, g2.sum(axis=0), own=True)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_data, parents, backward)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g * (a.data > 0.0), own=True)

    return _make(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500.0, 500.0)))

    def backward(g):
        _accum(a, g * out_data * (1.0 - out_data), own=True)

    return _make(out_data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - out_data * out_data), own=True)

    return _make(out_data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)
    if not np.all(np.isfinite(out_data)):
        raise NumericsError("exp overflow to non-finite values")

    def backward(g):
        _accum(a, g * out_data, own=True)

    return _make(out_data, (a,), backward)


def absval(a: Tensor) -> Tensor:
    out_data = np.abs(a.data)

    def backward(g):
        _accum(a, g * np.sign(a.data), own=True)

    return _make(out_data, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``; rows sum to one."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - inner), own=True)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape surgery


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.full(a.shape, g.reshape(())), own=True)
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(ge, a.shape).copy(), own=True)

    return _make(out_data, (a,), backward)


def mean(a: Tensor) -> Tensor:
    return tsum(a) * (1.0 / a.size)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, n in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            _accum(p, g[tuple(idx)], own=True)  # disjoint slices per parent
            offset += n

    return _make(out_data, tuple(parts), backward)


def moveaxis(a: Tensor, src: int, dst: int) -> Tensor:
    out_data = np.moveaxis(a.data, src, dst)

    def backward(g):
        _accum(a, np.moveaxis(g, dst, src), own=True)

    return _make(out_data, (a,), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape), own=True)

    return _make(out_data, (a,), backward)


def pad_last(a: Tensor, left: int, right: int) -> Tensor:
    pad = [(0, 0)] * a.ndim
    pad[-1] = (left, right)
    out_data = np.pad(a.data, pad)
    t = a.shape[-1]

    def backward(g):
        _accum(a, g[..., left:left + t], own=True)

    return _make(out_data, (a,), backward)


def take_stride(a: Tensor, offset: int, step: int) -> Tensor:
    """Every ``step``-th element of the last axis starting at ``offset``."""
    out_data = a.data[..., offset::step].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., offset::step] = g
        _accum(a, full, own=True)

    return _make(out_data, (a,), backward)


def interleave(even: Tensor, odd: Tensor) -> Tensor:
    """Inverse of a stride-2 split: even/odd halves back into one time axis."""
    if even.shape != odd.shape:
        raise ShapeError(f"interleave halves must match, got {even.shape} and {odd.shape}")
    shape = list(even.shape)
    shape[-1] *= 2
    out_data = np.empty(shape, dtype=np.float64)
    out_data[..., 0::2] = even.data
    out_data[..., 1::2] = odd.data

    def backward(g):
        _accum(even, g[..., 0::2], own=True)   # disjoint strides
        _accum(odd, g[..., 1::2], own=True)

    return _make(out_data, (even, odd), backward)


def lookup(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a ``[vocab, width]`` table; output ``indices.shape + (width,)``."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"lookup index out of range [0, {table.shape[0]}): "
                         f"min {idx.min()}, max {idx.max()}")
    out_data = table.data[idx]

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    return _make(out_data, (table,), backward)


def expand_axis(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis of length ``n`` by repetition."""
    ex = np.expand_dims(a.data, axis)
    out_data = np.broadcast_to(ex, ex.shape[:axis % ex.ndim] + (n,) + ex.shape[axis % ex.ndim + 1:]).copy()

    def backward(g):
        _accum(a, g.sum(axis=axis), own=True)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# spec surface: elementwise dispatcher

_UNARY_KINDS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "exp": exp, "abs": absval}
_BINARY_KINDS = {"add": add, "subtract": sub, "hadamard": mul}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None, axis: int | None = None) -> Tensor:
    """Dispatch by operation name; binary kinds broadcast per the module policy."""
    if kind in _BINARY_KINDS:
        if b is None:
            raise ShapeError(f"elementwise {kind!r} needs two operands")
        return _BINARY_KINDS[kind](a, b)
    if kind in _UNARY_KINDS:
        return _UNARY_KINDS[kind](a)
    if kind == "softmax":
        return softmax(a, axis=-1 if axis is None else axis)
    if kind == "sum":
        return tsum(a, axis=axis)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# gradient verification harness


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: tuple


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    worst_index: tuple
    entries: list

    def __str__(self) -> str:
        lines = [f"max relative error {self.max_rel_err:.3e} "
                 f"(parameter {self.worst_param!r} at index {self.worst_index})"]
        for e in self.entries:
            lines.append(f"  {e.name}: {e.max_rel_err:.3e} at {e.worst_index}")
        return "\n".join(lines)


def _unravel(flat_index: int, shape: tuple) -> tuple:
    return tuple(int(k) for k in np.unravel_index(flat_index, shape)) if shape else ()


def _eval_finite(f: Callable[[], Tensor], p: Parameter, flat_index: int) -> float:
    idx = _unravel(flat_index, p.shape)
    try:
        val = float(f().data.reshape(()))
    except (NumericsError, FloatingPointError, ZeroDivisionError) as err:
        raise NumericsError(f"non-finite objective while perturbing {p.name!r} "
                            f"at index {idx}: {err}") from err
    if not np.isfinite(val):
        raise NumericsError(f"non-finite objective while perturbing {p.name!r} at index {idx}")
    return val


def grad_check(f: Callable[[], Tensor], params: Iterable[Parameter],
               h: float = 1e-5, rel_floor: float = 1e-3) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` against central differences.

    Relative error per entry is ``|ad - fd| / max(|ad|, |fd|, rel_floor)``;
    the floor keeps finite-difference roundoff from dominating entries whose
    true gradient is ~0.  Raises :class:`NumericsError` naming the parameter
    entry if any perturbed evaluation is non-finite.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    ad_grads = {p.name: p.grad.copy() for p in params}

    entries = []
    worst = (0.0, "", ())
    with no_grad():
        for p in params:
            ad = ad_grads[p.name]
            flat = p.data.reshape(-1)
            err_max, err_idx = 0.0, (0,)
            for i in range(flat.size):
                orig = flat[i]
                try:
                    flat[i] = orig + h
                    f_plus = _eval_finite(f, p, i)
                    flat[i] = orig - h
                    f_minus = _eval_finite(f, p, i)
                finally:
                    flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * h)
                ad_i = float(ad.reshape(-1)[i])
                rel = abs(ad_i - fd) / max(abs(ad_i), abs(fd), rel_floor)
                if rel > err_max:
                    err_max, err_idx = rel, _unravel(i, p.shape)
            entries.append(GradCheckEntry(p.name, err_max, err_idx))
            if err_max > worst[0]:
                worst = (err_max, p.name, err_idx)

    return GradCheckReport(worst[0], worst[1], worst[2], entries)
