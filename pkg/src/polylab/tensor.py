"""Dense float64 tensors with tape-based reverse-mode differentiation.

All forward ops validate shapes, run in double precision, and raise
``NonFiniteError`` the moment a NaN/Inf appears, so numerical trouble is
surfaced at its source instead of propagating. A module-level tape records
primitive ops in execution order (which is automatically topological);
``backward`` replays it once in reverse. ``finite_diff_grad`` provides the
central-difference oracle used by every gradient test.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "tape",
    "no_grad",
    "tensor",
    "zeros",
    "ones",
    "add",
    "sub",
    "mul",
    "neg",
    "mul_const",
    "add_const",
    "pow_int",
    "matmul",
    "transpose_last2",
    "swap_axes",
    "reshape",
    "relu",
    "sigmoid",
    "silu",
    "gelu",
    "exp",
    "sum_all",
    "mean_all",
    "rms_norm",
    "softmax_last",
    "embedding",
    "cross_entropy_mean",
    "take",
    "backward",
    "finite_diff_grad",
]


class ShapeError(ValueError):
    """Operand shapes violate a primitive's shape rule."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


class Tensor:
    """Dense n-d array of float64 with an optional gradient buffer.

    ``data`` is immutable by convention once the tensor participates in a
    graph; only ``grad`` is mutated (accumulated by ``backward``, cleared by
    ``zero_grad``).
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def backward(self) -> None:
        backward(self)

    # operator sugar; everything routes through the module-level primitives
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _TapeOp:
    __slots__ = ("inputs", "output", "bwd")

    def __init__(self, inputs, output, bwd):
        self.inputs = inputs
        self.output = output
        self.bwd = bwd


class Tape:
    """Ordered record of primitive ops; creation order is topological."""

    def __init__(self):
        self.ops: list[_TapeOp] = []

    def __len__(self) -> int:
        return len(self.ops)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()


_TAPE_STACK: list[Tape | None] = []


def tape() -> Tape:
    """Fresh recording tape, used as a context manager."""
    return Tape()


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _check_finite(arr: np.ndarray, opname: str) -> None:
    # any non-finite element forces a non-finite sum (inf stays inf or
    # cancels to nan, nan poisons), so one reduction checks the whole buffer
    if not np.isfinite(np.sum(arr)):
        raise NonFiniteError(f"{opname} produced non-finite values")


def _record(opname: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, bwd) -> Tensor:
    _check_finite(out_data, opname)
    t = _active_tape()
    needs = t is not None and any(i.requires_grad for i in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out._tape = t
        t.ops.append(_TapeOp(inputs, out, bwd))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the leading axes numpy prepended when broadcasting."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def _check_leading_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    # smaller shape must be a suffix of the larger one (leading batch
    # broadcast only; no interior dim stretching)
    sa, sb = a.shape, b.shape
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if small != big[len(big) - len(small):]:
        raise ShapeError(f"{opname}: shapes {sa} and {sb} do not conform "
                         "(only leading batch broadcast is allowed)")


# ---------------------------------------------------------------------------
# constructors

def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float64), requires_grad)


# ---------------------------------------------------------------------------
# elementwise primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a, b, "sub")
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a, b, "mul")
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", (a, b), out, bwd)


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def mul_const(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("mul_const", (a,), a.data * c, lambda g: (g * c,))


def add_const(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("add_const", (a,), a.data + c, lambda g: (g,))


def _ipow(x: np.ndarray, n: int) -> np.ndarray:
    """x**n by repeated multiplication; much faster than np.power for small n."""
    if n == 0:
        return np.ones_like(x)
    if n == 1:
        return x
    half = _ipow(x, n // 2)
    sq = half * half
    return sq if n % 2 == 0 else sq * x


def pow_int(a: Tensor, n: int) -> Tensor:
    """Elementwise integer power a**n, n >= 0."""
    if n < 0 or n != int(n):
        raise ValueError(f"pow_int exponent must be a nonnegative integer, got {n}")
    n = int(n)
    out = _ipow(a.data, n)

    def bwd(g):
        if n == 0:
            return (np.zeros_like(a.data),)
        return (g * n * _ipow(a.data, n - 1),)

    return _record("pow_int", (a,), out, bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    # derivative at exactly 0 is 0 (strict inequality)
    mask = a.data > 0.0
    return _record("relu", (a,), out, lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (a,), out, bwd)


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = x * s

    def bwd(g):
        return (g * (s + x * s * (1.0 - s)),)

    return _record("silu", (a,), out, bwd)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF form x * Phi(x), no tanh approximation."""
    x = a.data
    phi = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out = x * phi

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (phi + x * pdf),)

    return _record("gelu", (a,), out, bwd)


# ---------------------------------------------------------------------------
# linear algebra / shape primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    if len(sa) < 2 or len(sb) < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {sa} @ {sb}")
    if sa[-1] != sb[-2]:
        raise ShapeError(f"matmul inner dims differ: {sa} @ {sb}")
    if len(sa) > 2 and len(sb) > 2 and sa[:-2] != sb[:-2]:
        raise ShapeError(f"matmul batch dims differ: {sa} @ {sb}")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        # collapse batch dims for an unbatched operand
        if len(sa) < ga.ndim:
            ga = ga.sum(axis=tuple(range(ga.ndim - len(sa))))
        if len(sb) < gb.ndim:
            gb = gb.sum(axis=tuple(range(gb.ndim - len(sb))))
        return ga, gb

    return _record("matmul", (a, b), out, bwd)


# axis-permutation ops return views; safe because tensor data is immutable
# by convention once it enters a graph

def transpose_last2(a: Tensor) -> Tensor:
    return _record("transpose_last2", (a,), np.swapaxes(a.data, -1, -2),
                   lambda g: (np.swapaxes(g, -1, -2),))


def swap_axes(a: Tensor, i: int, j: int) -> Tensor:
    return _record("swap_axes", (a,), np.swapaxes(a.data, i, j),
                   lambda g: (np.swapaxes(g, i, j),))


def reshape(a: Tensor, shape) -> Tensor:
    # non-contiguous sources still need a materializing copy
    return _record("reshape", (a,), np.reshape(a.data, shape),
                   lambda g: (np.reshape(g, a.shape),))


# ---------------------------------------------------------------------------
# reductions and normalization

def sum_all(a: Tensor) -> Tensor:
    out = np.sum(a.data)
    return _record("sum_all", (a,), np.asarray(out),
                   lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.sum(a.data) / n
    return _record("mean_all", (a,), np.asarray(out),
                   lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def rms_norm(v: Tensor, eps: float = 0.0) -> Tensor:
    """v / sqrt(mean(v^2, last axis) + eps), the RMS normalization."""
    x = v.data
    d = x.shape[-1]
    m = np.mean(x * x, axis=-1, keepdims=True)
    s = 1.0 / np.sqrt(m + eps)
    out = x * s

    def bwd(g):
        # d/dx_j [x_k * s] = delta_kj * s - x_k * x_j * s^3 / d
        dot = np.sum(g * x, axis=-1, keepdims=True)
        return (g * s - x * (dot * s ** 3 / d),)

    return _record("rms_norm", (v,), out, bwd)


def softmax_last(a: Tensor) -> Tensor:
    x = a.data
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax_last", (a,), out, bwd)


# ---------------------------------------------------------------------------
# indexing

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a [V, H] table by an integer id array."""
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ShapeError("embedding ids out of range")
    out = table.data[ids]  # fancy indexing already copies

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record("embedding", (table,), out, bwd)


def take(a: Tensor, i: int) -> Tensor:
    """Scalar view of element i of a 1-d tensor (differentiable)."""
    if a.data.ndim != 1:
        raise ShapeError("take expects a 1-d tensor")
    out = np.asarray(a.data[i])

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[i] = g
        return (ga,)

    return _record("take", (a,), out, bwd)


def cross_entropy_mean(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    x = logits.data
    if x.ndim != 2:
        raise ShapeError("cross_entropy_mean expects [N, V] logits")
    tgt = np.asarray(targets).reshape(-1)
    n = x.shape[0]
    if tgt.shape[0] != n:
        raise ShapeError("targets length does not match logits rows")
    z = x - np.max(x, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1))
    nll = lse - z[np.arange(n), tgt]
    out = np.asarray(np.sum(nll) / n)

    def bwd(g):
        sm = np.exp(z - lse[:, None])
        sm[np.arange(n), tgt] -= 1.0
        return (g * sm / n,)

    return _record("cross_entropy_mean", (logits,), out, bwd)


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from ``loss``.

    Repeated calls accumulate into existing grads; call ``zero_grad`` on the
    leaves in between to reset.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    t = loss._tape
    if t is None:
        if loss.requires_grad:
            # a bare leaf: gradient of itself is 1
            loss.grad = (loss.grad if loss.grad is not None else np.zeros_like(loss.data))
            loss.grad = loss.grad + np.ones_like(loss.data)
            return
        raise RuntimeError("backward on a detached graph: loss was not recorded on any tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for op in reversed(t.ops):
        g_out = grads.pop(id(op.output), None)
        if g_out is None:
            continue
        in_grads = op.bwd(g_out)
        for inp, gi in zip(op.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is t:
                # interior node: stage for its producing op
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
            else:
                # leaf: accumulate into the public grad buffer
                inp.grad = gi.reshape(inp.shape).copy() if inp.grad is None \
                    else inp.grad + gi.reshape(inp.shape)


# ---------------------------------------------------------------------------
# finite-difference oracle

def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor,
                     h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function at x.

    Evaluates ``(f(x + h e_i) - f(x - h e_i)) / (2h)`` per coordinate, with
    recording disabled. Independent of the tape machinery it is used to check.
    """
    if h <= 0:
        raise ValueError("finite_diff_grad step must be positive")

    def feval(arr: np.ndarray) -> float:
        with no_grad():
            out = f(Tensor(arr))
        val = out.item() if isinstance(out, Tensor) else float(out)
        if not np.isfinite(val):
            raise NonFiniteError("finite_diff_grad: non-finite function value")
        return val

    base = x.data
    g = np.zeros_like(base)
    flat = base.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        bump = flat.copy()
        bump[i] = flat[i] + h
        fp = feval(bump.reshape(base.shape))
        bump[i] = flat[i] - h
        fm = feval(bump.reshape(base.shape))
        gf[i] = (fp - fm) / (2.0 * h)
    return g
