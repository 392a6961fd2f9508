"""Constructive conversions between ReLU and polynomial-composite networks.

Everything here operates on an explicit multilayer-perceptron IR
(``LayeredNet``): per-layer affine maps plus per-neuron activation tags.
Neuron j of a layer computes ``act_j(x @ w[:, j] + b[j])`` where the tag is
identity, ReLU, or a polynomial-of-ReLU with its own coefficient row.

Two families of constructions live here.

Exact family (equalities in exact arithmetic, paired-evaluation error at
float noise): tag lifting, the even/odd split of a polynomial into two
ReLU-polynomial branches, integer-power networks via base-r digit
factorization, piecewise-linear networks, and the grid-patched local Taylor
approximator realized as a network. Products of two values use the
polarization identity (u+v)^2 - u^2 - v^2 = 2uv with each square formed
exactly by the pair x^2 = relu(x)^2 + relu(-x)^2, so no approximation error
enters anywhere in this family.

Approximate family (ReLU tags only, measured sup error <= requested eps):
the sawtooth interpolant of x^2 on [0,1], a polynomial-of-ReLU approximator
built from it, and the layer-by-layer replacement of every polynomial neuron
in a whole net with tolerances scheduled geometrically across depth.

Identity-tagged neurons serve as affine pass-throughs (depth alignment,
output heads); they are counted by size() like any other neuron.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .activations import PolyCoeffs
from .tensor import Tensor

IDENTITY = 0
RELU = 1
POLYRELU = 2

__all__ = [
    "LayeredNet",
    "Layer",
    "GridApproximator",
    "lift_relu_to_polyrelu",
    "poly_to_polyrelu_pair",
    "power_net",
    "pwl_to_polyrelu",
    "relu_pwl_net",
    "relu_approx_square",
    "relu_approx_polyrelu",
    "relu_approx_polyrelu_net",
    "polyrelu_lipschitz",
    "random_relu_net",
    "random_admissible_polyrelu_net",
    "build_grid_approximator",
    "eval_grid_approximator",
    "grid_error_bound",
    "grid_resolution_for_eps",
    "grid_net",
    "bump_profile",
    "partition_sum",
    "sawtooth_stages_for",
    "save_layered_net",
    "load_layered_net",
]


@dataclass
class Layer:
    w: np.ndarray            # [in_dim, out_dim]
    b: np.ndarray            # [out_dim]
    kind: np.ndarray         # [out_dim] int8, one of IDENTITY/RELU/POLYRELU
    coef: np.ndarray | None  # [out_dim, k] rows used where kind == POLYRELU

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.kind = np.asarray(self.kind, dtype=np.int8)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[1],):
            raise ValueError("layer weight/bias shapes do not conform")
        if self.kind.shape != (self.w.shape[1],):
            raise ValueError("one activation tag per neuron required")
        if self.coef is not None:
            self.coef = np.asarray(self.coef, dtype=np.float64)
        if (self.kind == POLYRELU).any():
            if self.coef is None or self.coef.shape[0] != self.w.shape[1]:
                raise ValueError("polyrelu neurons need a coefficient row each")

    @property
    def in_dim(self) -> int:
        return self.w.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w.shape[1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        z = x @ self.w + self.b
        out = z.copy()
        rmask = self.kind == RELU
        if rmask.any():
            out[:, rmask] = np.maximum(z[:, rmask], 0.0)
        pmask = self.kind == POLYRELU
        if pmask.any():
            t = np.maximum(z[:, pmask], 0.0)
            cf = self.coef[pmask]
            acc = np.broadcast_to(cf[:, -1], t.shape).copy()
            for k in range(cf.shape[1] - 2, -1, -1):
                acc = acc * t + cf[:, k]
            out[:, pmask] = acc
        return out


@dataclass
class LayeredNet:
    """Explicit affine+activation network used by the conversion toolkit."""

    input_dim: int
    layers: list[Layer]

    def __post_init__(self):
        prev = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.in_dim != prev:
                raise ValueError(
                    f"layer {i} expects input dim {layer.in_dim}, got {prev}")
            prev = layer.out_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def depth(self) -> int:
        return len(self.layers)

    def size(self) -> int:
        """Total neuron count across all layers."""
        return sum(layer.out_dim for layer in self.layers)

    def n_params(self) -> int:
        """Total weight and bias entries."""
        return sum(layer.w.size + layer.b.size for layer in self.layers)

    def __call__(self, x) -> np.ndarray:
        return self.eval(x)

    def eval(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.input_dim:
            raise ValueError(f"input dim {x.shape[1]} != {self.input_dim}")
        for layer in self.layers:
            x = layer.forward(x)
        return x[0] if squeeze else x


# ---------------------------------------------------------------------------
# assembly machinery


class _Expr:
    """Affine expression b + w.h over the current layer's outputs h."""

    __slots__ = ("w", "b")

    def __init__(self, w: np.ndarray, b: float = 0.0):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = float(b)

    def __add__(self, other):
        if isinstance(other, _Expr):
            return _Expr(self.w + other.w, self.b + other.b)
        return _Expr(self.w.copy(), self.b + float(other))

    def __sub__(self, other):
        if isinstance(other, _Expr):
            return _Expr(self.w - other.w, self.b - other.b)
        return _Expr(self.w.copy(), self.b - float(other))

    def __neg__(self):
        return _Expr(-self.w, -self.b)

    def scaled(self, c: float) -> "_Expr":
        return _Expr(self.w * c, self.b * c)


def _unit_coef(m: int, sign: float = 1.0) -> np.ndarray:
    c = np.zeros(m + 1)
    c[m] = sign
    return c


_LIN = np.array([0.0, 1.0])  # polynomial row reproducing plain ReLU


class _Pending:
    """Deferred affine combination of neurons queued in one stage."""

    __slots__ = ("stage", "terms", "bias")

    def __init__(self, stage: "_Stage", terms: list[tuple[int, float]],
                 bias: float = 0.0):
        self.stage = stage
        self.terms = terms
        self.bias = bias

    def expr(self) -> _Expr:
        if not self.stage.committed:
            raise RuntimeError("stage not committed yet")
        w = np.zeros(self.stage.out_width)
        for idx, c in self.terms:
            w[idx] += c
        return _Expr(w, self.bias)


class _Stage:
    """One layer under construction, filled with neuron requests."""

    def __init__(self, builder: "_Builder"):
        self.builder = builder
        self.pending: list[tuple[_Expr, int, np.ndarray | None]] = []
        self.committed = False
        self.out_width = 0

    def _slot(self, e: _Expr, kind: int, coef: np.ndarray | None = None) -> int:
        self.pending.append((e, kind, coef))
        return len(self.pending) - 1

    def relu(self, e: _Expr) -> _Pending:
        return _Pending(self, [(self._slot(e, RELU), 1.0)])

    def identity(self, e: _Expr) -> _Pending:
        return _Pending(self, [(self._slot(e, IDENTITY), 1.0)])

    def lin_polyrelu(self, e: _Expr) -> _Pending:
        """relu(e) realized as the degree-1 polynomial neuron."""
        return _Pending(self, [(self._slot(e, POLYRELU, _LIN), 1.0)])

    def pow_pair(self, e: _Expr, m: int) -> _Pending:
        """Exact e^m on all of R: relu(e)^m + (-1)^m relu(-e)^m."""
        i1 = self._slot(e, POLYRELU, _unit_coef(m))
        i2 = self._slot(-e, POLYRELU, _unit_coef(m, (-1.0) ** m))
        return _Pending(self, [(i1, 1.0), (i2, 1.0)])

    def pass_pair(self, e: _Expr, poly: bool = False) -> _Pending:
        """Exact pass-through on all of R: relu(e) - relu(-e)."""
        if poly:
            i1 = self._slot(e, POLYRELU, _LIN)
            i2 = self._slot(-e, POLYRELU, _LIN)
        else:
            i1 = self._slot(e, RELU)
            i2 = self._slot(-e, RELU)
        return _Pending(self, [(i1, 1.0), (i2, -1.0)])

    def clamp01(self, e: _Expr) -> _Pending:
        """min(max(e, 0), 1) = relu(e) - relu(e - 1)."""
        i1 = self._slot(e, RELU)
        i2 = self._slot(e - 1.0, RELU)
        return _Pending(self, [(i1, 1.0), (i2, -1.0)])

    def mul_pair(self, u: _Expr, v: _Expr) -> _Pending:
        """Exact u*v via polarization: ((u+v)^2 - u^2 - v^2)/2."""
        s1 = self.pow_pair(u + v, 2)
        s2 = self.pow_pair(u, 2)
        s3 = self.pow_pair(v, 2)
        terms = ([(i, c * 0.5) for i, c in s1.terms]
                 + [(i, -c * 0.5) for i, c in s2.terms]
                 + [(i, -c * 0.5) for i, c in s3.terms])
        return _Pending(self, terms)

    def commit(self) -> None:
        if not self.pending:
            raise RuntimeError("committing an empty stage")
        n = len(self.pending)
        w = np.zeros((self.builder.width, n))
        b = np.zeros(n)
        kind = np.zeros(n, dtype=np.int8)
        max_k = max((len(cf) for _, k, cf in self.pending if cf is not None),
                    default=0)
        coef = np.zeros((n, max_k)) if max_k else None
        for j, (e, k, cf) in enumerate(self.pending):
            w[:, j] = e.w
            b[j] = e.b
            kind[j] = k
            if cf is not None:
                coef[j, :len(cf)] = cf
        self.builder.layers.append(Layer(w, b, kind, coef))
        self.builder.width = n
        self.committed = True
        self.out_width = n


class _Builder:
    def __init__(self, input_dim: int):
        self.input_dim = input_dim
        self.layers: list[Layer] = []
        self.width = input_dim

    def inputs(self) -> list[_Expr]:
        return [_Expr(np.eye(self.width)[i]) for i in range(self.width)]

    def stage(self) -> _Stage:
        return _Stage(self)

    def finish_scalar(self, out: _Expr) -> LayeredNet:
        st = self.stage()
        p = st.identity(out)
        st.commit()
        return LayeredNet(self.input_dim, self.layers)


class _Squarer:
    """Sawtooth interpolant of x^2 on [0,1], advanced one stage at a time.

    The input expression must lie in [0,1]; after s stages ``value`` holds
    the piecewise-linear interpolant of input^2 on a 2^s grid (ReLU neurons
    only, 3-4 per stage).
    """

    def __init__(self, inp: _Expr):
        self.inp = inp
        self.u: _Expr | None = None
        self.tooth: _Expr | None = None
        self.s = 0
        self._req = None

    def queue(self, st: _Stage) -> None:
        src = self.inp if self.s == 0 else self.tooth
        pu = st.relu(self.u) if self.u is not None else None
        self._req = (pu, st.relu(src), st.relu(src - 0.5), st.relu(src - 1.0))

    def advance(self) -> None:
        pu, pa, pb, pc = self._req
        a, b, c = pa.expr(), pb.expr(), pc.expr()
        tooth = a.scaled(2.0) - b.scaled(4.0) + c.scaled(2.0)
        self.s += 1
        # on [0,1] the first-stage relu(src) equals the input itself
        base = a if pu is None else pu.expr()
        self.u = base - tooth.scaled(0.25 ** self.s)
        self.tooth = tooth
        self._req = None

    @property
    def value(self) -> _Expr:
        return self.u


# ---------------------------------------------------------------------------
# structural combinators


def _merge_parallel(nets: list[LayeredNet]) -> LayeredNet:
    """Run nets side by side on the shared input; outputs concatenate.

    Shorter nets are padded with identity layers up to the common depth.
    """
    d = nets[0].input_dim
    if any(n.input_dim != d for n in nets):
        raise ValueError("parallel merge requires a common input dim")
    depth = max(n.depth() for n in nets)
    padded: list[list[Layer]] = []
    for n in nets:
        layers = list(n.layers)
        while len(layers) < depth:
            k = layers[-1].out_dim
            layers.append(Layer(np.eye(k), np.zeros(k),
                                np.full(k, IDENTITY, dtype=np.int8), None))
        padded.append(layers)
    merged: list[Layer] = []
    for li in range(depth):
        rows = [p[li] for p in padded]
        outs = [r.out_dim for r in rows]
        if li == 0:
            w = np.concatenate([r.w for r in rows], axis=1)
        else:
            ins = [r.in_dim for r in rows]
            w = np.zeros((sum(ins), sum(outs)))
            oi = oj = 0
            for r in rows:
                w[oi:oi + r.in_dim, oj:oj + r.out_dim] = r.w
                oi += r.in_dim
                oj += r.out_dim
        b = np.concatenate([r.b for r in rows])
        kind = np.concatenate([r.kind for r in rows])
        max_k = max((r.coef.shape[1] for r in rows if r.coef is not None),
                    default=0)
        coef = None
        if max_k:
            coef = np.zeros((len(b), max_k))
            off = 0
            for r in rows:
                if r.coef is not None:
                    coef[off:off + r.out_dim, :r.coef.shape[1]] = r.coef
                off += r.out_dim
        merged.append(Layer(w, b, kind, coef))
    return LayeredNet(d, merged)


def _stack(first: LayeredNet, second: LayeredNet) -> LayeredNet:
    if first.output_dim != second.input_dim:
        raise ValueError("stacked nets do not conform")
    return LayeredNet(first.input_dim, list(first.layers) + list(second.layers))


def _prepend_affine(net: LayeredNet, a: np.ndarray, c: np.ndarray) -> LayeredNet:
    """Fold the map x -> x @ a + c into the first layer; adds no neurons."""
    a = np.asarray(a, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    f = net.layers[0]
    new_first = Layer(a @ f.w, c @ f.w + f.b, f.kind.copy(),
                      None if f.coef is None else f.coef.copy())
    return LayeredNet(a.shape[0], [new_first] + list(net.layers[1:]))


# ---------------------------------------------------------------------------
# exact constructions


def lift_relu_to_polyrelu(net: LayeredNet) -> LayeredNet:
    """Replace every ReLU tag with the polynomial row (0,1,0,0); exact.

    Identity tags (affine output heads) are kept. Nets already containing
    polynomial neurons are rejected; size and structure are unchanged.
    """
    out_layers = []
    for layer in net.layers:
        if (layer.kind == POLYRELU).any():
            raise ValueError("lift expects a pure ReLU net")
        kind = layer.kind.copy()
        rmask = kind == RELU
        coef = None
        if rmask.any():
            coef = np.zeros((layer.out_dim, 4))
            coef[rmask, 1] = 1.0
            kind[rmask] = POLYRELU
        out_layers.append(Layer(layer.w.copy(), layer.b.copy(), kind, coef))
    return LayeredNet(net.input_dim, out_layers)


def poly_to_polyrelu_pair(coeffs) -> tuple[PolyCoeffs, PolyCoeffs]:
    """Split a polynomial into two ReLU-polynomial branches.

    Returns (c1, c2) such that poly(x) == branch(x; c1) + branch(-x; c2) on
    all of R, from the power identity x^i = relu(x)^i + (-1)^i relu(-x)^i
    for i >= 1. The constant term goes to the first branch only.
    """
    a = np.asarray(coeffs, dtype=np.float64)
    if a.ndim != 1 or a.size < 1:
        raise ValueError("expected a 1-d coefficient vector")
    if a.size == 1:
        a = np.array([a[0], 0.0])
    r = a.size - 1
    a1 = a.copy()
    a2 = a * (-1.0) ** np.arange(r + 1)
    a2[0] = 0.0
    return (PolyCoeffs(r, Tensor(a1)), PolyCoeffs(r, Tensor(a2)))


def power_net(n: int, r: int) -> LayeredNet:
    """Net computing x^n exactly on R from digit-driven squares and products.

    Walks the binary digits of n with a ladder holding (x^k, x^(k+1)), so
    every product joins powers whose exponents differ by at most one. That
    balance is what keeps the float64 evaluation near machine precision: the
    polarization product of x^a and x^b loses roughly |a-b| * log2(1/|x|)
    bits to cancellation, so multiplying digit groups of a larger base (with
    their geometrically spaced exponents) would destroy all accuracy at
    moderate x. Trailing zero bits are peeled off as plain square stages.

    Neuron count is O((floor(log_r n) + 1)^2) with a small constant; n = 1
    degenerates to a depth-1 identity net. ``r`` only gates the construction
    (squares need order two).
    """
    if n < 1:
        raise ValueError("exponent must be >= 1")
    if r < 2:
        raise ValueError("activation order must be >= 2")
    if n == 1:
        return LayeredNet(1, [Layer(np.eye(1), np.zeros(1),
                                    np.array([IDENTITY], dtype=np.int8), None)])
    n_squares = (n & -n).bit_length() - 1
    m = n >> n_squares

    bld = _Builder(1)
    x = bld.inputs()[0]
    cur = x
    if m > 1:
        st = bld.stage()
        pa = st.pass_pair(x, poly=True)
        pb = st.pow_pair(x, 2)
        st.commit()
        a, b = pa.expr(), pb.expr()  # (x^k, x^(k+1)), k = 1
        for bit in bin(m)[3:]:
            st = bld.stage()
            if bit == "0":
                pa = st.pow_pair(a, 2)
                pb = st.mul_pair(a, b)
            else:
                pa = st.mul_pair(a, b)
                pb = st.pow_pair(b, 2)
            st.commit()
            a, b = pa.expr(), pb.expr()
        cur = a
    for _ in range(n_squares):
        st = bld.stage()
        pc = st.pow_pair(cur, 2)
        st.commit()
        cur = pc.expr()
    return bld.finish_scalar(cur)


def relu_pwl_net(breakpoints, slopes, value_at=(0.0, 0.0)) -> LayeredNet:
    """ReLU net computing a continuous piecewise-linear function exactly.

    ``slopes`` holds one entry per segment (len(breakpoints) + 1) and
    ``value_at`` pins the function value at one point. The net realizes the
    kink sum f(x) = c + s_0 x + sum_k (s_k - s_{k-1}) relu(x - b_k), exact
    on all of R.
    """
    bp = np.asarray(breakpoints, dtype=np.float64)
    sl = np.asarray(slopes, dtype=np.float64)
    if bp.ndim != 1 or sl.shape != (bp.size + 1,):
        raise ValueError("need one slope per segment (len(breakpoints) + 1)")
    if bp.size > 1 and not (np.diff(bp) > 0).all():
        raise ValueError("breakpoints must be strictly increasing")
    x0, y0 = value_at
    jumps = np.diff(sl)
    c0 = y0 - sl[0] * x0 - float(np.sum(jumps * np.maximum(x0 - bp, 0.0)))

    bld = _Builder(1)
    x = bld.inputs()[0]
    st = bld.stage()
    parts: list[tuple[_Pending, float]] = []
    if sl[0] != 0.0:
        parts.append((st.pass_pair(x), sl[0]))
    for bk, jk in zip(bp, jumps):
        parts.append((st.relu(x - bk), jk))
    if not parts:  # constant target
        return LayeredNet(1, [Layer(np.zeros((1, 1)), np.array([c0]),
                                    np.array([IDENTITY], dtype=np.int8), None)])
    st.commit()
    out = _Expr(np.zeros(bld.width), c0)
    for pend, coeff in parts:
        out = out + pend.expr().scaled(coeff)
    return bld.finish_scalar(out)


def pwl_to_polyrelu(breakpoints, slopes, value_at=(0.0, 0.0)) -> LayeredNet:
    """Piecewise-linear function as a polynomial-composite net; exact on R."""
    return lift_relu_to_polyrelu(relu_pwl_net(breakpoints, slopes, value_at))


# ---------------------------------------------------------------------------
# approximate constructions (ReLU side)


def sawtooth_stages_for(eps: float) -> int:
    """Stages m such that the interpolation error 2^-(2m+2) is at most eps."""
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must be in (0, 1)")
    return max(1, math.ceil((math.log2(1.0 / eps) - 2.0) / 2.0))


def relu_approx_square(eps: float) -> LayeredNet:
    """ReLU net approximating x^2 on [0,1] within eps (sup norm).

    An m-stage sawtooth composition computes the piecewise-linear
    interpolant of x^2 on a 2^m grid, so the sup error is exactly
    2^-(2m+2) and depth grows linearly in log2(1/eps). The interpolant
    matches x^2 at the grid points; in particular net(0)=0 and net(1)=1.
    """
    m = sawtooth_stages_for(eps)
    bld = _Builder(1)
    sq = _Squarer(bld.inputs()[0])
    for _ in range(m):
        st = bld.stage()
        sq.queue(st)
        st.commit()
        sq.advance()
    return bld.finish_scalar(sq.value)


def _poly_error_weight(a: np.ndarray) -> float:
    """Worst-case propagated error per unit of squarer tolerance.

    The square p_2 carries one tolerance; each further chained product
    triples the carried error and adds three tolerances:
    e_2 <= delta, e_i <= 3 delta + 3 e_{i-1}.
    """
    coef = 0.0
    total = 0.0
    for i in range(2, a.size):
        coef = 1.0 if i == 2 else 3.0 * coef + 3.0
        total += abs(a[i]) * coef
    return total


def relu_approx_polyrelu(coeffs, eps: float, clamp: bool = True) -> LayeredNet:
    """ReLU net approximating sum_i a_i relu(x)^i on [-1,1] within eps.

    A ReLU front end reduces the task to the plain polynomial on [0,1].
    Monomials come from chained products, each product assembled from three
    sawtooth squarers through the polarization identity, with operands
    clamped back into [0,1] between steps; the squarer tolerance is budgeted
    so the propagated error stays below eps/2. With no coefficient of degree
    two or higher the net is exact (affine in relu(x), no clamp).

    Outputs are clamped into [-1,1] by default, matching the target's range
    whenever the coefficients are admissible (sum |a_i| <= 1).
    """
    a = coeffs.values() if isinstance(coeffs, PolyCoeffs) else \
        np.asarray(coeffs, dtype=np.float64).copy()
    if a.ndim != 1 or a.size < 2:
        raise ValueError("expected coefficients (a_0, ..., a_r) with r >= 1")
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must be in (0, 1)")
    if (np.abs(a) > 1.0 + 1e-12).any():
        raise ValueError("coefficients must lie in [-1, 1]")
    r = a.size - 1
    top = max((i for i in range(2, r + 1) if a[i] != 0.0), default=None)

    bld = _Builder(1)
    x = bld.inputs()[0]
    st = bld.stage()
    pt = st.relu(x)
    st.commit()
    t = pt.expr()

    if top is None:
        # affine in relu(x): exact "trivial passthrough branch"
        return bld.finish_scalar(t.scaled(a[1]) + a[0])

    delta = eps / (2.0 * _poly_error_weight(a[:top + 1]))
    m = sawtooth_stages_for(min(delta, 0.25))

    powers: dict[int, _Expr] = {1: t}
    for i in range(2, top + 1):
        # clamp stage: product operands into [0,1]; carried powers ride along
        st = bld.stage()
        keep: dict[object, _Pending] = {}
        for j in powers:
            # relu(t) = t exactly; approximate powers need the full clamp
            keep[j] = st.relu(powers[j]) if j == 1 else st.clamp01(powers[j])
        if i > 2:
            keep["w"] = st.clamp01((powers[i - 1] + powers[1]).scaled(0.5))
        st.commit()
        cur = {k: p.expr() for k, p in keep.items()}
        powers = {j: cur[j] for j in powers}

        if i == 2:
            sqs = [_Squarer(powers[1])]
        else:
            sqs = [_Squarer(cur["w"]), _Squarer(powers[i - 1]),
                   _Squarer(powers[1])]
        for _ in range(m):
            st = bld.stage()
            for sq in sqs:
                sq.queue(st)
            ppass = {j: st.relu(powers[j]) for j in powers}
            st.commit()
            for sq in sqs:
                sq.advance()
            powers = {j: p.expr() for j, p in ppass.items()}
        if i == 2:
            powers[2] = sqs[0].value
        else:
            powers[i] = (sqs[0].value.scaled(2.0)
                         - sqs[1].value.scaled(0.5)
                         - sqs[2].value.scaled(0.5))

    out = _Expr(np.zeros(bld.width), a[0]) + powers[1].scaled(a[1])
    for i in range(2, top + 1):
        if a[i] != 0.0:
            out = out + powers[i].scaled(a[i])
    if not clamp:
        return bld.finish_scalar(out)
    st = bld.stage()
    hi = st.relu(out + 1.0)
    lo = st.relu(out - 1.0)
    st.commit()
    return bld.finish_scalar(hi.expr() - lo.expr() - 1.0)


def polyrelu_lipschitz(coeffs, grid: int = 10_000) -> float:
    """Numerical Lipschitz bound of a ReLU-polynomial on [-1,1].

    The activation is constant on the negative axis, so the bound is the
    max of |d/dt sum a_i t^i| over a dense grid of t in [0,1].
    """
    a = coeffs.values() if isinstance(coeffs, PolyCoeffs) else \
        np.asarray(coeffs, dtype=np.float64)
    t = np.linspace(0.0, 1.0, grid)
    deriv = np.zeros_like(t)
    for i in range(1, a.size):
        deriv += i * a[i] * t ** (i - 1)
    return float(np.max(np.abs(deriv)))


def relu_approx_polyrelu_net(net: LayeredNet, eps: float,
                             alpha: float | None = None) -> LayeredNet:
    """Replace every polynomial neuron with a ReLU subnet, scheduled by depth.

    Layer i of L gets per-neuron tolerance eps_i = eps / (L * alpha^(L-i)),
    which telescopes to an end-to-end sup error of at most eps on [-1,1]^d.
    Requires the normalization ||w||_1 + |b| <= 1 for every neuron and
    activations mapping [-1,1] into [-1,1]; violations are rejected.
    ``alpha`` is a Lipschitz bound for all activations (computed numerically
    when omitted).
    """
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must be in (0, 1)")
    L = net.depth()
    worst_alpha = 0.0
    for li, layer in enumerate(net.layers):
        if not (layer.kind == POLYRELU).all():
            raise ValueError("expected a net with polynomial neurons throughout")
        norms = np.abs(layer.w).sum(axis=0) + np.abs(layer.b)
        if (norms > 1.0 + 1e-9).any():
            raise ValueError(
                f"layer {li}: neuron affine norms exceed 1 (max {norms.max():.6f})")
        if (np.abs(layer.coef) > 1.0 + 1e-9).any():
            raise ValueError(f"layer {li}: activation coefficients leave [-1,1]")
        tgrid = np.linspace(0.0, 1.0, 1001)
        for j in range(layer.out_dim):
            vals = np.polynomial.polynomial.polyval(tgrid, layer.coef[j])
            if np.abs(vals).max() > 1.0 + 1e-9:
                raise ValueError(
                    f"layer {li} neuron {j}: activation leaves [-1,1]")
            worst_alpha = max(worst_alpha, polyrelu_lipschitz(layer.coef[j]))
    if alpha is None:
        alpha = worst_alpha
    if alpha <= 0.0:
        alpha = 1.0

    merged: LayeredNet | None = None
    for i, layer in enumerate(net.layers, start=1):
        eps_i = min(eps / (L * alpha ** (L - i)), 0.5)
        subs = []
        for j in range(layer.out_dim):
            sub = relu_approx_polyrelu(layer.coef[j], eps_i, clamp=True)
            sub = _prepend_affine(sub, layer.w[:, j:j + 1],
                                  layer.b[j:j + 1])
            subs.append(sub)
        group = _merge_parallel(subs)
        merged = group if merged is None else _stack(merged, group)
    return merged


def layer_tolerances(eps: float, L: int, alpha: float) -> list[float]:
    """The depth-scheduled tolerances eps_i = eps / (L * alpha^(L-i))."""
    return [eps / (L * alpha ** (L - i)) for i in range(1, L + 1)]


# ---------------------------------------------------------------------------
# random net generators (test/audit fixtures)


def random_relu_net(rng: np.random.Generator, input_dim: int, depth: int,
                    width: int) -> LayeredNet:
    """Random ReLU net with ``depth`` hidden layers and a scalar affine head."""
    layers = []
    prev = input_dim
    for _ in range(depth):
        w = rng.normal(size=(prev, width)) / np.sqrt(prev)
        b = rng.normal(size=width) * 0.1
        layers.append(Layer(w, b, np.full(width, RELU, dtype=np.int8), None))
        prev = width
    w = rng.normal(size=(prev, 1)) / np.sqrt(prev)
    layers.append(Layer(w, rng.normal(size=1) * 0.1,
                        np.array([IDENTITY], dtype=np.int8), None))
    return LayeredNet(input_dim, layers)


def random_admissible_polyrelu_net(rng: np.random.Generator, input_dim: int,
                                   widths: list[int], order: int = 3,
                                   margin: float = 0.9) -> LayeredNet:
    """Random polynomial-composite net satisfying the replacement preconditions.

    Per neuron, ||w||_1 + |b| is rescaled to ``margin`` and the coefficient
    vector to sum |a_i| = margin, which keeps every activation mapping
    [-1,1] into [-1,1].
    """
    layers = []
    prev = input_dim
    for width in widths:
        w = rng.uniform(-1.0, 1.0, size=(prev, width))
        b = rng.uniform(-1.0, 1.0, size=width)
        scale = margin / (np.abs(w).sum(axis=0) + np.abs(b))
        w *= scale
        b *= scale
        coef = rng.uniform(-1.0, 1.0, size=(width, order + 1))
        coef *= (margin / np.abs(coef).sum(axis=1))[:, None]
        layers.append(Layer(w, b, np.full(width, POLYRELU, dtype=np.int8), coef))
        prev = width
    return LayeredNet(input_dim, layers)


# ---------------------------------------------------------------------------
# grid-patched local Taylor approximator


def bump_profile(t) -> np.ndarray:
    """Trapezoid bump: 1 inside |t|<1, 0 outside |t|>2, linear in between."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    return np.clip(2.0 - t, 0.0, 1.0)


@dataclass
class GridApproximator:
    """Partition-of-unity patched local Taylor approximation on [-1,1]^d.

    Grid points m/N for m in {-N..N}^d carry degree-(n-1) Taylor polynomials
    of the target; trapezoid bumps of plateau radius 1/(3N) and support
    radius 2/(3N) blend them. The bumps sum to one everywhere on the cube.
    """

    d: int
    n: int
    N: int
    centers: np.ndarray  # [n_m, d]
    alphas: np.ndarray   # [n_a, d] multi-indices with |alpha|_1 < n
    coeffs: np.ndarray   # [n_m, n_a]

    def bump(self, x: np.ndarray, mi: int) -> np.ndarray:
        prof = bump_profile(3.0 * self.N * (x - self.centers[mi]))
        return np.prod(prof, axis=-1)


def _multi_indices(d: int, n: int) -> np.ndarray:
    idx = [()]
    for _ in range(d):
        idx = [t + (k,) for t in idx for k in range(n)]
    keep = [t for t in idx if sum(t) < n]
    keep.sort(key=lambda t: (sum(t), t))
    return np.array(keep, dtype=np.int64)


def build_grid_approximator(f_derivative_oracle, d: int, n: int,
                            N: int) -> GridApproximator:
    """Assemble the approximator from a derivative oracle.

    ``f_derivative_oracle(alpha, point)`` must return the mixed partial
    D^alpha f at the grid point, for every multi-index with |alpha|_1 < n.
    Targets are expected to come from the unit smoothness ball, so the
    resulting Taylor coefficients D^alpha f / alpha! lie in [-1,1].
    """
    if d not in (1, 2):
        raise ValueError("supported dimensions are 1 and 2")
    if n < 1 or N < 1:
        raise ValueError("need smoothness n >= 1 and resolution N >= 1")
    grid_1d = np.arange(-N, N + 1)
    if d == 1:
        centers = (grid_1d[:, None] / N).astype(np.float64)
    else:
        aa, bb = np.meshgrid(grid_1d, grid_1d, indexing="ij")
        centers = np.stack([aa.ravel(), bb.ravel()], axis=1) / N
    alphas = _multi_indices(d, n)
    coeffs = np.empty((centers.shape[0], alphas.shape[0]))
    for mi, c in enumerate(centers):
        for ai, alpha in enumerate(alphas):
            fact = 1.0
            for k in alpha:
                fact *= math.factorial(int(k))
            coeffs[mi, ai] = f_derivative_oracle(tuple(int(k) for k in alpha),
                                                 c) / fact
    if np.abs(coeffs).max() > 1.0 + 1e-9:
        raise ValueError("Taylor coefficients leave [-1,1]; target is outside "
                         "the unit smoothness ball")
    return GridApproximator(d, n, N, centers, alphas, coeffs)


def eval_grid_approximator(g: GridApproximator, x) -> np.ndarray:
    """Analytic evaluation of the patched approximator inside [-1,1]^d."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != g.d:
        raise ValueError(f"expected points in {g.d} dimensions")
    if np.abs(x).max() > 1.0 + 1e-12:
        raise ValueError("points must lie in [-1,1]^d")
    out = np.zeros(x.shape[0])
    for mi in range(g.centers.shape[0]):
        phi = g.bump(x, mi)
        live = phi > 0.0
        if not live.any():
            continue
        diff = x[live] - g.centers[mi]
        pm = np.zeros(live.sum())
        for ai, alpha in enumerate(g.alphas):
            mono = np.prod(diff ** alpha, axis=-1)
            pm += g.coeffs[mi, ai] * mono
        out[live] += phi[live] * pm
    return out[0] if squeeze else out


def partition_sum(d: int, N: int, x) -> np.ndarray:
    """sum_m phi_m(x); identically one on [-1,1]^d."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    grid_1d = np.arange(-N, N + 1) / N
    # the bumps factor across dimensions, so the sum does too
    total = np.ones(x.shape[0])
    for k in range(d):
        s = np.zeros(x.shape[0])
        for c in grid_1d:
            s += bump_profile(3.0 * N * (x[:, k] - c))
        total *= s
    return total


def grid_error_bound(d: int, n: int, N: int) -> float:
    """Sup-error bound (2^d / n!) * (2d / (3N))^n of the patched approximator."""
    return (2.0 ** d / math.factorial(n)) * (2.0 * d / (3.0 * N)) ** n


def grid_resolution_for_eps(eps: float, d: int, n: int) -> int:
    """Smallest grid resolution making the error bound at most eps."""
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    return int(math.floor((2.0 * d / 3.0)
                          * (2.0 ** d / (math.factorial(n) * eps)) ** (1.0 / n))) + 1


def _phi_factor_block(st: _Stage, x: _Expr, center: float, N: int) -> _Pending:
    """Queue the four kink neurons of one trapezoid factor; exact on R."""
    scale = 1.0 / (3.0 * N)
    bks = [center - 2.0 * scale, center - scale, center + scale,
           center + 2.0 * scale]
    jumps = [3.0 * N, -3.0 * N, -3.0 * N, 3.0 * N]
    slots = [(st._slot(x - bk, POLYRELU, _LIN), jk)
             for bk, jk in zip(bks, jumps)]
    return _Pending(st, slots)


def _grid_term_net(g: GridApproximator, mi: int, ai: int) -> LayeredNet:
    """Exact net for one term phi_m(x) * (x - m/N)^alpha."""
    center = g.centers[mi]
    alpha = g.alphas[ai]
    bld = _Builder(g.d)
    xs = bld.inputs()

    st = bld.stage()
    factor_pend: list[_Pending] = []
    for k in range(g.d):
        factor_pend.append(_phi_factor_block(st, xs[k], float(center[k]), g.N))
    for k in range(g.d):
        ak = int(alpha[k])
        if ak == 1:
            factor_pend.append(st.pass_pair(xs[k] - float(center[k]), poly=True))
        elif ak >= 2:
            factor_pend.append(st.pow_pair(xs[k] - float(center[k]), ak))
    st.commit()
    factors = [p.expr() for p in factor_pend]

    cur = factors[0]
    rest = factors[1:]
    while rest:
        st = bld.stage()
        pprod = st.mul_pair(cur, rest[0])
        pkeep = [st.pass_pair(f, poly=True) for f in rest[1:]]
        st.commit()
        cur = pprod.expr()
        rest = [p.expr() for p in pkeep]
    return bld.finish_scalar(cur)


def grid_net(g: GridApproximator) -> LayeredNet:
    """The approximator as a polynomial-composite LayeredNet; exact.

    One parallel block per nonzero Taylor term; the output head forms the
    coefficient-weighted sum, so the network equals the analytic patched
    approximator everywhere on [-1,1]^d.
    """
    blocks = []
    weights = []
    for mi in range(g.centers.shape[0]):
        for ai in range(g.alphas.shape[0]):
            c = g.coeffs[mi, ai]
            if c == 0.0:
                continue
            blocks.append(_grid_term_net(g, mi, ai))
            weights.append(c)
    if not blocks:
        return LayeredNet(g.d, [Layer(np.zeros((g.d, 1)), np.zeros(1),
                                      np.array([IDENTITY], dtype=np.int8),
                                      None)])
    merged = _merge_parallel(blocks)
    head = Layer(np.asarray(weights)[:, None], np.zeros(1),
                 np.array([IDENTITY], dtype=np.int8), None)
    return _stack(merged, LayeredNet(merged.output_dim, [head]))


# ---------------------------------------------------------------------------
# serialization (JSON manifest + little-endian float64 blob)


def save_layered_net(net: LayeredNet, path_prefix) -> None:
    """Write <prefix>.json (structure) and <prefix>.bin (weights, '<f8')."""
    prefix = Path(path_prefix)
    manifest = {"input_dim": net.input_dim, "byte_order": "little",
                "dtype": "float64", "layers": []}
    blob = bytearray()

    def put(arr: np.ndarray) -> dict:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        rec = {"offset": len(blob), "shape": list(arr.shape)}
        blob.extend(raw)
        return rec

    for layer in net.layers:
        entry = {"w": put(layer.w), "b": put(layer.b),
                 "kind": [int(k) for k in layer.kind]}
        if layer.coef is not None:
            entry["coef"] = put(layer.coef)
        manifest["layers"].append(entry)
    prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=1))
    prefix.with_suffix(".bin").write_bytes(bytes(blob))


def load_layered_net(path_prefix) -> LayeredNet:
    prefix = Path(path_prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    blob = prefix.with_suffix(".bin").read_bytes()

    def get(rec: dict) -> np.ndarray:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count,
                            offset=rec["offset"])
        return arr.reshape(shape).astype(np.float64)

    layers = []
    for entry in manifest["layers"]:
        coef = get(entry["coef"]) if "coef" in entry else None
        layers.append(Layer(get(entry["w"]), get(entry["b"]),
                            np.array(entry["kind"], dtype=np.int8), coef))
    return LayeredNet(manifest["input_dim"], layers)
