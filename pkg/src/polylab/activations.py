"""Activation zoo: the polynomial-composition family plus the usual baselines.

Two polynomial composites are provided. ``polyrelu`` sums learnable-weighted
powers of ReLU(x); ``polynorm`` sums learnable-weighted RMS-normalized
elementwise powers of the feature vector. Both are differentiable through
the input and the coefficients. The zeroth coefficient acts as a pure bias
(power zero is defined as the constant 1).

Note on polynorm: the normalization divides each power by
sqrt(mean(v^2) + eps) along the trailing feature axis. An L2 (sum instead of
mean) convention would differ only by a constant sqrt(d) factor per term,
which the learnable coefficients absorb; the RMS form is what we implement
and test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

BASELINE_KINDS = ("relu", "relu2", "gelu", "silu", "swiglu")
POLY_KINDS = ("polyrelu", "polynorm")
ACTIVATION_KINDS = BASELINE_KINDS + POLY_KINDS


@dataclass
class PolyCoeffs:
    """Learnable coefficients a_0..a_r of an order-r polynomial composite."""

    r: int
    a: Tensor
    eps: float = 1e-6

    def __post_init__(self):
        if self.r < 1:
            raise ValueError(f"polynomial order must be >= 1, got {self.r}")
        if self.a.shape != (self.r + 1,):
            raise ValueError(
                f"coefficient vector must have length r+1={self.r + 1}, got shape {self.a.shape}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    def values(self) -> np.ndarray:
        return self.a.data.copy()


def init_coeffs(r: int, eps: float = 1e-6, requires_grad: bool = True) -> PolyCoeffs:
    """Standard initialization: a_0 = 0 and a_i = 1/r for i >= 1."""
    if r < 1:
        raise ValueError(f"polynomial order must be >= 1, got {r}")
    a = np.full(r + 1, 1.0 / r)
    a[0] = 0.0
    return PolyCoeffs(r=r, a=Tensor(a, requires_grad=requires_grad), eps=eps)


@dataclass
class ActivationSpec:
    """Tagged activation choice; coefficients only for the polynomial kinds."""

    kind: str
    coeffs: PolyCoeffs | None = None

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise ValueError(f"unknown activation kind {self.kind!r}; "
                             f"expected one of {ACTIVATION_KINDS}")
        needs = self.kind in POLY_KINDS
        if needs and self.coeffs is None:
            raise ValueError(f"{self.kind} requires coefficients")
        if not needs and self.coeffs is not None:
            raise ValueError(f"{self.kind} takes no coefficients")

    @property
    def is_gated(self) -> bool:
        return self.kind == "swiglu"


def make_spec(kind: str, order: int = 3, eps: float = 1e-6) -> ActivationSpec:
    """Build a spec, allocating fresh learnable coefficients where needed."""
    if kind in POLY_KINDS:
        return ActivationSpec(kind, init_coeffs(order, eps=eps))
    return ActivationSpec(kind)


# ---------------------------------------------------------------------------
# forward functions (differentiable through inputs and coefficients)

def polyrelu(x: Tensor, c: PolyCoeffs) -> Tensor:
    """Elementwise sum over i of a_i * max(x, 0)^i, with power 0 := 1."""
    t = T.relu(x)
    out = T.mul(ones_like(x), T.take(c.a, 0))
    for i in range(1, c.r + 1):
        p = t if i == 1 else T.pow_int(t, i)
        out = T.add(out, T.mul(p, T.take(c.a, i)))
    return out


def polynorm(x: Tensor, c: PolyCoeffs) -> Tensor:
    """Sum over i >= 1 of a_i * rmsnorm(x^i) along the trailing axis, plus a_0."""
    if x.data.ndim < 1 or x.shape[-1] < 1:
        raise T.ShapeError("polynorm needs a trailing feature axis")
    out = T.mul(ones_like(x), T.take(c.a, 0))
    for i in range(1, c.r + 1):
        p = x if i == 1 else T.pow_int(x, i)
        out = T.add(out, T.mul(T.rms_norm(p, eps=c.eps), T.take(c.a, i)))
    return out


def ones_like(x: Tensor) -> Tensor:
    return Tensor(np.ones_like(x.data))


def apply_baseline(x: Tensor, kind: str) -> Tensor:
    """Elementwise baselines. SwiGLU is gated and lives in swiglu() instead."""
    if kind == "relu":
        return T.relu(x)
    if kind == "relu2":
        return T.pow_int(T.relu(x), 2)
    if kind == "gelu":
        return T.gelu(x)
    if kind == "silu":
        return T.silu(x)
    raise ValueError(f"not an elementwise baseline: {kind!r}")


def swiglu(gate_in: Tensor, lin_in: Tensor) -> Tensor:
    """SiLU(gate stream) * linear stream, the gated-unit combination."""
    return T.mul(T.silu(gate_in), lin_in)


def apply_activation(x: Tensor, spec: ActivationSpec) -> Tensor:
    """Dispatch for the non-gated kinds (SwiGLU needs two streams)."""
    if spec.kind == "polyrelu":
        return polyrelu(x, spec.coeffs)
    if spec.kind == "polynorm":
        return polynorm(x, spec.coeffs)
    if spec.kind == "swiglu":
        raise ValueError("swiglu is gated; call swiglu(gate_in, lin_in)")
    return apply_baseline(x, spec.kind)
