"""Diagnostic lenses: effective rank, layer similarity, activation cost.

The cost accounting reproduces closed-form FLOPs/memory figures for the
feed-forward activation portion of a transformer block, relative to the
24*B*S*H^2 of the surrounding matrix multiplies. All ratios are exact
rationals and memory counts exact bytes (2-byte elements, the training
precision the figures assume), so they can be golden-tested cell by cell.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

__all__ = [
    "RankReport",
    "SimilarityMatrix",
    "CostReport",
    "effective_rank",
    "effective_rank_gram_oracle",
    "layer_similarity",
    "activation_cost",
    "cost_table",
    "rank_reports_csv",
    "similarity_csv",
    "cost_csv",
    "COST_KINDS",
]

# relative floor under which singular values count as numerical zeros
_SV_FLOOR = 1e-12


@dataclass
class RankReport:
    layer: int
    matrix: str            # "W_up" | "W_down"
    effective_rank: float
    full_rank: int

    def __post_init__(self):
        if not 1.0 - 1e-9 <= self.effective_rank <= self.full_rank + 1e-9:
            raise ValueError(
                f"effective rank {self.effective_rank} outside [1, {self.full_rank}]")


@dataclass
class SimilarityMatrix:
    values: np.ndarray     # [L, L], symmetric, unit diagonal

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("similarity matrix must be square")
        if not np.allclose(v, v.T, atol=1e-12):
            raise ValueError("similarity matrix must be symmetric")
        if np.abs(v).max() > 1.0 + 1e-12:
            raise ValueError("similarities must lie in [-1, 1]")
        self.values = v


def effective_rank(a: np.ndarray) -> float:
    """exp of the Shannon entropy of the normalized singular values.

    Singular values below 1e-12 of the largest are treated as numerical
    zeros; 0*ln(0) contributes nothing. Raises on an all-zero matrix.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("effective_rank expects a matrix")
    s = np.linalg.svd(a, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        raise ValueError("effective rank of an all-zero matrix is undefined")
    s = s[s > _SV_FLOOR * s[0]]
    p = s / s.sum()
    return float(np.exp(-np.sum(p * np.log(p))))


def effective_rank_gram_oracle(a: np.ndarray) -> float:
    """Independent route for small matrices: eigenvalues of A^T A.

    Singular values are recovered as sqrt of the Gram spectrum; meant as a
    brute-force cross-check of the SVD path, not for production use.
    """
    a = np.asarray(a, dtype=np.float64)
    g = a.T @ a
    eig = np.linalg.eigvalsh(g)
    s = np.sqrt(np.maximum(eig, 0.0))[::-1]
    if s[0] == 0.0:
        raise ValueError("effective rank of an all-zero matrix is undefined")
    s = s[s > _SV_FLOOR * s[0]]
    p = s / s.sum()
    return float(np.exp(-np.sum(p * np.log(p))))


def layer_similarity(hidden_states: list[np.ndarray]) -> SimilarityMatrix:
    """Mean cosine similarity between per-layer hidden vectors.

    Entry (i, j) averages, over every (batch, position), the cosine between
    the layer-i and layer-j hidden vectors at that position. Zero vectors
    contribute zero similarity and stay in the average. Pooling is over
    token positions, not over flattened features.
    """
    if not hidden_states:
        raise ValueError("need at least one layer of hidden states")
    shape = hidden_states[0].shape
    stacked = []
    for h in hidden_states:
        h = np.asarray(h, dtype=np.float64)
        if h.shape != shape:
            raise ValueError("all layers must share [batch, seq, H]")
        stacked.append(h.reshape(-1, shape[-1]))
    L = len(stacked)
    norms = [np.linalg.norm(h, axis=1) for h in stacked]
    out = np.eye(L)
    for i in range(L):
        for j in range(i, L):
            dot = np.sum(stacked[i] * stacked[j], axis=1)
            denom = norms[i] * norms[j]
            cos = np.divide(dot, denom, out=np.zeros_like(dot),
                            where=denom > 0.0)
            val = float(np.clip(cos, -1.0, 1.0).mean())
            out[i, j] = out[j, i] = val
    return SimilarityMatrix(out)


# FLOPs for the activation in units of B*S*H, and activation-memory elements
# in units of B*S*H, without gradient checkpointing. Checkpointing doubles
# the FLOPs (forward recompute) and zeroes the stored activations.
_COST_ROWS: dict[str, tuple[Fraction, Fraction, int]] = {
    # kind: (intermediate factor, flops/BSH, memory elements/BSH)
    "relu": (Fraction(4), Fraction(4), 4),
    "gelu": (Fraction(4), Fraction(72), 10),
    "swiglu": (Fraction(8, 3), Fraction(112, 3), 8),
    "relu2": (Fraction(4), Fraction(8), 8),
    "polynorm": (Fraction(4), Fraction(72), 12),
    "polyrelu": (Fraction(4), Fraction(40), 8),
}

COST_KINDS = tuple(_COST_ROWS)

_BYTES_PER_ELEMENT = 2  # 16-bit training precision assumed by the figures


@dataclass
class CostReport:
    kind: str
    B: int
    S: int
    H: int
    checkpointing: bool
    intermediate_size: Fraction      # in absolute units for the given H
    flops_activation: Fraction       # absolute FLOPs count
    flops_per_bsh: Fraction          # the closed-form coefficient
    flops_ratio: Fraction            # activation FLOPs / 24*B*S*H^2
    memory_overhead_bytes: int

    def ratio_percent(self) -> str:
        return f"{float(self.flops_ratio) * 100:.2g}%"


def activation_cost(kind: str, B: int, S: int, H: int,
                    checkpointing: bool = False) -> CostReport:
    """Closed-form activation cost of one feed-forward layer."""
    if kind not in _COST_ROWS:
        raise ValueError(f"unknown activation kind {kind!r}; "
                         f"expected one of {COST_KINDS}")
    if min(B, S, H) < 1:
        raise ValueError("B, S, H must be positive")
    inter, flops_bsh, mem_elems = _COST_ROWS[kind]
    if checkpointing:
        flops_bsh = flops_bsh * 2
        mem_elems = 0
    bsh = B * S * H
    return CostReport(
        kind=kind, B=B, S=S, H=H, checkpointing=checkpointing,
        intermediate_size=inter * H,
        flops_activation=flops_bsh * bsh,
        flops_per_bsh=flops_bsh,
        flops_ratio=flops_bsh / (24 * H),
        memory_overhead_bytes=mem_elems * bsh * _BYTES_PER_ELEMENT,
    )


def cost_table(B: int, S: int, H: int, checkpointing: bool = False) -> list[CostReport]:
    return [activation_cost(k, B, S, H, checkpointing) for k in COST_KINDS]


# ---------------------------------------------------------------------------
# CSV emission (headers are part of the stable interface)

RANK_CSV_HEADER = ["layer", "matrix", "effective_rank", "full_rank"]
COST_CSV_HEADER = ["Method", "Intermediate Size", "FLOPs for activation",
                   "FLOPs ratio", "Memory Overhead"]


def rank_reports_csv(reports: list[RankReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(RANK_CSV_HEADER)
    for r in reports:
        w.writerow([r.layer, r.matrix, repr(r.effective_rank), r.full_rank])
    return buf.getvalue()


def similarity_csv(sim: SimilarityMatrix) -> str:
    L = sim.values.shape[0]
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["layer"] + [f"layer_{j}" for j in range(L)])
    for i in range(L):
        w.writerow([f"layer_{i}"] + [repr(float(v)) for v in sim.values[i]])
    return buf.getvalue()


def cost_csv(reports: list[CostReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(COST_CSV_HEADER)
    for r in reports:
        w.writerow([r.kind, str(r.intermediate_size),
                    str(r.flops_activation), str(r.flops_ratio),
                    r.memory_overhead_bytes])
    return buf.getvalue()
