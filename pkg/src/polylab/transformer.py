"""Toy pre-norm causal decoder with swappable feed-forward activations.

The feed-forward sublayer computes rho(x W_up) W_down for any elementwise
activation rho, or (silu(x W_gate) * (x W_up)) W_down for the gated kind.
Intermediate sizing keeps total parameters matched across activations:
4*H for the non-gated kinds and ~(8/3)*H (nearest multiple of n_heads) for
the gated one, making the feed-forward block 8*H^2 weights either way.

Architecture choices at toy scale: RMS pre-norm with learnable gains,
learned absolute position embeddings, bias-free projections, untied output
head. All weight matrices and embeddings draw from a normal with
std = 1/sqrt(2.5 * d_model); per-layer polynomial coefficients use their
standard initialization.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .activations import (
    ActivationSpec,
    POLY_KINDS,
    apply_activation,
    init_coeffs,
    make_spec,
    swiglu,
)
from .tensor import Tensor

__all__ = [
    "TransformerConfig",
    "Model",
    "ffn_forward",
    "causal_mask",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointMismatch",
]

_NORM_EPS = 1e-6
_MASK_VALUE = -1e30


class CheckpointMismatch(ValueError):
    """Checkpoint contents do not match the configuration that owns them."""


def swiglu_intermediate(d_model: int, n_heads: int) -> int:
    """Nearest multiple of n_heads to (8/3)*H, the parameter-parity size."""
    return n_heads * round(8 * d_model / (3 * n_heads))


@dataclass
class TransformerConfig:
    n_layers: int
    d_model: int
    n_heads: int
    context_length: int
    vocab_size: int
    activation: str = "relu"
    order: int = 3
    act_eps: float = 1e-6
    intermediate_size: int | None = None

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.n_layers, self.context_length, self.vocab_size) < 1:
            raise ValueError("layers, context length, and vocab must be positive")
        make_spec(self.activation, self.order)  # validates the kind
        if self.intermediate_size is None:
            if self.activation == "swiglu":
                self.intermediate_size = swiglu_intermediate(
                    self.d_model, self.n_heads)
            else:
                self.intermediate_size = 4 * self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def causal_mask(seq: int) -> np.ndarray:
    """Additive [S, S] mask: 0 on and below the diagonal, -1e30 above."""
    m = np.zeros((seq, seq))
    m[np.triu_indices(seq, k=1)] = _MASK_VALUE
    return m


def ffn_forward(x: Tensor, spec: ActivationSpec, w_up: Tensor, w_down: Tensor,
                w_gate: Tensor | None = None) -> Tensor:
    """Feed-forward sublayer rho(x W_up) W_down with any activation.

    For the gated kind the two projected streams combine as
    silu(x W_gate) * (x W_up) before the down projection. The trailing
    (intermediate) axis is the normalization axis for the normalized
    polynomial composite.
    """
    u = T.matmul(x, w_up)
    if spec.is_gated:
        if w_gate is None:
            raise ValueError("gated activation needs the gate projection")
        h = swiglu(T.matmul(x, w_gate), u)
    else:
        h = apply_activation(u, spec)
    return T.matmul(h, w_down)


class Model:
    """Decoder-only transformer; parameters are a flat named dict."""

    def __init__(self, config: TransformerConfig,
                 rng: np.random.Generator | None = None):
        self.config = config
        self.params: dict[str, Tensor] = {}
        if rng is None:
            rng = np.random.default_rng(0)
        std = 1.0 / np.sqrt(2.5 * config.d_model)

        def mat(name, shape):
            self.params[name] = Tensor(rng.normal(0.0, std, size=shape),
                                       requires_grad=True)

        def gain(name, dim):
            self.params[name] = Tensor(np.ones(dim), requires_grad=True)

        cfg = config
        mat("embed.tok", (cfg.vocab_size, cfg.d_model))
        mat("embed.pos", (cfg.context_length, cfg.d_model))
        self.specs: list[ActivationSpec] = []
        for i in range(cfg.n_layers):
            p = f"layer{i}."
            gain(p + "norm1.g", cfg.d_model)
            mat(p + "attn.wq", (cfg.d_model, cfg.d_model))
            mat(p + "attn.wk", (cfg.d_model, cfg.d_model))
            mat(p + "attn.wv", (cfg.d_model, cfg.d_model))
            mat(p + "attn.wo", (cfg.d_model, cfg.d_model))
            gain(p + "norm2.g", cfg.d_model)
            if cfg.activation == "swiglu":
                mat(p + "ffn.w_gate", (cfg.d_model, cfg.intermediate_size))
            mat(p + "ffn.w_up", (cfg.d_model, cfg.intermediate_size))
            mat(p + "ffn.w_down", (cfg.intermediate_size, cfg.d_model))
            if cfg.activation in POLY_KINDS:
                coeffs = init_coeffs(cfg.order, eps=cfg.act_eps)
                self.params[p + "ffn.coeffs"] = coeffs.a
                self.specs.append(ActivationSpec(cfg.activation, coeffs))
            else:
                self.specs.append(ActivationSpec(cfg.activation))
        gain("final_norm.g", cfg.d_model)
        mat("head.w", (cfg.d_model, cfg.vocab_size))

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _norm(self, x: Tensor, gain_name: str) -> Tensor:
        return T.mul(T.rms_norm(x, eps=_NORM_EPS), self.params[gain_name])

    def _attention(self, x: Tensor, prefix: str, mask: np.ndarray) -> Tensor:
        cfg = self.config
        B, S, H = x.shape
        nh, hd = cfg.n_heads, cfg.head_dim

        def heads(name):
            proj = T.matmul(x, self.params[prefix + name])
            return T.swap_axes(T.reshape(proj, (B, S, nh, hd)), 1, 2)

        q, k, v = heads("attn.wq"), heads("attn.wk"), heads("attn.wv")
        scores = T.mul_const(T.matmul(q, T.transpose_last2(k)),
                             1.0 / np.sqrt(hd))
        att = T.softmax_last(T.add(scores, Tensor(mask)))
        ctx = T.reshape(T.swap_axes(T.matmul(att, v), 1, 2), (B, S, H))
        return T.matmul(ctx, self.params[prefix + "attn.wo"])

    def forward(self, tokens: np.ndarray) -> tuple[Tensor, list[Tensor]]:
        """Logits [B, S, V] plus the per-layer hidden states [B, S, H]."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError("tokens must be [batch, seq]")
        B, S = tokens.shape
        cfg = self.config
        if S > cfg.context_length:
            raise ValueError(
                f"sequence length {S} exceeds context {cfg.context_length}")
        if tokens.max() >= cfg.vocab_size or tokens.min() < 0:
            raise ValueError("token id out of range")
        mask = causal_mask(S)
        h = T.add(T.embedding(self.params["embed.tok"], tokens),
                  T.embedding(self.params["embed.pos"], np.arange(S)))
        hiddens: list[Tensor] = []
        for i in range(cfg.n_layers):
            p = f"layer{i}."
            h = T.add(h, self._attention(self._norm(h, p + "norm1.g"), p, mask))
            gate = self.params.get(p + "ffn.w_gate")
            ff = ffn_forward(self._norm(h, p + "norm2.g"), self.specs[i],
                             self.params[p + "ffn.w_up"],
                             self.params[p + "ffn.w_down"], gate)
            h = T.add(h, ff)
            hiddens.append(h)
        logits = T.matmul(self._norm(h, "final_norm.g"), self.params["head.w"])
        return logits, hiddens

    def loss(self, inputs: np.ndarray, targets: np.ndarray) -> Tensor:
        """Mean next-token cross entropy; targets align with inputs."""
        logits, _ = self.forward(inputs)
        B, S, V = logits.shape
        flat = T.reshape(logits, (B * S, V))
        return T.cross_entropy_mean(flat, np.asarray(targets).reshape(-1))


# ---------------------------------------------------------------------------
# checkpoint format: params.bin (little-endian float64) + manifest.json


def save_checkpoint(model: Model, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    blob = bytearray()
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape),
                        "dtype": "float64", "offset": len(blob)})
        blob.extend(raw)
    manifest = {"format": "polylab-checkpoint-v1", "byte_order": "little",
                "config": asdict(model.config), "params": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    (directory / "params.bin").write_bytes(bytes(blob))


def load_checkpoint(directory) -> Model:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != "polylab-checkpoint-v1":
        raise CheckpointMismatch("unrecognized checkpoint format")
    cfg = TransformerConfig(**manifest["config"])
    model = Model(cfg, rng=np.random.default_rng(0))
    blob = (directory / "params.bin").read_bytes()
    saved = {e["name"]: e for e in manifest["params"]}
    if set(saved) != set(model.params):
        missing = set(model.params) ^ set(saved)
        raise CheckpointMismatch(f"parameter names do not match config: {missing}")
    for name, p in model.params.items():
        e = saved[name]
        shape = tuple(e["shape"])
        if shape != p.shape:
            raise CheckpointMismatch(
                f"{name}: checkpoint shape {shape} != config shape {p.shape}")
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=e["offset"])
        p.data = arr.reshape(shape).astype(np.float64)
    return model
