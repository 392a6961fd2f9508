"""Training loop: AdamW, warmup+cosine schedule, clipping, byte-level data.

A byte-level tokenizer (ids 0-255 plus one reserved special) stands in for
a subword vocabulary; sequences are random contiguous windows of the train
split, drawn from a seeded generator so identical seeds give bitwise
identical loss trajectories. Non-finite losses or gradients abort with a
diagnostic rather than propagating.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .transformer import Model, save_checkpoint

__all__ = [
    "TrainConfig",
    "MetricsRecord",
    "NumericalAbort",
    "cosine_lr",
    "AdamW",
    "clip_grad_norm",
    "CharCorpus",
    "char_corpus",
    "sample_batch",
    "train_loop",
    "metrics_csv",
    "load_config_file",
    "METRICS_CSV_HEADER",
]

BYTE_VOCAB_SIZE = 257  # 256 byte values + one reserved special (<bos>)
BOS_ID = 256


class NumericalAbort(RuntimeError):
    """Training hit NaN/Inf; carries (step, lr, grad_norm) diagnostics."""

    def __init__(self, message: str, step: int, lr: float, grad_norm: float):
        super().__init__(f"{message} (step={step}, lr={lr:.3e}, "
                         f"grad_norm={grad_norm:.3e})")
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm


@dataclass
class TrainConfig:
    """Optimization hyperparameters; defaults mirror the dense-model recipe."""

    peak_lr: float = 3e-4
    min_lr: float = 3e-5
    warmup_steps: int | None = None
    warmup_tokens: int | None = None
    total_steps: int = 2000
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 16
    seq_len: int = 64
    seed: int = 0
    eval_interval: int = 100
    eval_batches: int = 8

    def __post_init__(self):
        if self.warmup_tokens is not None and self.warmup_steps is not None:
            raise ValueError("give warmup in steps or tokens, not both")
        if self.warmup_tokens is not None:
            per_step = self.batch_size * self.seq_len
            self.warmup_steps = math.ceil(self.warmup_tokens / per_step)
        elif self.warmup_steps is None:
            self.warmup_steps = 100  # toy-scale default
        if not 0.0 < self.min_lr <= self.peak_lr:
            raise ValueError("need 0 < min_lr <= peak_lr")
        if self.total_steps < 0:
            raise ValueError("total_steps must be nonnegative")
        # zero-step runs (evaluation only) carry no warmup
        ceiling = self.total_steps if self.total_steps else 1
        if not 0 <= self.warmup_steps < ceiling:
            raise ValueError("need 0 <= warmup < total_steps")
        if self.clip_norm <= 0.0:
            raise ValueError("clip_norm must be positive")
        if min(self.batch_size, self.seq_len) < 1:
            raise ValueError("batch_size and seq_len must be positive")


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> peak over warmup, then cosine decay peak -> min."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    w = cfg.warmup_steps
    if w > 0 and step < w:
        return cfg.peak_lr * step / w
    tau = (step - w) / (cfg.total_steps - w)
    return cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * tau))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float = 1.0) -> float:
    """Scale all grads in place if their global L2 norm exceeds max_norm.

    Returns the pre-clip norm.
    """
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


class AdamW:
    """Bias-corrected Adam with decoupled weight decay.

    Parameters whose names mark them as normalization gains or activation
    coefficients are excluded from decay, so their update is plain Adam.
    """

    NO_DECAY_MARKERS = ("norm", "coeffs")

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.decay_mask = {k: not any(mark in k for mark in self.NO_DECAY_MARKERS)
                           for k in params}

    def step(self, lr: float) -> None:
        cfg = self.cfg
        # validate first so a non-finite gradient aborts the whole step
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NumericalAbort(f"non-finite gradient in {name}",
                                     self.t, lr, float("nan"))
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
            if self.decay_mask[name] and cfg.weight_decay:
                update = update + cfg.weight_decay * p.data
            p.data = p.data - lr * update

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# data


@dataclass
class CharCorpus:
    train: np.ndarray  # int64 token ids
    val: np.ndarray
    vocab_size: int = BYTE_VOCAB_SIZE

    @staticmethod
    def encode(text: str) -> np.ndarray:
        return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)

    @staticmethod
    def decode(ids) -> str:
        ids = np.asarray(ids)
        return bytes(int(i) for i in ids if i < 256).decode("utf-8",
                                                            errors="replace")


def char_corpus(path, split_frac: float = 0.9) -> CharCorpus:
    """Byte-level corpus with a contiguous train/val split."""
    data = Path(path).read_bytes()
    if not data:
        raise ValueError(f"corpus file {path} is empty")
    if not 0.0 < split_frac < 1.0:
        raise ValueError("split_frac must be in (0, 1)")
    ids = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    cut = int(len(ids) * split_frac)
    if cut == 0 or cut == len(ids):
        raise ValueError("split leaves an empty train or val side")
    return CharCorpus(train=ids[:cut], val=ids[cut:])


def sample_batch(split: np.ndarray, batch_size: int, seq_len: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random contiguous windows; returns (inputs, next-token targets)."""
    if len(split) < seq_len + 1:
        raise ValueError("split shorter than one sequence window")
    starts = rng.integers(0, len(split) - seq_len, size=batch_size)
    rows = np.stack([split[s:s + seq_len + 1] for s in starts])
    return rows[:, :-1], rows[:, 1:]


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRecord:
    step: int
    tokens_seen: int
    train_loss: float
    val_loss: float
    val_ppl: float
    lr: float
    grad_norm: float
    wall_ms: float

    def __post_init__(self):
        if not math.isclose(self.val_ppl, math.exp(self.val_loss),
                            rel_tol=1e-9):
            raise ValueError("val_ppl must equal exp(val_loss)")

    def to_json(self) -> str:
        return json.dumps(asdict(self))


METRICS_CSV_HEADER = ["step", "tokens_seen", "train_loss", "val_loss",
                      "val_ppl", "lr", "grad_norm", "wall_ms"]


def metrics_csv(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(METRICS_CSV_HEADER)
    for r in records:
        w.writerow([r.step, r.tokens_seen, repr(r.train_loss),
                    repr(r.val_loss), repr(r.val_ppl), repr(r.lr),
                    repr(r.grad_norm), repr(r.wall_ms)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# the loop


def _mean_val_loss(model: Model, batches) -> float:
    with T.no_grad():
        losses = [model.loss(x, y).item() for x, y in batches]
    return float(np.mean(losses))


def train_loop(model: Model, corpus: CharCorpus, cfg: TrainConfig,
               out_dir=None) -> Iterator[MetricsRecord]:
    """Run the optimization and yield metric records at the eval cadence.

    Records appear at step 0 (initial evaluation), every ``eval_interval``
    steps, and at the final step; the final checkpoint is written to
    ``out_dir`` when given. Identical seeds reproduce the loss trajectory
    bitwise. A NaN/Inf loss aborts with step, lr, and gradient-norm
    diagnostics.
    """
    rng = np.random.default_rng(cfg.seed)
    val_rng = np.random.default_rng(cfg.seed + 1)
    val_batches = [sample_batch(corpus.val, cfg.batch_size, cfg.seq_len, val_rng)
                   for _ in range(cfg.eval_batches)]
    opt = AdamW(model.params, cfg)
    t_start = time.monotonic()

    def record(step, train_loss, lr, grad_norm):
        vloss = _mean_val_loss(model, val_batches)
        return MetricsRecord(
            step=step, tokens_seen=step * cfg.batch_size * cfg.seq_len,
            train_loss=train_loss, val_loss=vloss, val_ppl=math.exp(vloss),
            lr=lr, grad_norm=grad_norm,
            wall_ms=(time.monotonic() - t_start) * 1e3)

    with T.no_grad():
        x0, y0 = sample_batch(corpus.train, cfg.batch_size, cfg.seq_len,
                              np.random.default_rng(cfg.seed + 2))
        init_train = model.loss(x0, y0).item()
    yield record(0, init_train, 0.0, 0.0)

    train_loss = init_train
    grad_norm = 0.0
    lr = 0.0
    for step in range(1, cfg.total_steps + 1):
        x, y = sample_batch(corpus.train, cfg.batch_size, cfg.seq_len, rng)
        with T.tape():
            loss = model.loss(x, y)
            train_loss = loss.item()
            if not math.isfinite(train_loss):
                raise NumericalAbort("training loss is not finite",
                                     step, lr, grad_norm)
            T.backward(loss)
        grads = [p.grad for p in model.params.values() if p.grad is not None]
        grad_norm = clip_grad_norm(grads, cfg.clip_norm)
        lr = cosine_lr(step, cfg)
        opt.step(lr)
        opt.zero_grad()
        if step % cfg.eval_interval == 0 or step == cfg.total_steps:
            yield record(step, train_loss, lr, grad_norm)

    if out_dir is not None:
        save_checkpoint(model, Path(out_dir) / "checkpoint")


# ---------------------------------------------------------------------------
# flat key=value config files


def _parse_scalar(raw: str):
    raw = raw.strip()
    if raw.startswith('"') and raw.endswith('"') and len(raw) >= 2:
        return raw[1:-1]
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def load_config_file(path, allowed_keys: set[str]) -> dict:
    """Parse a flat ``key = value`` file; unknown keys are rejected by name."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in allowed_keys:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_scalar(raw)
    return values
