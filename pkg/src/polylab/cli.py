"""Command-line entry point: train, analyze, theory, flops.

Every run writes a manifest (resolved config, seed, input content hash,
output directory) before any computation starts, so a run directory is
self-describing and reproducible. Exit codes: 0 success, 1 usage or
configuration error, 2 numerical abort (NaN/Inf).

The output root defaults to the current directory and can be moved with
the POLYLAB_OUT environment variable; --out overrides both.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .activations import ACTIVATION_KINDS
from .analysis import (
    COST_KINDS,
    RankReport,
    activation_cost,
    cost_csv,
    cost_table,
    effective_rank,
    layer_similarity,
    rank_reports_csv,
    similarity_csv,
)
from .netconstruct import (
    build_grid_approximator,
    grid_net,
    grid_resolution_for_eps,
    polyrelu_lipschitz,
    random_admissible_polyrelu_net,
    relu_approx_polyrelu,
    relu_approx_polyrelu_net,
    relu_approx_square,
)
from .tensor import NonFiniteError
from .trainer import (
    CharCorpus,
    NumericalAbort,
    TrainConfig,
    char_corpus,
    load_config_file,
    metrics_csv,
    sample_batch,
    train_loop,
)
from .transformer import (
    CheckpointMismatch,
    Model,
    TransformerConfig,
    load_checkpoint,
)

THEORY_AUDITS = ("square-rate", "polyrelu-rate", "polyrelu-net", "grid-rate")
THEORY_CSV_HEADER = ["eps", "size", "depth", "n_params", "measured_error"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


class UsageError(ValueError):
    pass


def _out_root() -> Path:
    return Path(os.environ.get("POLYLAB_OUT", "."))


def _git_blob_hash(path: Path) -> str:
    data = path.read_bytes()
    h = hashlib.sha1()
    h.update(f"blob {len(data)}\0".encode())
    h.update(data)
    return h.hexdigest()


_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_MODEL_KEYS = {"n_layers", "d_model", "n_heads", "context_length",
               "vocab_size", "activation", "order", "intermediate_size"}


def _resolve_train_configs(args) -> tuple[TransformerConfig, TrainConfig]:
    values: dict = {}
    if args.config:
        values = load_config_file(args.config, _TRAIN_KEYS | _MODEL_KEYS)
    for key in sorted(_TRAIN_KEYS | _MODEL_KEYS):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    model_kwargs = {k: v for k, v in values.items() if k in _MODEL_KEYS}
    train_kwargs = {k: v for k, v in values.items() if k in _TRAIN_KEYS}
    model_kwargs.setdefault("n_layers", 2)
    model_kwargs.setdefault("d_model", 64)
    model_kwargs.setdefault("n_heads", 4)
    model_kwargs.setdefault("vocab_size", CharCorpus.vocab_size)
    model_kwargs.setdefault("context_length",
                            train_kwargs.get("seq_len", 64))
    mcfg = TransformerConfig(**model_kwargs)
    tcfg = TrainConfig(**train_kwargs)
    if tcfg.seq_len > mcfg.context_length:
        raise UsageError("seq_len exceeds the model context length")
    return mcfg, tcfg


def cmd_train(args) -> int:
    if not args.corpus:
        raise UsageError("missing corpus path: pass --corpus FILE")
    corpus_path = Path(args.corpus)
    if not corpus_path.exists():
        raise UsageError(f"--corpus file not found: {corpus_path}")
    mcfg, tcfg = _resolve_train_configs(args)
    out_dir = Path(args.out) if args.out else _out_root() / "run"
    out_dir.mkdir(parents=True, exist_ok=True)

    model = Model(mcfg, rng=np.random.default_rng(tcfg.seed))
    coeffs_init = None
    if mcfg.activation in ("polyrelu", "polynorm"):
        coeffs_init = list(model.specs[0].coeffs.values())
    manifest = {
        "command": "train",
        "model_config": dataclasses.asdict(mcfg),
        "train_config": dataclasses.asdict(tcfg),
        "seed": tcfg.seed,
        "coeffs_init": coeffs_init,
        "baseline_intermediate_size": 4 * mcfg.d_model,
        "corpus": str(corpus_path),
        "corpus_hash": _git_blob_hash(corpus_path),
        "out_dir": str(out_dir),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))

    corpus = char_corpus(corpus_path, split_frac=args.split_frac)
    records = []
    with (out_dir / "metrics.jsonl").open("w") as jf:
        for rec in train_loop(model, corpus, tcfg, out_dir=out_dir):
            records.append(rec)
            jf.write(rec.to_json() + "\n")
            jf.flush()
            if not args.quiet:
                print(f"step {rec.step:6d}  train {rec.train_loss:.4f}  "
                      f"val {rec.val_loss:.4f}  ppl {rec.val_ppl:.2f}  "
                      f"lr {rec.lr:.3e}")
    (out_dir / "metrics.csv").write_text(metrics_csv(records))
    print(f"run complete: {out_dir}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    cfg = model.config
    out_dir = Path(args.out) if args.out else ckpt.parent

    reports = []
    for i in range(cfg.n_layers):
        for tag, name in (("W_up", f"layer{i}.ffn.w_up"),
                          ("W_down", f"layer{i}.ffn.w_down")):
            w = model.params[name].data
            reports.append(RankReport(
                layer=i, matrix=tag, effective_rank=effective_rank(w),
                full_rank=min(w.shape)))
    (out_dir / "ranks.csv").write_text(rank_reports_csv(reports))

    if not args.data:
        raise UsageError("missing corpus path: pass --data FILE")
    corpus = char_corpus(args.data, split_frac=args.split_frac)
    rng = np.random.default_rng(args.seed)
    seq = min(cfg.context_length, max(2, len(corpus.val) - 1))
    hiddens_sum = None
    collected = [[] for _ in range(cfg.n_layers)]
    from . import tensor as T
    with T.no_grad():
        for _ in range(args.eval_batches):
            x, _ = sample_batch(corpus.val, args.batch_size, seq, rng)
            _, hiddens = model.forward(x)
            for li, h in enumerate(hiddens):
                collected[li].append(h.data)
    states = [np.concatenate(parts, axis=0) for parts in collected]
    sim = layer_similarity(states)
    (out_dir / "similarity.csv").write_text(similarity_csv(sim))
    print(f"analysis written: {out_dir / 'ranks.csv'}, "
          f"{out_dir / 'similarity.csv'}")
    return EXIT_OK


def _theory_rows(audit: str, eps_list: list[float], seed: int) -> list[dict]:
    rows = []
    if audit == "square-rate":
        grid = np.linspace(0.0, 1.0, 10001)[:, None]
        target = grid[:, 0] ** 2
        for eps in eps_list:
            net = relu_approx_square(eps)
            err = float(np.abs(net.eval(grid)[:, 0] - target).max())
            rows.append({"eps": eps, "net": net, "err": err})
    elif audit == "polyrelu-rate":
        a = np.array([0.0, 1 / 3, 1 / 3, 1 / 3])
        grid = np.linspace(-1.0, 1.0, 10001)[:, None]
        t = np.maximum(grid[:, 0], 0.0)
        target = a[1] * t + a[2] * t ** 2 + a[3] * t ** 3
        for eps in eps_list:
            net = relu_approx_polyrelu(a, eps)
            err = float(np.abs(net.eval(grid)[:, 0] - target).max())
            rows.append({"eps": eps, "net": net, "err": err})
    elif audit == "polyrelu-net":
        rng = np.random.default_rng(seed)
        pnet = random_admissible_polyrelu_net(rng, 2, [4, 1], order=3)
        x = rng.uniform(-1.0, 1.0, size=(10000, 2))
        want = pnet.eval(x)
        for eps in eps_list:
            net = relu_approx_polyrelu_net(pnet, eps)
            err = float(np.abs(net.eval(x) - want).max())
            rows.append({"eps": eps, "net": net, "err": err})
    elif audit == "grid-rate":
        grid = np.linspace(-1.0, 1.0, 10001)[:, None]
        target = np.sin(math.pi * grid[:, 0]) / math.pi ** 3

        def oracle(alpha, pt):
            k = alpha[0]
            return math.pi ** (k - 3) * math.sin(math.pi * pt[0]
                                                 + k * math.pi / 2)

        for eps in eps_list:
            N = grid_resolution_for_eps(eps, 1, 3)
            g = build_grid_approximator(oracle, 1, 3, N)
            net = grid_net(g)
            err = float(np.abs(net.eval(grid)[:, 0] - target).max())
            rows.append({"eps": eps, "net": net, "err": err})
    else:
        raise UsageError(f"unknown audit {audit!r}; "
                         f"expected one of {THEORY_AUDITS}")
    return rows


def theory_csv(rows: list[dict]) -> str:
    lines = [",".join(THEORY_CSV_HEADER)]
    for r in rows:
        net = r["net"]
        lines.append(f"{r['eps']!r},{net.size()},{net.depth()},"
                     f"{net.n_params()},{r['err']!r}")
    return "\n".join(lines) + "\n"


def cmd_theory(args) -> int:
    eps_list = [float(tok) for tok in args.eps.split(",") if tok]
    if not eps_list:
        raise UsageError("--eps needs a comma-separated list of tolerances")
    rows = _theory_rows(args.audit, eps_list, args.seed)
    out = theory_csv(rows)
    if args.out:
        Path(args.out).write_text(out)
        print(f"audit written: {args.out}")
    else:
        print(out, end="")
    return EXIT_OK


def cmd_flops(args) -> int:
    if args.kind == "all":
        reports = cost_table(args.B, args.S, args.H, args.ckpt)
    else:
        reports = [activation_cost(args.kind, args.B, args.S, args.H,
                                   args.ckpt)]
    out = cost_csv(reports)
    if args.out:
        Path(args.out).write_text(out)
    else:
        print(out, end="")
    for r in reports:
        print(f"{r.kind}: ratio {r.ratio_percent()}, "
              f"memory {r.memory_overhead_bytes} bytes")
    return EXIT_OK


def build_parser() -> _Parser:
    p = _Parser(prog="polylab",
                description="polynomial-composition activation laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a toy model", add_help=True)
    tr.add_argument("--corpus", help="UTF-8 text file for byte-level training")
    tr.add_argument("--config", help="key = value config file")
    tr.add_argument("--out", help="run directory")
    tr.add_argument("--split-frac", type=float, default=0.9,
                    dest="split_frac")
    tr.add_argument("--quiet", action="store_true")
    tr.add_argument("--activation", choices=ACTIVATION_KINDS)
    tr.add_argument("--order", type=int)
    for name in ("n_layers", "d_model", "n_heads", "context_length",
                 "vocab_size", "intermediate_size", "total_steps",
                 "warmup_steps", "warmup_tokens", "batch_size", "seq_len",
                 "seed", "eval_interval", "eval_batches"):
        tr.add_argument(f"--{name.replace('_', '-')}", type=int, dest=name)
    for name in ("peak_lr", "min_lr", "weight_decay", "beta1", "beta2",
                 "clip_norm"):
        tr.add_argument(f"--{name.replace('_', '-')}", type=float, dest=name)
    tr.set_defaults(fn=cmd_train)

    an = sub.add_parser("analyze", help="rank and similarity reports")
    an.add_argument("--checkpoint", required=True)
    an.add_argument("--data", help="corpus file for hidden-state batches")
    an.add_argument("--out")
    an.add_argument("--batch-size", type=int, default=8, dest="batch_size")
    an.add_argument("--eval-batches", type=int, default=8,
                    dest="eval_batches")
    an.add_argument("--split-frac", type=float, default=0.9,
                    dest="split_frac")
    an.add_argument("--seed", type=int, default=0)
    an.set_defaults(fn=cmd_analyze)

    th = sub.add_parser("theory", help="construction rate audits")
    th.add_argument("audit", help=f"one of {', '.join(THEORY_AUDITS)}")
    th.add_argument("--eps", required=True,
                    help="comma-separated tolerance list")
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--out")
    th.set_defaults(fn=cmd_theory)

    fl = sub.add_parser("flops", help="activation cost table")
    fl.add_argument("--kind", default="all",
                    choices=COST_KINDS + ("all",))
    fl.add_argument("--B", type=int, default=4)
    fl.add_argument("--S", type=int, default=4096)
    fl.add_argument("--H", type=int, default=1024)
    fl.add_argument("--ckpt", action="store_true")
    fl.add_argument("--out")
    fl.set_defaults(fn=cmd_flops)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, CheckpointMismatch, ValueError) as exc:
        print(f"polylab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalAbort, NonFiniteError) as exc:
        print(f"polylab: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
