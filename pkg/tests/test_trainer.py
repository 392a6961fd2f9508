"""Optimizer, schedule, data plumbing, and the loop's reproducibility."""

import math

import numpy as np
import pytest

from polylab.tensor import Tensor
from polylab.trainer import (
    AdamW,
    BYTE_VOCAB_SIZE,
    CharCorpus,
    MetricsRecord,
    NumericalAbort,
    TrainConfig,
    char_corpus,
    clip_grad_norm,
    cosine_lr,
    load_config_file,
    metrics_csv,
    METRICS_CSV_HEADER,
    sample_batch,
    train_loop,
)
from polylab.transformer import Model, TransformerConfig


def _tcfg(**kw):
    base = dict(peak_lr=3e-4, min_lr=3e-5, warmup_steps=100, total_steps=1000,
                batch_size=4, seq_len=16, seed=0, eval_interval=50,
                eval_batches=2)
    base.update(kw)
    return TrainConfig(**base)


def _toy_model(activation="relu", seed=0, **kw):
    cfg = TransformerConfig(n_layers=2, d_model=32, n_heads=4,
                            context_length=16, vocab_size=BYTE_VOCAB_SIZE,
                            activation=activation, **kw)
    return Model(cfg, np.random.default_rng(seed))


class TestCosineSchedule:
    def test_boundary_values(self):
        cfg = _tcfg()
        assert cosine_lr(cfg.warmup_steps, cfg) == pytest.approx(3e-4)
        assert cosine_lr(cfg.total_steps, cfg) == pytest.approx(3e-5)

    def test_midpoint(self):
        cfg = _tcfg(warmup_steps=0, total_steps=1000)
        assert cosine_lr(500, cfg) == pytest.approx((3e-4 + 3e-5) / 2)

    def test_linear_warmup(self):
        cfg = _tcfg(warmup_steps=100)
        assert cosine_lr(0, cfg) == 0.0
        assert cosine_lr(50, cfg) == pytest.approx(1.5e-4)

    def test_warmup_tokens_unit(self):
        cfg = TrainConfig(warmup_tokens=6400, batch_size=4, seq_len=16,
                          total_steps=1000)
        assert cfg.warmup_steps == 100  # 6400 / (4 * 16)

    def test_both_warmup_units_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(warmup_steps=10, warmup_tokens=100)

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            _tcfg(min_lr=1e-3, peak_lr=1e-4)
        with pytest.raises(ValueError):
            _tcfg(warmup_steps=1000, total_steps=1000)
        with pytest.raises(ValueError):
            _tcfg(clip_norm=0.0)


class TestClip:
    def test_scales_when_over(self):
        g1 = np.array([2.0, 0.0])
        g2 = np.array([0.0, 0.0])
        norm = clip_grad_norm([g1, g2], 1.0)
        assert norm == pytest.approx(2.0)
        np.testing.assert_allclose(g1, [1.0, 0.0])

    def test_untouched_when_under(self):
        g = np.array([0.3, 0.4])
        norm = clip_grad_norm([g], 1.0)
        assert norm == pytest.approx(0.5)
        np.testing.assert_array_equal(g, [0.3, 0.4])

    def test_three_four_five(self):
        g = np.array([3.0, 4.0])
        norm = clip_grad_norm([g], 1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(g, [0.6, 0.8])


class TestAdamW:
    def _one_param(self, value, wd=0.1):
        p = Tensor(np.array([value]), requires_grad=True)
        cfg = _tcfg(weight_decay=wd)
        opt = AdamW({"w": p}, cfg)
        return p, opt

    def test_hand_executed_first_step(self):
        # m_hat = v_hat = 1 after one unit-gradient step, so
        # theta' = 1 - 0.1 * (1/(1 + 1e-8) + 0.1 * 1) = 0.89 (to 1e-9)
        p, opt = self._one_param(1.0)
        p.grad = np.array([1.0])
        opt.step(lr=0.1)
        assert p.data[0] == pytest.approx(0.89, abs=1e-9)

    def test_zero_grad_no_decay_keeps_param(self):
        p, opt = self._one_param(1.0, wd=0.0)
        p.grad = np.array([0.0])
        opt.step(lr=0.1)
        assert p.data[0] == 1.0

    def test_identical_params_update_identically(self):
        a = Tensor(np.array([0.5]), requires_grad=True)
        b = Tensor(np.array([0.5]), requires_grad=True)
        opt = AdamW({"a": a, "b": b}, _tcfg())
        a.grad = np.array([0.7])
        b.grad = np.array([0.7])
        opt.step(lr=0.01)
        assert a.data[0] == b.data[0]

    def test_nonfinite_grad_aborts_atomically(self):
        a = Tensor(np.array([1.0]), requires_grad=True)
        b = Tensor(np.array([1.0]), requires_grad=True)
        opt = AdamW({"a": a, "z": b}, _tcfg())
        a.grad = np.array([1.0])
        b.grad = np.array([np.nan])
        with pytest.raises(NumericalAbort):
            opt.step(lr=0.1)
        assert a.data[0] == 1.0  # nothing moved

    def test_coeffs_and_norms_excluded_from_decay(self):
        cfg = _tcfg(weight_decay=0.5)
        names = ["layer0.ffn.coeffs", "final_norm.g", "head.w"]
        params = {n: Tensor(np.array([1.0]), requires_grad=True)
                  for n in names}
        opt = AdamW(params, cfg)
        assert not opt.decay_mask["layer0.ffn.coeffs"]
        assert not opt.decay_mask["final_norm.g"]
        assert opt.decay_mask["head.w"]

    def test_excluded_update_equals_pure_adam(self):
        cfg_wd = _tcfg(weight_decay=0.5)
        cfg_nowd = _tcfg(weight_decay=0.0)
        a = Tensor(np.array([0.8]), requires_grad=True)
        b = Tensor(np.array([0.8]), requires_grad=True)
        opt_a = AdamW({"ffn.coeffs": a}, cfg_wd)
        opt_b = AdamW({"ffn.coeffs": b}, cfg_nowd)
        for _ in range(3):
            a.grad = np.array([0.3])
            b.grad = np.array([0.3])
            opt_a.step(lr=0.05)
            opt_b.step(lr=0.05)
        assert a.data[0] == b.data[0]


class TestCorpus:
    def test_byte_codes(self):
        np.testing.assert_array_equal(CharCorpus.encode("abab"),
                                      [97, 98, 97, 98])

    def test_round_trip(self):
        s = "hello, wörld! \n tab\t."
        assert CharCorpus.decode(CharCorpus.encode(s)) == s

    def test_split_fraction(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_bytes(b"x" * 100)
        c = char_corpus(path, split_frac=0.5)
        assert len(c.train) == 50 and len(c.val) == 50
        assert c.vocab_size == BYTE_VOCAB_SIZE == 257

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.txt"
        path.write_bytes(b"")
        with pytest.raises(ValueError, match="empty"):
            char_corpus(path)

    def test_sample_batch_shapes_and_shift(self):
        split = np.arange(100, dtype=np.int64)
        x, y = sample_batch(split, 3, 8, np.random.default_rng(0))
        assert x.shape == y.shape == (3, 8)
        np.testing.assert_array_equal(x[:, 1:], y[:, :-1])


class TestMetrics:
    def test_ppl_identity_enforced(self):
        MetricsRecord(0, 0, 1.0, 2.0, math.exp(2.0), 0.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            MetricsRecord(0, 0, 1.0, 2.0, 7.0, 0.0, 0.0, 0.0)

    def test_csv_header(self):
        assert METRICS_CSV_HEADER[:5] == ["step", "tokens_seen", "train_loss",
                                          "val_loss", "val_ppl"]
        text = metrics_csv([MetricsRecord(0, 0, 1.0, 2.0, math.exp(2.0),
                                          0.0, 0.0, 0.0)])
        assert text.splitlines()[0] == ",".join(METRICS_CSV_HEADER)


class TestTrainLoop:
    def _corpus(self, corpus_small):
        return char_corpus(corpus_small, split_frac=0.9)

    def test_zero_steps_one_record(self, corpus_small):
        model = _toy_model()
        cfg = _tcfg(total_steps=0, warmup_steps=0, eval_interval=5)
        records = list(train_loop(model, self._corpus(corpus_small), cfg))
        assert len(records) == 1
        assert records[0].step == 0
        assert records[0].val_ppl == pytest.approx(
            math.exp(records[0].val_loss), rel=1e-12)

    def test_records_match_schedule_and_identity(self, corpus_small):
        model = _toy_model()
        cfg = _tcfg(total_steps=20, eval_interval=10, warmup_steps=5)
        records = list(train_loop(model, self._corpus(corpus_small), cfg))
        assert [r.step for r in records] == [0, 10, 20]
        for r in records:
            assert r.val_ppl == pytest.approx(math.exp(r.val_loss), rel=1e-9)
            if r.step:
                assert r.lr == cosine_lr(r.step, cfg)
        assert records[-1].tokens_seen == 20 * cfg.batch_size * cfg.seq_len

    def test_same_seed_bitwise_identical(self, corpus_small):
        corpus = self._corpus(corpus_small)
        cfg = _tcfg(total_steps=30, eval_interval=10, warmup_steps=5, seed=11)
        runs = []
        for _ in range(2):
            model = _toy_model(seed=11)
            recs = list(train_loop(model, corpus, cfg))
            runs.append([(r.step, r.train_loss, r.val_loss, r.grad_norm)
                         for r in recs])
        assert runs[0] == runs[1]

    def test_different_seed_differs(self, corpus_small):
        corpus = self._corpus(corpus_small)
        losses = []
        for seed in (1, 2):
            cfg = _tcfg(total_steps=10, eval_interval=10, warmup_steps=5,
                        seed=seed)
            model = _toy_model(seed=seed)
            recs = list(train_loop(model, corpus, cfg))
            losses.append(recs[-1].train_loss)
        assert losses[0] != losses[1]

    def test_checkpoint_written(self, corpus_small, tmp_path):
        model = _toy_model()
        cfg = _tcfg(total_steps=5, eval_interval=5, warmup_steps=2)
        list(train_loop(model, self._corpus(corpus_small), cfg,
                        out_dir=tmp_path))
        assert (tmp_path / "checkpoint" / "manifest.json").exists()
        assert (tmp_path / "checkpoint" / "params.bin").exists()

    def test_nan_loss_aborts_with_diagnostics(self, corpus_small):
        model = _toy_model()
        # poison a weight so the first forward pass blows up
        model.params["head.w"].data = model.params["head.w"].data * np.inf
        cfg = _tcfg(total_steps=5, eval_interval=5, warmup_steps=2)
        with pytest.raises((NumericalAbort, FloatingPointError)), \
                np.errstate(invalid="ignore", over="ignore"):
            list(train_loop(model, self._corpus(corpus_small), cfg))


class TestConfigFile:
    def test_parse_and_types(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text(
            "# comment\n"
            "peak_lr = 1e-3\n"
            "total_steps = 50   # trailing comment\n"
            'activation = "polynorm"\n'
            "seed = 7\n")
        vals = load_config_file(path, {"peak_lr", "total_steps",
                                       "activation", "seed"})
        assert vals == {"peak_lr": 1e-3, "total_steps": 50,
                        "activation": "polynorm", "seed": 7}

    def test_unknown_key_named(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("nonsense_key = 3\n")
        with pytest.raises(ValueError, match="nonsense_key"):
            load_config_file(path, {"peak_lr"})
