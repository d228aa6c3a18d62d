import math
import os

import numpy as np
import pytest

from surfacefuse.checkpoint import load_checkpoint, save_checkpoint
from surfacefuse.data import encode_pairs, gen_copy, make_batch, token_batches, vocab_for_task
from surfacefuse.errors import ConfigError, InvalidParameterError, NumericError
from surfacefuse.model import ModelConfig, Seq2Seq
from surfacefuse.surface import FusionConfig
from surfacefuse.tensor import Rng, Tensor
from surfacefuse.training import (
    Adam,
    TrainConfig,
    avg_output_length,
    beam_decode,
    corpus_bleu,
    evaluate,
    greedy_decode,
    length_normalized_score,
    lr_at,
    train,
)


def toy_dataset(n=260, vocab_size=10, seed=0):
    rng = Rng(seed).spawn("gen")
    pairs = gen_copy(n, (3, 6), vocab_size, rng)
    vocab = vocab_for_task(vocab_size)
    ids = encode_pairs(pairs, vocab)
    return ids[: n - 60], ids[n - 60: n - 30], ids[n - 30:], vocab


def toy_model(seed=0, **kw):
    base = dict(n_enc_layers=2, n_dec_layers=2, d_model=16, n_heads=2, d_ff=32,
                vocab_src=14, vocab_tgt=14, max_len=16)
    base.update(kw)
    return Seq2Seq(ModelConfig(**base), FusionConfig(), seed=seed)


class TestSchedule:
    def test_warmup_then_decay(self):
        cfg = TrainConfig(lr=1e-3, warmup=400)
        assert lr_at(1, cfg) == pytest.approx(1e-3 / 400)
        assert lr_at(400, cfg) == pytest.approx(1e-3)
        assert lr_at(1600, cfg) == pytest.approx(1e-3 * 0.5)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(warmup=0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(label_smoothing=0.4).validate()
        with pytest.raises(ConfigError):
            TrainConfig(lr=0.0).validate()


class TestAdam:
    def test_single_step_matches_hand_formula(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        cfg = TrainConfig(beta1=0.9, beta2=0.98, adam_eps=1e-9)
        opt = Adam([("p", p)], cfg)
        p.grad = np.array([0.5, -1.5])
        opt.step(lr=0.01)
        # bias-corrected first step: m_hat = g, v_hat = g^2
        expected = np.array([1.0, -2.0]) - 0.01 * np.array([0.5, -1.5]) / (
            np.sqrt(np.array([0.25, 2.25])) + 1e-9)
        np.testing.assert_allclose(p.data, expected, atol=1e-12)

    def test_none_grad_is_skipped(self):
        p = Tensor(np.ones(3), requires_grad=True)
        opt = Adam([("p", p)], TrainConfig())
        opt.step(lr=0.1)
        np.testing.assert_array_equal(p.data, np.ones(3))


class TestTrainLoop:
    def test_initial_loss_near_log_vocab(self):
        train_ids, valid_ids, _, vocab = toy_dataset()
        model = toy_model(vocab_src=len(vocab), vocab_tgt=len(vocab))
        loss, _ = evaluate(model, token_batches(valid_ids, 128))
        assert abs(loss - math.log(len(vocab))) < 0.2

    def test_loss_decreases(self):
        train_ids, valid_ids, _, vocab = toy_dataset()
        model = toy_model(vocab_src=len(vocab), vocab_tgt=len(vocab))
        cfg = TrainConfig(steps=150, max_tokens=128, eval_interval=50, warmup=50,
                          lr=2e-3, seed=3)
        result = train(model, train_ids, valid_ids, cfg, out_dir=None)
        assert result.rows[-1]["val_loss"] < result.rows[0]["val_loss"]

    def test_metrics_and_checkpoints_written(self, tmp_path):
        train_ids, valid_ids, _, vocab = toy_dataset()
        model = toy_model(vocab_src=len(vocab), vocab_tgt=len(vocab))
        cfg = TrainConfig(steps=40, max_tokens=128, eval_interval=20, warmup=10, seed=3)
        result = train(model, train_ids, valid_ids, cfg, out_dir=str(tmp_path))
        lines = (tmp_path / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == "step,loss,token_acc,val_loss"
        assert len(lines) == 1 + len(result.rows)
        assert (tmp_path / "best.ckpt").exists()
        assert (tmp_path / "last.ckpt").exists()
        assert result.best_val_loss <= result.final_val_loss

    def test_reproducible_runs(self, tmp_path):
        train_ids, valid_ids, _, vocab = toy_dataset()
        outs = []
        for sub in ("a", "b"):
            model = toy_model(seed=7, vocab_src=len(vocab), vocab_tgt=len(vocab))
            cfg = TrainConfig(steps=30, max_tokens=128, eval_interval=10, warmup=10, seed=9)
            train(model, train_ids, valid_ids, cfg, out_dir=str(tmp_path / sub))
            outs.append(sub)
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
        assert (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()
        assert (tmp_path / "a" / "best.ckpt").read_bytes() == (tmp_path / "b" / "best.ckpt").read_bytes()

    def test_checkpoint_save_load_save_byte_identical(self, tmp_path):
        train_ids, valid_ids, _, vocab = toy_dataset()
        model = toy_model(vocab_src=len(vocab), vocab_tgt=len(vocab))
        cfg = TrainConfig(steps=10, max_tokens=128, eval_interval=5, warmup=5, seed=1)
        train(model, train_ids, valid_ids, cfg, out_dir=str(tmp_path))
        path = tmp_path / "last.ckpt"
        resaved = tmp_path / "resaved.ckpt"
        save_checkpoint(resaved, load_checkpoint(path))
        assert path.read_bytes() == resaved.read_bytes()

    def test_resume_continues_step_count(self, tmp_path):
        train_ids, valid_ids, _, vocab = toy_dataset()
        model = toy_model(vocab_src=len(vocab), vocab_tgt=len(vocab))
        cfg = TrainConfig(steps=20, max_tokens=128, eval_interval=10, warmup=10, seed=2)
        train(model, train_ids, valid_ids, cfg, out_dir=str(tmp_path))
        model2 = toy_model(vocab_src=len(vocab), vocab_tgt=len(vocab))
        cfg2 = TrainConfig(steps=40, max_tokens=128, eval_interval=10, warmup=10, seed=2)
        result = train(model2, train_ids, valid_ids, cfg2, out_dir=str(tmp_path), resume=True)
        assert result.start_step == 20
        lines = (tmp_path / "metrics.csv").read_text().strip().splitlines()
        steps = [int(line.split(",")[0]) for line in lines[1:]]
        assert steps == [10, 20, 30, 40]

    def test_nonfinite_loss_aborts_with_step(self):
        train_ids, valid_ids, _, vocab = toy_dataset()
        model = toy_model(vocab_src=len(vocab), vocab_tgt=len(vocab))
        model.loss_on_batch = lambda *a, **k: (Tensor(np.inf), {"ntokens": 1, "ncorrect": 0})
        cfg = TrainConfig(steps=5, max_tokens=128, eval_interval=5, warmup=5, seed=1)
        with pytest.raises(NumericError, match="step 1"):
            train(model, train_ids, valid_ids, cfg, out_dir=None)

    def test_empty_dataset_rejected(self):
        model = toy_model()
        with pytest.raises(ConfigError):
            train(model, [], [], TrainConfig(steps=5), out_dir=None)


@pytest.fixture(scope="module")
def trained_copy_model():
    train_ids, valid_ids, test_ids, vocab = toy_dataset(n=400, seed=5)
    model = toy_model(seed=4, d_model=32, d_ff=64, vocab_src=len(vocab), vocab_tgt=len(vocab))
    cfg = TrainConfig(steps=250, max_tokens=256, eval_interval=125, warmup=60, lr=2e-3, seed=6)
    train(model, train_ids, valid_ids, cfg, out_dir=None)
    return model, test_ids


class TestDecoding:
    def test_beam_one_equals_greedy(self, trained_copy_model):
        model, test_ids = trained_copy_model
        for src, _ in test_ids[:12]:
            assert greedy_decode(model, src) == beam_decode(model, src, beam_size=1)

    def test_beam_returns_eos_free_tokens(self, trained_copy_model):
        model, test_ids = trained_copy_model
        out = beam_decode(model, test_ids[0][0], beam_size=3, alpha=1.0)
        assert 2 not in out  # EOS stripped
        assert len(out) <= model.config.max_len

    def test_alpha_zero_is_pure_sum(self):
        assert length_normalized_score(-4.0, 8, alpha=0.0) == -4.0
        assert length_normalized_score(-4.0, 8, alpha=1.0) == -0.5

    def test_bad_beam_size(self, trained_copy_model):
        model, test_ids = trained_copy_model
        with pytest.raises(InvalidParameterError):
            beam_decode(model, test_ids[0][0], beam_size=0)


class TestCorpusBleu:
    def test_perfect_match(self):
        refs = [["a", "b", "c", "d", "e"], ["x", "y", "z", "w", "v"]]
        assert corpus_bleu(refs, refs) == pytest.approx(100.0)

    def test_no_fourgram_matches_is_zero(self):
        hyps = [["a", "b", "c", "q", "e"]]
        refs = [["a", "b", "c", "d", "e"]]
        assert corpus_bleu(hyps, refs) == 0.0

    def test_hand_computed_example(self):
        hyp = ["a", "b", "c", "d", "e"]
        ref = ["a", "b", "c", "d", "f"]
        # n-gram precisions counted by hand: 4/5, 3/4, 2/3, 1/2; BP = 1
        expected = 100.0 * math.exp(
            0.25 * (math.log(4 / 5) + math.log(3 / 4) + math.log(2 / 3) + math.log(1 / 2)))
        assert corpus_bleu([hyp], [ref]) == pytest.approx(expected, abs=1e-9)

    def test_brevity_penalty(self):
        hyps = [["a", "b"]]
        refs = [["a", "b", "c", "d"]]
        # unigram 2/2, bigram 1/1; 3/4-grams impossible -> zero matches
        assert corpus_bleu(hyps, refs) == 0.0
        short_hyps = [["a", "b", "c", "d"]]
        long_refs = [["a", "b", "c", "d", "e"]]
        score = corpus_bleu(short_hyps, long_refs)
        assert 0 < score < 100.0

    def test_count_mismatch(self):
        with pytest.raises(InvalidParameterError):
            corpus_bleu([["a"]], [])
        with pytest.raises(InvalidParameterError):
            corpus_bleu([], [])


class TestAvgOutputLength:
    def test_simple_mean(self):
        assert avg_output_length([[4] * 2, [4] * 4, [4] * 6]) == 4.0

    def test_single_output(self):
        assert avg_output_length([[5, 6, 7]]) == 3.0

    def test_eos_stripped(self):
        # ids: one hyp carries a trailing EOS (id 2), one is clean
        hyps = [[4, 5, 2], [6, 7, 8]]
        assert avg_output_length(hyps) == pytest.approx((2 + 3) / 2)

    def test_empty_raises(self):
        with pytest.raises(InvalidParameterError):
            avg_output_length([])
