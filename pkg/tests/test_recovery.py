from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from cluscomp.errors import InvalidArgument, TrainingDiverged
from cluscomp.model import CompressedBlock, ModelConfig, compress_lm, init_lm
from cluscomp.recovery import (
    FinetuneConfig,
    RecoveryConfig,
    TrainConfig,
    copy_task_mask,
    finetune,
    lm_forward_loss,
    perplexity,
    pretrain,
    recover,
    token_accuracy,
    train_lm,
)
from cluscomp.toydata import CorpusSpec, batchify, gen_corpus


@pytest.fixture(scope="module")
def compressed(pretrained_lm):
    return compress_lm(pretrained_lm, 8, 32, seed=0)


def test_recovery_defaults():
    cfg = RecoveryConfig()
    assert (cfg.lr, cfg.schedule, cfg.warmup_ratio, cfg.max_grad_norm, cfg.batch, cfg.epochs) == \
        (1e-5, "cosine", 0.0, 0.3, 8, 1)
    assert RecoveryConfig(lr=1e-4).lr == 1e-4


def test_finetune_defaults():
    cfg = FinetuneConfig()
    assert (cfg.lr, cfg.weight_decay, cfg.schedule, cfg.warmup_ratio, cfg.epochs) == (1e-4, 0.1, "cosine", 0.03, 3)


def test_uniform_logits_give_log_vocab():
    lm = init_lm(ModelConfig(), 0)
    flat = replace(lm, head=np.zeros_like(lm.head))
    toks = np.arange(40).reshape(2, 20) % 96
    assert lm_forward_loss(flat, toks) == pytest.approx(math.log(96), rel=1e-6)
    assert perplexity(flat, toks) == pytest.approx(96, rel=1e-5)


def test_overfits_a_two_token_cycle():
    cfg = ModelConfig(vocab=8, model_dim=16, n_heads=2, mlp_dim=24, n_blocks=1)
    rows = np.tile([3, 5], 16 * 16).reshape(16, 32)
    res = pretrain(init_lm(cfg, 0), rows, rows[:2], TrainConfig(lr=1e-2, schedule="constant", batch=4,
                                                                 epochs=8, max_grad_norm=None))
    assert res.best_eval < 0.01


def test_lossless_compression_keeps_loss(pretrained_lm, markov_rows):
    lossless = compress_lm(pretrained_lm, 2, 65535)
    held = markov_rows[-32:]
    assert lm_forward_loss(lossless, held) == pytest.approx(lm_forward_loss(pretrained_lm, held), abs=1e-5)


@pytest.mark.parametrize("toks", [np.zeros((1, 1), int), np.zeros((0, 4), int), np.array([[0, 200]])])
def test_bad_token_input(pretrained_lm, toks):
    with pytest.raises(InvalidArgument):
        lm_forward_loss(pretrained_lm, toks)


def test_recovery_freezes_everything_but_codebooks(compressed, markov_rows):
    res = recover(compressed, markov_rows[:256], markov_rows[-64:], RecoveryConfig(lr=1e-4))
    for model in (res.model, res.final_model):
        assert model.embed.tobytes() == compressed.embed.tobytes()
        assert model.head.tobytes() == compressed.head.tobytes()
        assert model.final_norm.tobytes() == compressed.final_norm.tobytes()
        for a, b in zip(model.blocks, compressed.blocks):
            assert a.attn_norm.tobytes() == b.attn_norm.tobytes() and a.mlp_norm.tobytes() == b.mlp_norm.tobytes()
            for name in b.layers:
                assert a.layers[name].codes.tobytes() == b.layers[name].codes.tobytes()
    changed = any(res.final_model.blocks[0].layers[n].codebook.tobytes() != compressed.blocks[0].layers[n].codebook.tobytes()
                  for n in compressed.blocks[0].layers)
    assert changed
    assert max(s["clipped_norm"] for s in res.steps) <= 0.3 + 1e-6
    assert any(s["grad_norm"] > 0.3 for s in res.steps)
    assert res.best_eval <= res.initial_eval
    assert len(res.steps) == 256 // 8


def test_recovery_on_lossless_model_changes_little(pretrained_lm, markov_rows):
    lossless = compress_lm(pretrained_lm, 2, 65535)
    res = recover(lossless, markov_rows[:128], markov_rows[-64:])
    before = math.exp(res.initial_eval)
    after = perplexity(res.final_model, markov_rows[-64:])
    assert abs(after - before) / before <= 0.01


def test_recover_needs_compressed_layers(pretrained_lm, markov_rows):
    with pytest.raises(InvalidArgument):
        recover(pretrained_lm, markov_rows[:8], markov_rows[-8:])
    with pytest.raises(InvalidArgument):
        pretrain(compress_lm(pretrained_lm, 8, 8), markov_rows[:8], markov_rows[-8:], TrainConfig())


def test_deterministic_per_seed(compressed, markov_rows):
    cfg = RecoveryConfig(lr=1e-4, seed=3)
    a = recover(compressed, markov_rows[:64], markov_rows[-16:], cfg)
    b = recover(compressed, markov_rows[:64], markov_rows[-16:], cfg)
    assert a.steps == b.steps
    c = recover(compressed, markov_rows[:64], markov_rows[-16:], replace(cfg, seed=4))
    assert [s["loss"] for s in c.steps] != [s["loss"] for s in a.steps]


def test_resume_reproduces_uninterrupted_run(compressed, markov_rows):
    cfg = RecoveryConfig(lr=1e-4, epochs=3, seed=1)
    train, held = markov_rows[:48], markov_rows[-16:]
    full = recover(compressed, train, held, cfg)
    first = recover(compressed, train, held, cfg, stop_after_epoch=1)
    rest = recover(first.final_model, train, held, cfg, state=first.state)
    assert first.steps + rest.steps == full.steps
    assert rest.best_eval == full.best_eval
    for a, b in zip(rest.model.compressed_layers(), full.model.compressed_layers()):
        assert a.codebook.tobytes() == b.codebook.tobytes()


def test_divergence(compressed, markov_rows):
    with pytest.raises(TrainingDiverged) as info:
        with np.errstate(all="ignore"):
            recover(compressed, markov_rows[:64], markov_rows[-8:], RecoveryConfig(lr=1e30, max_grad_norm=None))
    assert info.value.state


def test_copy_mask():
    mask = copy_task_mask(18, 2)
    # period 5: x1 x2 SEP x1 x2; targets at positions 1..17
    assert mask.tolist()[:8] == [False, False, True, True, False, False, False, True]


def test_finetune_improves_copy_task(pretrained_lm):
    task = batchify(gen_corpus(CorpusSpec(vocab=96, length=64 * 300, seed=5, kind="copy", copy_len=8)), 64)
    train, held = task[:-64], task[-64:]
    comp = compress_lm(pretrained_lm, 4, 256, seed=0)
    mask = copy_task_mask(64, 8)
    before = token_accuracy(comp, held, mask)
    res = finetune(comp, train, held, FinetuneConfig(lr=3e-3, batch=16))
    assert token_accuracy(res.model, held, mask) > before
    assert res.best_eval < res.initial_eval


def test_codebook_finetune_rivals_full_finetune(pretrained_lm):
    # new Markov chain: the task is a domain shift away from pretraining
    data = batchify(gen_corpus(CorpusSpec(vocab=96, length=64 * 1000, seed=7, alpha=0.1)), 64)
    train, held = data[:-64], data[-64:]
    cfg = FinetuneConfig(lr=3e-3, batch=16)
    full = pretrain(pretrained_lm, train, held, cfg)
    comp = compress_lm(pretrained_lm, 4, 1024, seed=0)
    assert any(l.n_effective < l.k for l in comp.compressed_layers())  # genuinely lossy
    ours = finetune(comp, train, held, cfg)
    gain_full = full.initial_eval - full.best_eval
    gain_ours = ours.initial_eval - ours.best_eval
    assert gain_ours >= 0.9 * gain_full


def test_trainable_keys_are_codebooks_only(compressed):
    res = train_lm(compressed, np.zeros((2, 8), int), np.zeros((1, 8), int), TrainConfig(lr=1e-5), "codebooks")
    assert all(k.startswith("param/blocks.") for k in res.state if k.startswith("param/"))
    assert all(isinstance(b, CompressedBlock) for b in res.model.blocks)
