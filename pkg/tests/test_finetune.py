import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from pmlm.finetune import (
    FinetuneConfig,
    IncrementalDecoder,
    SequenceClassifier,
    classification_instance,
    decode_beam,
    decode_greedy,
    finetune_classifier,
    finetune_seq2seq,
    length_penalty,
    next_token_logprobs,
    read_tsv,
)
from pmlm.model import ModelConfig, PmlmModel
from pmlm.verification import random_model, toy_vocab

VOCAB = toy_vocab(32)


def fresh_model(seed=0):
    torch.manual_seed(seed)
    return PmlmModel(ModelConfig(vocab_size=len(VOCAB), layers=2, hidden_size=32, attention_heads=4, max_positions=48))


def sources(n, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.integers(6, 32, int(rng.integers(1, 8))).tolist() for _ in range(n)]


def test_length_penalty():
    assert length_penalty(1, 0.0) == 1.0
    assert length_penalty(1, 0.7) == 1.0
    assert length_penalty(7, 1.0) == pytest.approx(2.0)


def test_initial_binary_loss_near_ln2():
    model = fresh_model()
    torch.manual_seed(0)
    clf = SequenceClassifier(model, 2)
    data = [(s, i % 2) for i, s in enumerate(sources(64))]
    logits = clf([classification_instance(s, VOCAB, 32) for s, _ in data])
    loss = F.cross_entropy(logits, torch.tensor([y for _, y in data]))
    assert loss.item() == pytest.approx(math.log(2), abs=0.1)


def test_classifier_learns_separable_task():
    rng = np.random.default_rng(1)
    data = []
    for i in range(64):
        label = i % 2
        filler = rng.integers(8, 32, 5).tolist()
        data.append(([6 + label, *filler], label))
    history = []
    cfg = FinetuneConfig(steps=60, learning_rate=2e-3, dropout=0.0)
    clf = finetune_classifier(fresh_model(), data, 2, VOCAB, cfg, history=history)
    preds = clf.predict([classification_instance(s, VOCAB, 32) for s, _ in data])
    assert (preds == np.array([y for _, y in data])).all()
    assert history[-1]["loss"] < history[0]["loss"]


def test_frozen_body_keeps_weights():
    model = fresh_model()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    cfg = FinetuneConfig(steps=3, freeze_body=True)
    finetune_classifier(model, [([6, 7], 0), ([8, 9], 1)], 2, VOCAB, cfg)
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
    assert all(p.requires_grad for p in model.parameters())


def test_label_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        finetune_classifier(fresh_model(), [([6], 2)], 2, VOCAB, FinetuneConfig(steps=1))


def test_seq2seq_skips_long_pairs():
    model = fresh_model()
    _, skipped = finetune_seq2seq(
        model, [([6, 7], [8]), ([6] * 30, [7] * 30)], VOCAB, FinetuneConfig(steps=2), max_len=20
    )
    assert skipped == 1


def test_read_tsv(tmp_path):
    path = tmp_path / "d.tsv"
    path.write_text("a b\tc\n\nd\te\n")
    assert read_tsv(path) == [("a b", "c"), ("d", "e")]
    path.write_text("only one column\n")
    with pytest.raises(ValueError, match=":1: expected 2"):
        read_tsv(path)


@pytest.mark.parametrize("seed", range(4))
def test_beam_one_equals_greedy(seed):
    model = random_model(seed, len(VOCAB))
    for src in sources(5, seed):
        assert decode_beam(model, src, VOCAB, beam=1, max_len=10) == decode_greedy(model, src, VOCAB, max_len=10)


def test_incremental_matches_full_prefix():
    model = random_model(7, len(VOCAB))
    src, target = [6, 9, 12, 15], [20, 21, 22, 23, 24]
    dec = IncrementalDecoder(model, src, VOCAB)
    cache = dec.root
    for k in range(len(target) + 1):
        prefix = target[:k]
        inc, nxt = dec.step(cache, [prefix])
        full = next_token_logprobs(model, src, [prefix], VOCAB)
        rel = (inc - full).abs().max() / full.abs().max()
        assert rel < 1e-5
        if k:
            cache = nxt


def test_incremental_and_full_beams_agree():
    model = random_model(8, len(VOCAB))
    for src in sources(4, 8):
        a = decode_beam(model, src, VOCAB, beam=3, max_len=8)
        b = decode_beam(model, src, VOCAB, beam=3, max_len=8, incremental=False)
        assert a == b


def test_no_hypothesis_extends_past_eos():
    model = random_model(9, len(VOCAB))
    for src in sources(6, 9):
        _, state = decode_beam(model, src, VOCAB, beam=4, max_len=12, return_state=True)
        for h in state.finished:
            assert h.tokens[-1] == VOCAB.eos and VOCAB.eos not in h.tokens[:-1]
        for h in state.live:
            assert VOCAB.eos not in h.tokens
        banned = VOCAB.special_ids - {VOCAB.eos}
        assert not any(t in banned for h in state.finished + state.live for t in h.tokens)


def test_output_length_capped_by_positions():
    model = random_model(10, len(VOCAB), max_positions=12)
    out = decode_beam(model, [6, 7, 8], VOCAB, beam=2, max_len=50)
    assert len(out) <= 12 - 5
