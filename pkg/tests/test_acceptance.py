"""Acceptance criteria 1-10. Each test prints one ``criterion N ...: PASS|FAIL`` line.

Run alone with ``pytest tests/test_acceptance.py -v`` (under a minute on one CPU core).
"""

import sys
import time

import numpy as np
import pytest
import torch

from pmlm.assembly import TokenKind, assemble_pmlm_input, audit_leakage, conditioning_positions
from pmlm.cli import main
from pmlm.config import OBJECTIVES, RunConfig, TrainConfig
from pmlm.corpus import Vocab, pack_pair
from pmlm.finetune import (
    FinetuneConfig,
    IncrementalDecoder,
    decode_beam,
    decode_greedy,
    finetune_seq2seq,
    next_token_logprobs,
)
from pmlm.masking import CorruptionPlan, FactorizationOrder, usable_positions
from pmlm.model import ModelConfig
from pmlm.objectives import ObjectiveKind, load_training_state, pretrain
from pmlm.toy import copy_pairs, write_copy_corpus
from pmlm.verification import (
    check_gradients,
    check_leakage,
    check_sampler_stats,
    forward_pass_audit,
    random_model,
    run_equivalence_suite,
    tiny_gradient_setup,
    toy_vocab,
)

# tolerances and budgets
REL_TOL = 1e-5
GRAD_RTOL = 1e-3
RATIO_BOUNDS = (0.15, 0.17)
BLOCK_FREQ = {1: 0.60, 2: 0.08, 3: 0.08, 4: 0.08, 5: 0.08, 6: 0.08}
BLOCK_TOL = 0.01
LOSS_DROP = 0.50
EXACT_MATCH = 0.99


@pytest.fixture
def verdict(capsys):
    def emit(n: int, name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            sys.stdout.write(f"\ncriterion {n:2d} {name}: {'PASS' if ok else 'FAIL'} {detail}\n")
        assert ok, detail

    return emit


def test_c01_ae_oracle_equivalence(verdict):
    t0 = time.perf_counter()
    reports = run_equivalence_suite("ae", cases=100, seed=0)
    took = time.perf_counter() - t0
    worst = max(r.max_deviation for r in reports)
    ok = all(r.passed for r in reports) and worst <= REL_TOL and took < 60
    verdict(1, "AE oracle equivalence", ok, f"cases=100 max_rel_dev={worst:.2e} tol={REL_TOL:.0e} time={took:.1f}s")


def test_c02_par_step_equivalence(verdict):
    t0 = time.perf_counter()
    reports = run_equivalence_suite("par", cases=100, seed=0)
    took = time.perf_counter() - t0
    worst = max(r.max_deviation for r in reports)
    rows = sum(len(r.deviations) for r in reports)
    ok = all(r.passed for r in reports) and worst <= REL_TOL and took < 120
    verdict(2, "PAR step equivalence", ok, f"cases=100 rows={rows} max_rel_dev={worst:.2e} time={took:.1f}s")


def test_c03_leakage_freedom(verdict):
    t0 = time.perf_counter()
    sweep = check_leakage(n=1000, seed=0)
    took = time.perf_counter() - t0
    # the canonical injected edge x6 -> x4 must be reported along [P]4 -> x6 -> x4
    vocab = toy_vocab(32)
    x = pack_pair(list(range(6, 12)), [], 9, vocab)
    order = FactorizationOrder.of((4, 5), (2,))
    inst = assemble_pmlm_input(x, order, CorruptionPlan.all_masked(order.positions), vocab)
    bad = audit_leakage(inst.add_edges([(6, inst.row_at(TokenKind.ORIGINAL, 4))]), vocab)
    ok = sweep.passed and not bad.passed and "[P]4 -> x6 -> x4" in bad.describe() and took < 30
    verdict(
        3,
        "leakage freedom",
        ok,
        f"instances={sweep.instances} leaking={sweep.leaking} injected_detected="
        f"{sweep.injected_detected}/{sweep.injected} time={took:.1f}s",
    )


def test_c04_forward_pass_accounting(verdict):
    report = forward_pass_audit(ObjectiveKind.AE_PAR, batch=4, steps_per_example=10)
    ok = (report.measured, report.naive) == (4, 44)
    verdict(4, "forward-pass accounting", ok, f"measured={report.measured} naive={report.naive}")


SIX_TABLE = [
    ("AE", [(2,), (4, 5)], False, {(TokenKind.CONV_MASK, p): {1, 3, 6} for p in (2, 4, 5)}),
    (
        "AR 2->4->5",
        [(2,), (4,), (5,)],
        True,
        {(TokenKind.PSEUDO, 2): {1, 3, 6}, (TokenKind.PSEUDO, 4): {1, 2, 3, 6}, (TokenKind.PSEUDO, 5): {1, 2, 3, 4, 6}},
    ),
    (
        "PAR {4,5}->{2}",
        [(4, 5), (2,)],
        True,
        {(TokenKind.PSEUDO, 4): {1, 3, 6}, (TokenKind.PSEUDO, 5): {1, 3, 6}, (TokenKind.PSEUDO, 2): {1, 3, 4, 5, 6}},
    ),
    (
        "PAR {2}->{4,5}",
        [(2,), (4, 5)],
        True,
        {(TokenKind.PSEUDO, 2): {1, 3, 6}, (TokenKind.PSEUDO, 4): {1, 2, 3, 6}, (TokenKind.PSEUDO, 5): {1, 2, 3, 6}},
    ),
]


def test_c05_factorization_semantics(verdict):
    vocab = toy_vocab(32)
    x = pack_pair(list(range(6, 12)), [], 9, vocab)
    usable = usable_positions(x, vocab)
    mismatches = []
    for name, steps, pseudo, expected in SIX_TABLE:
        order = FactorizationOrder.of(*steps)
        inst = assemble_pmlm_input(x, order, CorruptionPlan.all_masked(order.positions), vocab, append_pseudo=pseudo)
        for (kind, pos), want in expected.items():
            got = conditioning_positions(inst, inst.row_at(kind, pos), usable)
            if got != want:
                mismatches.append(f"{name} x{pos}: {sorted(got)} != {sorted(want)}")
    rows = sum(len(e) for *_, e in SIX_TABLE)
    verdict(5, "factorization semantics", not mismatches, f"rows={rows} mismatches={mismatches or 0}")


def test_c06_gradient_correctness(verdict):
    model, inst, vocab = tiny_gradient_setup(0)
    cfg = model.config
    shape_ok = (cfg.hidden_size, cfg.layers, len(vocab), model.dtype) == (8, 2, 16, torch.float64)
    t0 = time.perf_counter()
    report = check_gradients(model, inst, rtol=GRAD_RTOL)
    took = time.perf_counter() - t0
    ok = shape_ok and report.passed and took < 60
    verdict(
        6,
        "gradient correctness",
        ok,
        f"elements={report.checked} max_rel_err={report.max_relative_error:.2e} rtol={GRAD_RTOL:.0e} time={took:.1f}s",
    )


def test_c07_sampler_statistics(verdict):
    report = check_sampler_stats(n=10_000, length=512, seed=0, block_tol=BLOCK_TOL)
    lo, hi = RATIO_BOUNDS
    ratio_ok = lo <= report.min_ratio and report.max_ratio <= hi
    blocks_ok = all(abs(report.block_freq.get(k, 0.0) - v) <= BLOCK_TOL for k, v in BLOCK_FREQ.items())
    freq = " ".join(f"{k}:{report.block_freq.get(k, 0.0):.4f}" for k in BLOCK_FREQ)
    verdict(
        7,
        "sampler statistics",
        ratio_ok and blocks_ok,
        f"ratio=[{report.min_ratio:.4f},{report.max_ratio:.4f}] blocks {freq}",
    )


def test_c08_learning_sanity(verdict, tmp_path):
    t0 = time.perf_counter()
    write_copy_corpus(tmp_path / "copy.txt", documents=400)
    run = RunConfig(
        model=ModelConfig(
            layers=2, hidden_size=64, attention_heads=4, ffn_inner_hidden_size=128, max_positions=64, dropout=0.0
        ),
        train=TrainConfig(batch_size=16, training_steps=500, learning_rate=2e-3, warmup_ratio=0.05, max_len=32),
        objective="ae+par",
    )
    history: list[dict] = []
    checkpoints = pretrain(run, tmp_path / "copy.txt", tmp_path / "run", on_metrics=history.append)
    losses = [h["loss"] for h in history]
    first, last = float(np.mean(losses[:20])), float(np.mean(losses[-20:]))
    drop = 1 - last / first

    vocab = Vocab.load(tmp_path / "run" / "vocab.txt")
    model, _, _, _ = load_training_state(checkpoints[-1], len(vocab))
    pairs = [(vocab.encode(s), vocab.encode(t)) for s, t in copy_pairs(200)]
    finetune_seq2seq(model, pairs, vocab, FinetuneConfig(steps=600, learning_rate=1e-3, dropout=0.0))
    hits = sum(decode_beam(model, s, vocab, beam=5, alpha=0.7, max_len=12) == t for s, t in pairs)
    em = hits / len(pairs)
    took = time.perf_counter() - t0
    ok = drop >= LOSS_DROP and em >= EXACT_MATCH and took < 600
    verdict(
        8,
        "learning sanity",
        ok,
        f"loss {first:.3f}->{last:.3f} drop={drop:.1%} exact_match={em:.1%} beam=5 alpha=0.7 time={took:.0f}s",
    )


def test_c09_decoding_contracts(verdict):
    vocab = toy_vocab(32)
    rng = np.random.default_rng(0)
    srcs = [rng.integers(6, 32, int(rng.integers(1, 9))).tolist() for _ in range(10)]
    greedy_ok, worst, eos_ok = True, 0.0, True
    for seed, src in enumerate(srcs):
        model = random_model(seed, len(vocab))
        greedy_ok &= decode_beam(model, src, vocab, beam=1, max_len=12) == decode_greedy(model, src, vocab, max_len=12)
        _, state = decode_beam(model, src, vocab, beam=5, alpha=0.7, max_len=12, return_state=True)
        eos_ok &= all(h.tokens.count(vocab.eos) == 1 and h.tokens[-1] == vocab.eos for h in state.finished)
        eos_ok &= all(vocab.eos not in h.tokens for h in state.live)
        # incremental decoding along the greedy path vs. recomputing the full prefix
        path = decode_greedy(model, src, vocab, max_len=8)
        decoder = IncrementalDecoder(model, src, vocab)
        cache = decoder.root
        for k in range(len(path) + 1):
            inc, nxt = decoder.step(cache, [path[:k]])
            full = next_token_logprobs(model, src, [path[:k]], vocab)
            worst = max(worst, float((inc - full).abs().max() / full.abs().max()))
            if k:
                cache = nxt
    ok = greedy_ok and eos_ok and worst <= REL_TOL
    verdict(
        9,
        "decoding contracts",
        ok,
        f"beam1==greedy={greedy_ok} incremental_max_rel_dev={worst:.2e} no_extension_past_eos={eos_ok}",
    )


def test_c10_objective_ablation(verdict, tmp_path, capsys):
    write_copy_corpus(tmp_path / "toy.txt", documents=60)
    (tmp_path / "cfg.txt").write_text(
        "layers=1\nhidden_size=32\nattention_heads=2\nffn_inner_hidden_size=64\n"
        "max_positions=32\nbatch_size=8\ntraining_steps=25\nmax_len=24\n"
    )
    codes = {}
    for objective in OBJECTIVES:
        codes[objective] = main(
            [
                "pretrain",
                "--config", str(tmp_path / "cfg.txt"),
                "--corpus", str(tmp_path / "toy.txt"),
                "--objective", objective,
                "--out", str(tmp_path / objective.replace("+", "_")),
            ]
        )
    capsys.readouterr()
    finished = {
        o: (tmp_path / o.replace("+", "_") / "checkpoint_0000025.bin").exists() for o in OBJECTIVES
    }
    ok = all(c == 0 for c in codes.values()) and all(finished.values()) and len(OBJECTIVES) == 5
    verdict(10, "objective ablation", ok, " ".join(f"{o}={'ok' if finished[o] else 'fail'}" for o in OBJECTIVES))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
