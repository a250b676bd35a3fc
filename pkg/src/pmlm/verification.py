"""Executable checks of the one-pass PMLM construction.

Each check returns a small report object with a ``passed`` flag and a
line-oriented ``lines()`` rendering used by the ``verify`` command.
"""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from pmlm.assembly import (
    PmlmInstance,
    TokenKind,
    assemble_pmlm_input,
    audit_leakage,
    build_cloze_instance,
    build_step_instance,
    step_subset,
)
from pmlm.config import TrainConfig
from pmlm.corpus import SPECIAL_TOKENS, PackedInput, Vocab, pack_pair
from pmlm.masking import (
    BLOCK_PROB,
    MAX_BLOCK,
    CorruptionPlan,
    FactorizationOrder,
    mask_budget,
    plan_corruption,
    sample_blockwise_mask,
    usable_positions,
)
from pmlm.model import ModelConfig, PmlmModel
from pmlm.objectives import ObjectiveKind, loss_joint, make_optimizer, train_step

EQUIVALENCE_TOL = 1e-5


def toy_vocab(size: int = 32) -> Vocab:
    return Vocab(SPECIAL_TOKENS + tuple(f"w{i}" for i in range(size - len(SPECIAL_TOKENS))))


def random_model(seed: int, vocab_size: int, **overrides) -> PmlmModel:
    """Model with deliberately non-trivial random parameters (dropout off)."""
    cfg = dict(
        vocab_size=vocab_size,
        layers=2,
        hidden_size=32,
        attention_heads=4,
        ffn_inner_hidden_size=64,
        max_positions=96,
        dropout=0.0,
        init_range=0.3,
    )
    cfg.update(overrides)
    torch.manual_seed(seed)
    model = PmlmModel(ModelConfig(**cfg))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "norm" in name and name.endswith("weight"):
                p.add_(0.2 * torch.randn_like(p))
            elif name.endswith("bias") or "relative_bias" in name:
                p.normal_(0.0, 0.5)
    model.eval()
    return model


def random_case(
    rng: np.random.Generator, vocab: Vocab, min_len: int = 4, max_len: int = 40
) -> tuple[PackedInput, FactorizationOrder, CorruptionPlan]:
    n1 = int(rng.integers(1, max_len // 2))
    n2 = int(rng.integers(0, max_len // 2))
    words = np.arange(vocab.first_regular_id, len(vocab))
    s1 = rng.choice(words, n1).tolist()
    s2 = rng.choice(words, n2).tolist()
    x = pack_pair(s1, s2, n1 + n2 + 3, vocab)
    order = sample_blockwise_mask(x, rng, vocab)
    plan = plan_corruption(order, vocab, rng)
    return x, order, plan


def _relative_deviation(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = float(b.abs().max())
    return float((a - b).abs().max()) / max(scale, 1e-30)


@dataclass
class EquivalenceReport:
    instance_id: str
    deviations: dict[str, float]
    threshold: float
    audit_passed: bool = True
    notes: list[str] = field(default_factory=list)

    @property
    def max_deviation(self) -> float:
        return max(self.deviations.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.audit_passed and self.max_deviation <= self.threshold and not self.notes

    def lines(self) -> list[str]:
        verdict = "PASS" if self.passed else "FAIL"
        out = [
            f"{verdict} {self.instance_id} rows={len(self.deviations)} "
            f"max_rel_dev={self.max_deviation:.3e} threshold={self.threshold:.0e}"
        ]
        if not self.audit_passed:
            out.append(f"  leakage audit failed for {self.instance_id}")
        out += [f"  row {k}: rel_dev={v:.3e}" for k, v in self.deviations.items() if v > self.threshold]
        out += [f"  {n}" for n in self.notes]
        return out


@torch.no_grad()
def _logits(model: PmlmModel, inst: PmlmInstance) -> torch.Tensor:
    return model([inst]).logits[0]


def check_ae_equivalence(
    model: PmlmModel,
    x: PackedInput,
    order: FactorizationOrder,
    plan: CorruptionPlan,
    vocab: Vocab,
    extra_edges: Sequence[tuple[int, int]] = (),
    instance_id: str = "instance",
    threshold: float = EQUIVALENCE_TOL,
) -> EquivalenceReport:
    """[M]-row logits of the combined instance vs. a vanilla cloze instance."""
    big = assemble_pmlm_input(x, order, plan, vocab)
    if extra_edges:
        big = big.add_edges(extra_edges)
    audit = audit_leakage(big, vocab)
    cloze = build_cloze_instance(x, order.positions, plan, vocab)
    a, b = _logits(model, big), _logits(model, cloze)
    dev = {}
    for p in order.positions:
        row = big.row_at(TokenKind.CONV_MASK, p)
        dev[big.label(row)] = _relative_deviation(a[row], b[p])
    return EquivalenceReport(instance_id, dev, threshold, audit.passed)


def check_par_equivalence(
    model: PmlmModel,
    x: PackedInput,
    order: FactorizationOrder,
    plan: CorruptionPlan,
    vocab: Vocab,
    extra_edges: Sequence[tuple[int, int]] = (),
    instance_id: str = "instance",
    threshold: float = EQUIVALENCE_TOL,
) -> EquivalenceReport:
    """[P]-row logits of the combined instance vs. one standalone instance per step."""
    big = assemble_pmlm_input(x, order, plan, vocab)
    if extra_edges:
        big = big.add_edges(extra_edges)
    audit = audit_leakage(big, vocab)
    a = _logits(model, big)
    dev: dict[str, float] = {}
    notes = []
    for i in range(1, len(order) + 1):
        small = build_step_instance(x, order, plan, i, vocab)
        subset = step_subset(big, i)
        if not np.array_equal(big.attention_mask[np.ix_(subset, subset)], small.attention_mask):
            notes.append(f"step {i}: standalone mask differs from restricted combined mask")
        b = _logits(model, small)
        for big_row, small_row in zip(big.rows(TokenKind.PSEUDO, i), small.par_rows):
            dev[f"step{i}:{big.label(big_row)}"] = _relative_deviation(a[big_row], b[small_row])
    return EquivalenceReport(instance_id, dev, threshold, audit.passed, notes)


def run_equivalence_suite(kind: str, cases: int = 100, seed: int = 0, vocab_size: int = 32) -> list[EquivalenceReport]:
    vocab = toy_vocab(vocab_size)
    rng = np.random.default_rng(seed)
    check = check_ae_equivalence if kind == "ae" else check_par_equivalence
    reports = []
    for c in range(cases):
        model = random_model(seed * 100_003 + c, len(vocab), use_relative_bias=bool(c % 2 == 0))
        x, order, plan = random_case(rng, vocab)
        reports.append(check(model, x, order, plan, vocab, instance_id=f"case{c:03d}"))
    return reports


# ---------------------------------------------------------------------------
# gradients


@dataclass
class GradientReport:
    max_relative_error: float
    worst_parameter: str
    checked: int
    failures: list[str]
    rtol: float
    atol: float

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        verdict = "PASS" if self.passed else "FAIL"
        out = [
            f"{verdict} gradients checked={self.checked} max_rel_err={self.max_relative_error:.3e} "
            f"worst={self.worst_parameter} rtol={self.rtol:.0e} atol={self.atol:.0e}"
        ]
        return out + [f"  {f}" for f in self.failures[:20]]


def tiny_gradient_setup(seed: int = 0):
    """d_h=8, L=2, vocab-16 model in float64 plus one assembled instance."""
    vocab = toy_vocab(16)
    model = random_model(
        seed,
        len(vocab),
        hidden_size=8,
        attention_heads=2,
        ffn_inner_hidden_size=16,
        max_positions=24,
        relative_buckets=8,
        dtype="float64",
        init_range=0.3,
    )
    rng = np.random.default_rng(seed)
    words = np.arange(vocab.first_regular_id, len(vocab))
    x = pack_pair(rng.choice(words, 6).tolist(), rng.choice(words, 5).tolist(), 24, vocab)
    order = FactorizationOrder.of((3, 4), (9,), (1,))
    plan = plan_corruption(order, vocab, rng)
    inst = assemble_pmlm_input(x, order, plan, vocab)
    return model, inst, vocab


def check_gradients(
    model: PmlmModel | None = None,
    instance: PmlmInstance | None = None,
    step: float = 1e-4,
    rtol: float = 1e-3,
    atol: float = 1e-6,
    seed: int = 0,
) -> GradientReport:
    """Autograd gradients of the joint loss vs. central finite differences, every element."""
    if model is None or instance is None:
        model, instance, _ = tiny_gradient_setup(seed)
    if model.dtype != torch.float64:
        raise ValueError("gradient check needs a float64 model")

    def loss_value() -> torch.Tensor:
        out = model([instance])
        return loss_joint(out, [instance]).total

    model.zero_grad(set_to_none=True)
    loss_value().backward()
    worst, worst_name, checked, failures = 0.0, "", 0, []
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad if p.grad is not None else torch.zeros_like(p)
            flat = p.view(-1)
            g = analytic.reshape(-1)
            for k in range(flat.numel()):
                orig = float(flat[k])
                flat[k] = orig + step
                up = float(loss_value())
                flat[k] = orig - step
                down = float(loss_value())
                flat[k] = orig
                numeric = (up - down) / (2 * step)
                a = float(g[k])
                err = abs(a - numeric)
                scale = max(abs(a), abs(numeric))
                checked += 1
                if err > max(rtol * scale, atol):
                    failures.append(f"{name}[{k}] analytic={a:.6e} numeric={numeric:.6e}")
                if scale > atol and err / scale > worst:
                    worst, worst_name = err / scale, f"{name}[{k}]"
    return GradientReport(worst, worst_name, checked, failures, rtol, atol)


# ---------------------------------------------------------------------------
# sampler statistics


@dataclass
class SamplerReport:
    sequences: int
    length: int
    min_ratio: float
    max_ratio: float
    mean_ratio: float
    ratio_bounds: tuple[float, float]
    block_freq: dict[int, float]
    block_tol: float
    steps: int

    @property
    def ratio_ok(self) -> bool:
        lo, hi = self.ratio_bounds
        return lo <= self.min_ratio and self.max_ratio <= hi

    @property
    def blocks_ok(self) -> bool:
        expected = expected_block_freq()
        return all(abs(self.block_freq.get(k, 0.0) - v) <= self.block_tol for k, v in expected.items())

    @property
    def passed(self) -> bool:
        return self.ratio_ok and self.blocks_ok

    def lines(self) -> list[str]:
        lo, hi = self.ratio_bounds
        freq = " ".join(f"{k}:{self.block_freq.get(k, 0.0):.4f}" for k in range(1, MAX_BLOCK + 1))
        return [
            f"{'PASS' if self.ratio_ok else 'FAIL'} masked_ratio n={self.sequences} len={self.length} "
            f"min={self.min_ratio:.4f} mean={self.mean_ratio:.4f} max={self.max_ratio:.4f} bounds=[{lo:.4f},{hi:.4f}]",
            f"{'PASS' if self.blocks_ok else 'FAIL'} block_lengths steps={self.steps} {freq} tol={self.block_tol}",
        ]


def expected_block_freq() -> dict[int, float]:
    return {1: 0.6, **{k: 0.4 / 5 for k in range(2, MAX_BLOCK + 1)}}


def check_sampler_stats(
    n: int = 10_000, length: int = 512, seed: int = 0, block_tol: float = 0.01, block_prob: float = BLOCK_PROB
) -> SamplerReport:
    """Monte-Carlo tally of mask ratios and block lengths over ``n`` packed sequences."""
    vocab = toy_vocab(16)
    x = pack_pair([vocab.first_regular_id] * (length - 3), [], length, vocab)
    usable = int(usable_positions(x, vocab).sum())
    need = mask_budget(usable)
    rng = np.random.default_rng(seed)
    ratios = np.empty(n)
    tally: Counter[int] = Counter()
    for i in range(n):
        order = sample_blockwise_mask(x, rng, vocab, block_prob)
        ratios[i] = order.masked_count / usable
        tally.update(len(s) for s in order.steps)
    total = sum(tally.values())
    # 0.15..0.17 for long inputs; short inputs may overshoot by one block
    upper = max(0.17, (need + MAX_BLOCK - 1) / usable)
    return SamplerReport(
        sequences=n,
        length=length,
        min_ratio=float(ratios.min()),
        max_ratio=float(ratios.max()),
        mean_ratio=float(ratios.mean()),
        ratio_bounds=(0.15, upper),
        block_freq={k: tally[k] / total for k in sorted(tally)},
        block_tol=block_tol,
        steps=total,
    )


# ---------------------------------------------------------------------------
# forward-pass accounting


@dataclass
class PassReport:
    examples: int
    measured: int
    naive: int

    @property
    def reuse_ratio(self) -> float:
        return self.naive / self.measured if self.measured else float("nan")

    @property
    def passed(self) -> bool:
        return self.measured == self.examples

    def lines(self) -> list[str]:
        return [
            f"{'PASS' if self.passed else 'FAIL'} forward_passes examples={self.examples} "
            f"measured={self.measured} naive={self.naive} reuse={self.reuse_ratio:.2f}x"
        ]


def count_forward_passes(records: Sequence[dict]) -> PassReport:
    """Audit training-step records (``train_step`` metrics).

    The naive cost is one cloze pass plus one pass per factorization step,
    per example.
    """
    examples = sum(r["examples"] for r in records)
    measured = sum(r["forward_passes"] for r in records)
    naive = sum(1 + s for r in records for s in r["factorization_steps"])
    return PassReport(examples, measured, naive)


def forward_pass_audit(
    objective: ObjectiveKind = ObjectiveKind.AE_PAR, batch: int = 4, steps_per_example: int = 10, seed: int = 0
) -> PassReport:
    """One real training step on ``batch`` examples with ``steps_per_example`` steps each."""
    vocab = toy_vocab(32)
    rng = np.random.default_rng(seed)
    words = np.arange(vocab.first_regular_id, len(vocab))
    instances = []
    for _ in range(batch):
        x = pack_pair(rng.choice(words, 24).tolist(), rng.choice(words, 16).tolist(), 43, vocab)
        usable = np.flatnonzero(usable_positions(x, vocab))
        chosen = sorted(rng.choice(usable, steps_per_example, replace=False).tolist())
        order = FactorizationOrder(tuple((p,) for p in rng.permutation(chosen).tolist()))
        if objective.singleton_steps:
            order = order.singletons(rng)
        plan = plan_corruption(order, vocab, rng)
        instances.append(assemble_pmlm_input(x, order, plan, vocab, append_pseudo=objective.uses_pseudo))
    model = random_model(seed, len(vocab))
    cfg = TrainConfig(batch_size=batch, training_steps=1, warmup_steps=1)
    metrics = train_step(model, make_optimizer(model, cfg), instances, cfg, objective, 1)
    # AE-only instances carry no pseudo tokens; the naive count still follows the order
    metrics["factorization_steps"] = [steps_per_example] * batch
    return count_forward_passes([metrics])


@dataclass
class LeakageSweep:
    instances: int
    leaking: int
    injected_detected: int
    injected: int
    first_leak: str = ""

    @property
    def passed(self) -> bool:
        return self.leaking == 0 and self.injected_detected == self.injected

    def lines(self) -> list[str]:
        verdict = "PASS" if self.passed else "FAIL"
        out = [
            f"{verdict} leakage_audit instances={self.instances} leaking={self.leaking} "
            f"injected_detected={self.injected_detected}/{self.injected}"
        ]
        if self.first_leak:
            out.append(f"  first leak: {self.first_leak}")
        return out


def inject_leak(instance: PmlmInstance, rng: np.random.Generator) -> PmlmInstance:
    """Let a random context token attend a random original token.

    Every pseudo token can read every context token, so this always opens
    an implicit path to a forbidden target.
    """
    ctx = instance.rows(TokenKind.CONTEXT)
    orig = instance.rows(TokenKind.ORIGINAL)
    return instance.add_edges([(int(rng.choice(ctx)), int(rng.choice(orig)))])


def check_leakage(n: int = 1000, seed: int = 0, vocab_size: int = 32) -> LeakageSweep:
    """Audit ``n`` random combined instances, plus one with an injected bad edge each."""
    vocab = toy_vocab(vocab_size)
    rng = np.random.default_rng(seed)
    leaking = detected = 0
    first = ""
    for _ in range(n):
        x, order, plan = random_case(rng, vocab)
        inst = assemble_pmlm_input(x, order, plan, vocab)
        report = audit_leakage(inst, vocab)
        if not report.passed:
            leaking += 1
            first = first or report.describe()[0]
        detected += not audit_leakage(inject_leak(inst, rng), vocab).passed
    return LeakageSweep(n, leaking, detected, n, first)


# ---------------------------------------------------------------------------


def run_suite(name: str, seed: int = 0, quick: bool = False) -> tuple[bool, list[str]]:
    """Run one named suite (ae, par, leak, grad, sampler, passes) and render its report."""
    t0 = time.perf_counter()
    lines: list[str] = []
    if name in ("ae", "par"):
        reports = run_equivalence_suite(name, cases=20 if quick else 100, seed=seed)
        ok = all(r.passed for r in reports)
        for r in reports:
            if not r.passed:
                lines += r.lines()
        worst = max(r.max_deviation for r in reports)
        lines.insert(0, f"{'PASS' if ok else 'FAIL'} {name}_equivalence cases={len(reports)} max_rel_dev={worst:.3e}")
    elif name == "leak":
        report = check_leakage(n=200 if quick else 1000, seed=seed)
        ok, lines = report.passed, report.lines()
    elif name == "grad":
        report = check_gradients(seed=seed)
        ok, lines = report.passed, report.lines()
    elif name == "sampler":
        report = check_sampler_stats(n=2_000 if quick else 10_000, seed=seed)
        ok, lines = report.passed, report.lines()
    elif name == "passes":
        reports = [forward_pass_audit(kind, seed=seed) for kind in ObjectiveKind]
        ok = all(r.passed for r in reports)
        for kind, r in zip(ObjectiveKind, reports):
            lines += [f"{line} objective={kind.value}" for line in r.lines()]
    else:
        raise ValueError(f"unknown suite {name!r}")
    lines.append(f"# suite {name} took {time.perf_counter() - t0:.1f}s")
    return ok, lines
