"""AE / PAR / AR losses, the optimiser schedule, and the pre-training loop."""

from __future__ import annotations

import enum
import json
import logging
import os
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from pmlm.assembly import PmlmInstance, assemble_pmlm_input
from pmlm.checkpoint import load_checkpoint, save_checkpoint
from pmlm.config import RunConfig, TrainConfig
from pmlm.corpus import PackedInput, Vocab, build_vocab, corpus_files, load_pairs
from pmlm.masking import FactorizationOrder, plan_corruption, sample_blockwise_mask
from pmlm.model import ForwardOutput, PmlmModel

log = logging.getLogger(__name__)


class ObjectiveKind(str, enum.Enum):
    AE = "ae"
    AR = "ar"
    PAR = "par"
    AE_AR = "ae+ar"
    AE_PAR = "ae+par"

    @property
    def uses_ae(self) -> bool:
        return self in (ObjectiveKind.AE, ObjectiveKind.AE_AR, ObjectiveKind.AE_PAR)

    @property
    def uses_pseudo(self) -> bool:
        return self is not ObjectiveKind.AE

    @property
    def singleton_steps(self) -> bool:
        return self in (ObjectiveKind.AR, ObjectiveKind.AE_AR)


@dataclass
class LossTerms:
    """Summed negative log-likelihood over ``count`` predictions."""

    total: torch.Tensor
    count: int
    empty_instances: int = 0

    @property
    def mean(self) -> torch.Tensor:
        return self.total / self.count if self.count else self.total

    def __add__(self, other: "LossTerms") -> "LossTerms":
        return LossTerms(self.total + other.total, self.count + other.count, self.empty_instances + other.empty_instances)


def _gather(output: ForwardOutput, instances: Sequence[PmlmInstance], which: str):
    b_idx, r_idx, labels = [], [], []
    empty = 0
    for b, inst in enumerate(instances):
        rows = getattr(inst, f"{which}_rows")
        if len(rows) == 0:
            empty += 1
            continue
        b_idx.append(np.full(len(rows), b))
        r_idx.append(rows)
        labels.append(getattr(inst, f"{which}_labels"))
    if not b_idx:
        return None, None, empty
    b_t = torch.from_numpy(np.concatenate(b_idx))
    r_t = torch.from_numpy(np.concatenate(r_idx))
    y = torch.from_numpy(np.concatenate(labels))
    return output.logits[b_t, r_t], y, empty


def _nll(output: ForwardOutput, instances: Sequence[PmlmInstance], which: str, smoothing: float = 0.0) -> LossTerms:
    logits, y, empty = _gather(output, instances, which)
    if logits is None:
        return LossTerms(output.hidden.new_zeros(()), 0, empty)
    total = F.cross_entropy(logits, y, reduction="sum", label_smoothing=smoothing)
    return LossTerms(total, len(y), empty)


def loss_ae(output: ForwardOutput, instances: Sequence[PmlmInstance]) -> LossTerms:
    """-sum log p(x_m | corrupted context), read at each ``[M]`` slot."""
    return _nll(output, instances, "ae")


def loss_par(output: ForwardOutput, instances: Sequence[PmlmInstance], smoothing: float = 0.0) -> LossTerms:
    """-sum log p(x_m | ...), read at each ``[P]`` token.

    The factorization is carried entirely by the attention mask, so this is a
    plain sum over pseudo rows.
    """
    return _nll(output, instances, "par", smoothing)


def loss_joint(output: ForwardOutput, instances: Sequence[PmlmInstance]) -> LossTerms:
    return loss_ae(output, instances) + loss_par(output, instances)


def training_loss(
    output: ForwardOutput, instances: Sequence[PmlmInstance], objective: ObjectiveKind
) -> tuple[torch.Tensor, LossTerms, LossTerms]:
    """Sum of per-token means of the active terms (what the optimiser sees)."""
    ae = loss_ae(output, instances)
    par = loss_par(output, instances)
    loss = output.hidden.new_zeros(())
    if objective.uses_ae:
        loss = loss + ae.mean
    if objective.uses_pseudo:
        loss = loss + par.mean
    return loss, ae, par


# ---------------------------------------------------------------------------
# instances


def make_training_instance(
    x: PackedInput, vocab: Vocab, objective: ObjectiveKind, seed: int, index: int
) -> tuple[PmlmInstance, FactorizationOrder]:
    """Sample mask, corruption and (for AR) the singleton order from per-example streams.

    Mask positions and corruption depend only on ``(seed, index)``, so every
    objective sees the same masked positions for the same example.
    """
    order = sample_blockwise_mask(x, np.random.default_rng([seed, index, 0]), vocab)
    plan = plan_corruption(order, vocab, np.random.default_rng([seed, index, 1]))
    if objective.singleton_steps:
        order = order.singletons(np.random.default_rng([seed, index, 2]))
    inst = assemble_pmlm_input(x, order, plan, vocab, append_pseudo=objective.uses_pseudo)
    return inst, order


def example_indices(step: int, batch_size: int, n_pairs: int, seed: int) -> list[tuple[int, int]]:
    """(global example index, pair index) for the examples of 1-based ``step``.

    Each epoch walks a fresh permutation of the pairs.
    """
    out = []
    perms: dict[int, np.ndarray] = {}
    for b in range(batch_size):
        g = (step - 1) * batch_size + b
        epoch = g // n_pairs
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, 7, epoch]).permutation(n_pairs)
        out.append((g, int(perms[epoch][g % n_pairs])))
    return out


# ---------------------------------------------------------------------------
# optimisation


def learning_rate_at(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear warmup to ``peak`` at ``warmup``, then linear decay to 0 at ``total``."""
    if warmup > 0 and step <= warmup:
        return peak * step / warmup
    if total <= warmup:
        return peak
    return peak * max(0, total - step) / (total - warmup)


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for _, p in model.named_parameters():
        (decay if p.ndim >= 2 else no_decay).append(p)
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(
        groups, lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_epsilon
    )


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in {name}")
        self.parameter = name


def apply_update(model: torch.nn.Module, optimizer: torch.optim.Optimizer, cfg: TrainConfig, lr: float) -> None:
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            optimizer.zero_grad(set_to_none=True)
            raise NonFiniteGradientError(name)
    if cfg.gradient_clipping > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.gradient_clipping)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()


def train_step(
    model: PmlmModel,
    optimizer: torch.optim.Optimizer,
    instances: Sequence[PmlmInstance],
    cfg: TrainConfig,
    objective: ObjectiveKind,
    step: int,
) -> dict:
    lr = learning_rate_at(step, cfg.learning_rate, cfg.resolved_warmup(), cfg.training_steps)
    optimizer.zero_grad(set_to_none=True)
    passes_before = model.forward_passes
    output = model(instances, train=True)
    loss, ae, par = training_loss(output, instances, objective)
    loss.backward()
    apply_update(model, optimizer, cfg, lr)
    return {
        "step": step,
        "loss": loss.item(),
        "loss_ae": ae.mean.item() if objective.uses_ae else None,
        "loss_par": par.mean.item() if objective.uses_pseudo else None,
        "loss_ae_sum": ae.total.item(),
        "loss_par_sum": par.total.item(),
        "lr": lr,
        "forward_passes": model.forward_passes - passes_before,
        "examples": len(instances),
        "factorization_steps": [inst.num_steps for inst in instances],
    }


# ---------------------------------------------------------------------------
# checkpoints carrying optimiser state


def save_training_state(
    path: str | os.PathLike,
    model: PmlmModel,
    optimizer: torch.optim.Optimizer | None,
    run: RunConfig,
    step: int,
    extra: dict | None = None,
    extra_tensors: dict[str, torch.Tensor] | None = None,
) -> None:
    tensors = dict(model.state_dict())
    tensors.update(extra_tensors or {})
    header = {"kind": "pmlm", "step": step, **run.to_mapping(), **(extra or {})}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                name = names[id(p)]
                tensors[f"optim.{name}.exp_avg"] = state["exp_avg"]
                tensors[f"optim.{name}.exp_avg_sq"] = state["exp_avg_sq"]
                header[f"optim_step.{name}"] = int(state["step"])
    save_checkpoint(path, tensors, header)


def load_training_state(
    path: str | os.PathLike, vocab_size: int | None = None
) -> tuple[PmlmModel, RunConfig, dict[str, str], dict[str, torch.Tensor]]:
    """Rebuild the model from a checkpoint; optimiser tensors are returned, not applied."""
    header, tensors = load_checkpoint(path)
    known = RunConfig().to_mapping()
    run = RunConfig.from_mapping({k: v for k, v in header.items() if k in known})
    if vocab_size is not None and run.model.vocab_size != vocab_size:
        raise ValueError(f"checkpoint vocab size {run.model.vocab_size} != vocabulary size {vocab_size}")
    model = PmlmModel(run.model)
    own = model.state_dict()
    state = {k: tensors[k].to(own[k].dtype) for k in own}
    model.load_state_dict(state)
    return model, run, header, tensors


def restore_optimizer(
    model: PmlmModel, optimizer: torch.optim.Optimizer, header: dict[str, str], tensors: dict[str, torch.Tensor]
) -> None:
    for name, p in model.named_parameters():
        key = f"optim.{name}.exp_avg"
        if key not in tensors:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(header[f"optim_step.{name}"])),
            "exp_avg": tensors[key].to(p.dtype).clone(),
            "exp_avg_sq": tensors[f"optim.{name}.exp_avg_sq"].to(p.dtype).clone(),
        }


# ---------------------------------------------------------------------------
# pre-training loop


def step_seed(seed: int, step: int) -> int:
    return (seed * 1_000_003 + step) % (2**63)


def pretrain(
    run: RunConfig,
    corpus: str | os.PathLike,
    out_dir: str | os.PathLike,
    vocab: Vocab | None = None,
    resume: str | os.PathLike | None = None,
    stop_after: int | None = None,
    on_metrics: Callable[[dict], None] | None = None,
) -> list[str]:
    """Sample -> mask -> assemble -> one forward pass -> loss -> update, per step.

    Writes ``vocab.txt``, ``run_config.txt``, ``metrics.jsonl`` and
    ``checkpoint_<step>.bin`` under ``out_dir``. Returns checkpoint paths.
    ``stop_after`` ends the loop early without changing the schedule.
    """
    os.makedirs(out_dir, exist_ok=True)
    files = corpus_files(corpus)
    if vocab is None:
        texts = (line for path in files for line in open(path, encoding="utf-8"))
        vocab = build_vocab(texts, run.max_vocab, run.tokenizer, run.lowercase)
    run.model.vocab_size = len(vocab)
    run.validate()
    objective = ObjectiveKind(run.objective)
    cfg = run.train
    pairs = load_pairs(files, vocab, cfg.max_len)
    if not pairs:
        raise ValueError(f"{os.fspath(corpus)}: no usable text")

    torch.manual_seed(cfg.seed)
    model = PmlmModel(run.model)
    optimizer = make_optimizer(model, cfg)
    start = 0
    if resume is not None:
        model, _, header, tensors = load_training_state(resume, len(vocab))
        optimizer = make_optimizer(model, cfg)
        restore_optimizer(model, optimizer, header, tensors)
        start = int(header["step"])

    vocab.save(os.path.join(out_dir, "vocab.txt"))
    run.save(os.path.join(out_dir, "run_config.txt"))
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    checkpoints = []
    last = cfg.training_steps if stop_after is None else min(cfg.training_steps, stop_after)
    with open(metrics_path, "a", encoding="utf-8") as metrics_file:
        for step in range(start + 1, last + 1):
            t0 = time.perf_counter()
            instances = [
                make_training_instance(pairs[i], vocab, objective, cfg.seed, g)[0]
                for g, i in example_indices(step, cfg.batch_size, len(pairs), cfg.seed)
            ]
            torch.manual_seed(step_seed(cfg.seed, step))
            metrics = train_step(model, optimizer, instances, cfg, objective, step)
            elapsed = time.perf_counter() - t0
            metrics["tokens_per_sec"] = sum(len(inst) for inst in instances) / max(elapsed, 1e-9)
            metrics_file.write(json.dumps(metrics) + "\n")
            if on_metrics is not None:
                on_metrics(metrics)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 or step == last:
                path = os.path.join(out_dir, f"checkpoint_{step:07d}.bin")
                save_training_state(path, model, optimizer, run, step)
                checkpoints.append(path)
            if step % 50 == 0:
                log.info("step %d loss %.4f lr %.2e", step, metrics["loss"], metrics["lr"])
    return checkpoints
