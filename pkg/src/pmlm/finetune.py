"""Classification and sequence-to-sequence fine-tuning, and beam-search decoding."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from pmlm.assembly import (
    PmlmInstance,
    TokenKind,
    build_attention_mask,
    build_decode_input,
    build_seq2seq_input,
)
from pmlm.config import TrainConfig
from pmlm.corpus import CorpusError, Vocab
from pmlm.objectives import apply_update, learning_rate_at, loss_par, make_optimizer
from pmlm.model import KVCache, PmlmModel

log = logging.getLogger(__name__)


@dataclass
class FinetuneConfig:
    steps: int = 300
    batch_size: int = 16
    learning_rate: float = 1e-3
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    label_smoothing: float = 0.1
    freeze_body: bool = False
    seed: int = 0
    dropout: float | None = None  # None keeps the checkpoint's rate

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            warmup_ratio=self.warmup_ratio,
            training_steps=self.steps,
            weight_decay=self.weight_decay,
            seed=self.seed,
        )


def read_tsv(path: str | os.PathLike) -> list[tuple[str, str]]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise ValueError(f"{os.fspath(path)}:{lineno}: expected 2 tab-separated columns")
            rows.append((cols[0], cols[1]))
    return rows


def _batches(n: int, batch_size: int, step: int, seed: int) -> list[int]:
    g0 = (step - 1) * batch_size
    out = []
    perms: dict[int, np.ndarray] = {}
    for g in range(g0, g0 + batch_size):
        epoch = g // n
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, 11, epoch]).permutation(n)
        out.append(int(perms[epoch][g % n]))
    return out


def _set_dropout(model: nn.Module, rate: float | None) -> None:
    if rate is None:
        return
    for m in model.modules():
        if isinstance(m, nn.Dropout):
            m.p = rate


# ---------------------------------------------------------------------------
# classification


class ClassifierHead(nn.Module):
    """Softmax classifier over the top hidden state of ``[SOS]``."""

    def __init__(self, hidden_size: int, num_labels: int, std: float = 0.02):
        super().__init__()
        self.proj = nn.Linear(hidden_size, num_labels)
        nn.init.normal_(self.proj.weight, 0.0, std)
        nn.init.zeros_(self.proj.bias)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.proj(hidden[:, 0])


def classification_instance(ids: Sequence[int], vocab: Vocab, max_len: int) -> PmlmInstance:
    """``[SOS] TEXT [EOS]`` with full bidirectional attention."""
    ids = [t for t in ids if t not in vocab.special_ids][: max_len - 2]
    tok = np.asarray([vocab.sos, *ids, vocab.eos], dtype=np.int64)
    n = len(tok)
    kinds = np.full(n, TokenKind.CONTEXT, dtype=np.int64)
    steps = np.zeros(n, dtype=np.int64)
    return PmlmInstance(
        token_ids=tok,
        position_ids=np.arange(n, dtype=np.int64),
        segment_ids=np.zeros(n, dtype=np.int64),
        kinds=kinds,
        steps=steps,
        attention_mask=build_attention_mask(kinds, steps),
    )


class SequenceClassifier(nn.Module):
    def __init__(self, body: PmlmModel, num_labels: int):
        super().__init__()
        self.body = body
        self.head = ClassifierHead(body.config.hidden_size, num_labels).to(body.dtype)
        self.num_labels = num_labels

    def forward(self, instances: Sequence[PmlmInstance], train: bool = False) -> torch.Tensor:
        out = self.body(instances, train=train, with_logits=False)
        return self.head(out.hidden)

    @torch.no_grad()
    def predict(self, instances: Sequence[PmlmInstance]) -> np.ndarray:
        return self(instances).argmax(-1).numpy()


def finetune_classifier(
    model: PmlmModel,
    data: Sequence[tuple[Sequence[int], int]],
    num_labels: int,
    vocab: Vocab,
    cfg: FinetuneConfig,
    max_len: int | None = None,
    history: list | None = None,
) -> SequenceClassifier:
    """Cross-entropy over labels; trains the head, plus the body unless frozen."""
    for _, label in data:
        if not 0 <= label < num_labels:
            raise ValueError(f"label {label} out of range [0, {num_labels})")
    if not data:
        raise ValueError("no training data")
    max_len = max_len or model.config.max_positions
    examples = [(classification_instance(ids, vocab, max_len), int(y)) for ids, y in data]
    torch.manual_seed(cfg.seed)
    clf = SequenceClassifier(model, num_labels)
    _set_dropout(clf, cfg.dropout)
    for p in model.parameters():
        p.requires_grad_(not cfg.freeze_body)
    tcfg = cfg.train_config()
    optimizer = make_optimizer(clf.head if cfg.freeze_body else clf, tcfg)
    for step in range(1, cfg.steps + 1):
        idx = _batches(len(examples), cfg.batch_size, step, cfg.seed)
        instances = [examples[i][0] for i in idx]
        labels = torch.tensor([examples[i][1] for i in idx])
        optimizer.zero_grad(set_to_none=True)
        torch.manual_seed(cfg.seed * 7919 + step)
        loss = F.cross_entropy(clf(instances, train=True), labels)
        loss.backward()
        lr = learning_rate_at(step, tcfg.learning_rate, tcfg.resolved_warmup(), tcfg.training_steps)
        apply_update(clf.head if cfg.freeze_body else clf, optimizer, tcfg, lr)
        if history is not None:
            history.append({"step": step, "loss": loss.item(), "lr": lr})
    for p in model.parameters():
        p.requires_grad_(True)
    clf.eval()
    return clf


# ---------------------------------------------------------------------------
# sequence to sequence


def seq2seq_loss(
    model: PmlmModel, instances: Sequence[PmlmInstance], smoothing: float, train: bool
) -> torch.Tensor:
    out = model(instances, train=train)
    return loss_par(out, instances, smoothing).mean


def finetune_seq2seq(
    model: PmlmModel,
    pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
    vocab: Vocab,
    cfg: FinetuneConfig,
    max_len: int | None = None,
    history: list | None = None,
) -> tuple[PmlmModel, int]:
    """Label-smoothed cross-entropy at every ``[P]`` row, final ``[EOS]`` included.

    Returns the model and the number of pairs skipped for length.
    """
    max_len = max_len or model.config.max_positions
    instances, skipped = [], 0
    for src, tgt in pairs:
        try:
            instances.append(build_seq2seq_input(src, tgt, vocab, max_len))
        except CorpusError:
            skipped += 1
    if skipped:
        log.warning("skipped %d pairs longer than %d positions", skipped, max_len)
    if not instances:
        raise ValueError("no usable training pairs")
    _set_dropout(model, cfg.dropout)
    tcfg = cfg.train_config()
    optimizer = make_optimizer(model, tcfg)
    for step in range(1, cfg.steps + 1):
        batch = [instances[i] for i in _batches(len(instances), cfg.batch_size, step, cfg.seed)]
        optimizer.zero_grad(set_to_none=True)
        torch.manual_seed(cfg.seed * 7919 + step)
        loss = seq2seq_loss(model, batch, cfg.label_smoothing, train=True)
        loss.backward()
        lr = learning_rate_at(step, tcfg.learning_rate, tcfg.resolved_warmup(), tcfg.training_steps)
        apply_update(model, optimizer, tcfg, lr)
        if history is not None:
            history.append({"step": step, "loss": loss.item(), "lr": lr})
    model.eval()
    return model, skipped


# ---------------------------------------------------------------------------
# decoding


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float
    finished: bool = False
    parent: int = -1  # row of the live batch this one was extended from

    def score(self, alpha: float) -> float:
        return self.logprob / length_penalty(len(self.tokens), alpha)


@dataclass
class BeamState:
    live: list[Hypothesis]
    finished: list[Hypothesis] = field(default_factory=list)
    beam: int = 5
    alpha: float = 0.7


@torch.no_grad()
def next_token_logprobs(model: PmlmModel, src: Sequence[int], prefixes: Sequence[Sequence[int]], vocab: Vocab) -> torch.Tensor:
    """Log-probabilities of the next target token for each prefix, recomputing the whole prefix."""
    instances = [build_decode_input(src, p, vocab) for p in prefixes]
    out = model(instances)
    rows = torch.tensor([len(inst) - 1 for inst in instances])
    logits = out.logits[torch.arange(len(instances)), rows]
    return torch.log_softmax(logits.double(), dim=-1)


class IncrementalDecoder:
    """Next-token distributions from cached keys/values.

    The cache holds the source and every committed target token. Each call
    feeds the newest target token (committing it) and a fresh ``[P]``; the
    ``[P]`` is scored and then dropped.
    """

    def __init__(self, model: PmlmModel, src: Sequence[int], vocab: Vocab):
        if any(t in vocab.special_ids for t in src):
            raise CorpusError("special token inside source")
        self.model, self.vocab = model, vocab
        tok = torch.tensor([[vocab.sos, *src, vocab.eos]])
        n = tok.shape[1]
        self.start = n
        _, self.root = model.encode_step(
            tok, torch.arange(n)[None], torch.zeros_like(tok), torch.ones(1, n, n, dtype=torch.bool)
        )

    @torch.no_grad()
    def step(self, cache: KVCache, prefixes: Sequence[Sequence[int]]) -> tuple[torch.Tensor, KVCache]:
        """``cache`` covers all but the last token of each (equal-length) prefix."""
        b, length = len(prefixes), len(prefixes[0])
        if any(len(p) != length for p in prefixes):
            raise ValueError("prefixes must share a length")
        past = len(cache)
        if length == 0:
            tok = torch.full((b, 1), self.vocab.pseudo)
            pos = torch.full((b, 1), self.start)
            mask = torch.ones(b, 1, past + 1, dtype=torch.bool)
        else:
            last = torch.tensor([[int(p[-1])] for p in prefixes])
            tok = torch.cat([last, torch.full((b, 1), self.vocab.pseudo)], dim=1)
            pos = torch.tensor([[self.start + length - 1, self.start + length]]).expand(b, 2)
            mask = torch.ones(b, 2, past + 2, dtype=torch.bool)
            mask[:, 0, past + 1] = False  # the committed token never sees [P]
        hidden, present = self.model.encode_step(tok, pos, torch.ones_like(tok), mask, cache)
        logits = self.model.classify_tokens(hidden[:, -1])
        committed = present.truncate(len(present) - 1)
        return torch.log_softmax(logits.double(), dim=-1), committed


def _banned(vocab: Vocab) -> list[int]:
    # only [EOS] among the specials may be generated
    return sorted(vocab.special_ids - {vocab.eos})


@torch.no_grad()
def decode_beam(
    model: PmlmModel,
    src: Sequence[int],
    vocab: Vocab,
    beam: int = 5,
    alpha: float = 0.7,
    max_len: int = 48,
    return_state: bool = False,
    incremental: bool = True,
):
    """Beam search; hypotheses are frozen once they emit ``[EOS]``.

    Ranking uses ``logprob / ((5 + len) / 6) ** alpha`` with ``len`` counting
    the generated tokens including ``[EOS]``. Returns the best finished
    hypothesis' tokens (without ``[EOS]``), or the best live one if none
    finished within ``max_len`` tokens. ``incremental=False`` recomputes the
    full prefix at every step instead of using the key/value cache.
    """
    if beam < 1 or max_len < 1:
        raise ValueError("beam and max_len must be >= 1")
    max_len = min(max_len, model.config.max_positions - len(src) - 2)
    model.eval()
    state = BeamState([Hypothesis([], 0.0)], beam=beam, alpha=alpha)
    banned = _banned(vocab)
    decoder = IncrementalDecoder(model, src, vocab) if incremental else None
    cache = decoder.root if decoder else None
    for _ in range(max_len):
        prefixes = [h.tokens for h in state.live]
        if decoder is not None:
            logp, cache = decoder.step(cache, prefixes)
        else:
            logp = next_token_logprobs(model, src, prefixes, vocab)
        logp[:, banned] = -math.inf
        k = min(beam, logp.shape[1])
        top_lp, top_ids = logp.topk(k, dim=-1)
        candidates = []
        for i, (h, lps, ids) in enumerate(zip(state.live, top_lp.tolist(), top_ids.tolist())):
            for lp, tok in zip(lps, ids):
                if lp == -math.inf:
                    continue
                candidates.append(Hypothesis(h.tokens + [tok], h.logprob + lp, tok == vocab.eos, i))
        candidates.sort(key=lambda c: c.score(alpha), reverse=True)
        state.live = []
        for c in candidates[:beam]:
            (state.finished if c.finished else state.live).append(c)
        if not state.live or len(state.finished) >= beam:
            break
        if decoder is not None:
            cache = cache.select([h.parent for h in state.live])
    pool = state.finished or state.live
    best = max(pool, key=lambda c: c.score(alpha))
    tokens = best.tokens[:-1] if best.finished else best.tokens
    return (tokens, state) if return_state else tokens


@torch.no_grad()
def decode_greedy(model: PmlmModel, src: Sequence[int], vocab: Vocab, max_len: int = 48) -> list[int]:
    """Arg-max decoding, written independently of the beam search."""
    max_len = min(max_len, model.config.max_positions - len(src) - 2)
    banned = _banned(vocab)
    out: list[int] = []
    for _ in range(max_len):
        logp = next_token_logprobs(model, src, [out], vocab)[0]
        logp[banned] = -math.inf
        tok = int(logp.argmax())
        if tok == vocab.eos:
            break
        out.append(tok)
    return out
