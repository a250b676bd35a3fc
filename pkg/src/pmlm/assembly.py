"""Combined PMLM instances, their self-attention masks, and oracle instances.

Every token carries a kind (context, conventional mask, original masked
token, pseudo mask) and, for the last two, a 1-based factorization step.
Visibility (row attends column):

* context and ``[M]`` tokens attend context and ``[M]`` tokens only;
* original tokens of step i additionally attend originals of steps <= i;
* pseudo tokens of step i attend context, ``[M]``, originals of steps < i,
  and the pseudo tokens of step i.

Positions are indices into the packed sequence; appended tokens reuse the
position and segment of the token they stand for.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from pmlm.corpus import CorpusError, PackedInput, Vocab
from pmlm.masking import CorruptionPlan, FactorizationOrder, usable_positions


class TokenKind(enum.IntEnum):
    CONTEXT = 0
    CONV_MASK = 1
    ORIGINAL = 2
    PSEUDO = 3


_KIND_SHORT = {TokenKind.CONTEXT: "C", TokenKind.CONV_MASK: "K", TokenKind.ORIGINAL: "O", TokenKind.PSEUDO: "P"}


@dataclass(frozen=True, eq=False)
class PmlmInstance:
    token_ids: np.ndarray
    position_ids: np.ndarray
    segment_ids: np.ndarray
    kinds: np.ndarray
    steps: np.ndarray
    attention_mask: np.ndarray  # [n, n] bool, True = row may attend column
    ae_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ae_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    par_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    par_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def num_steps(self) -> int:
        return int(self.steps.max(initial=0))

    def rows(self, kind: TokenKind, step: int | None = None) -> np.ndarray:
        sel = self.kinds == kind
        if step is not None:
            sel &= self.steps == step
        return np.flatnonzero(sel)

    def row_at(self, kind: TokenKind, position: int) -> int:
        hit = np.flatnonzero((self.kinds == kind) & (self.position_ids == position))
        if len(hit) != 1:
            raise KeyError(f"no unique {kind.name} token at position {position}")
        return int(hit[0])

    def label(self, row: int, vocab: Vocab | None = None) -> str:
        """Short human label, e.g. ``x6``, ``[M]4``, ``[P]2``."""
        kind = TokenKind(int(self.kinds[row]))
        pos = int(self.position_ids[row])
        if kind is TokenKind.CONV_MASK:
            return f"[M]{pos}"
        if kind is TokenKind.PSEUDO:
            return f"[P]{pos}"
        if vocab is not None and int(self.token_ids[row]) in vocab.special_ids:
            return f"{vocab.id_to_token[int(self.token_ids[row])]}{pos}"
        return f"x{pos}"

    def with_mask(self, mask: np.ndarray) -> "PmlmInstance":
        return replace(self, attention_mask=np.asarray(mask, dtype=bool))

    def add_edges(self, edges: Sequence[tuple[int, int]]) -> "PmlmInstance":
        """Copy with extra (row, column) attention permissions; used for fault injection."""
        mask = self.attention_mask.copy()
        for r, c in edges:
            mask[r, c] = True
        return self.with_mask(mask)


def build_attention_mask(kinds: Sequence[int], steps: Sequence[int]) -> np.ndarray:
    kinds = np.asarray(kinds)
    steps = np.asarray(steps)
    shared = (kinds == TokenKind.CONTEXT) | (kinds == TokenKind.CONV_MASK)
    orig = kinds == TokenKind.ORIGINAL
    pseudo = kinds == TokenKind.PSEUDO
    row_step = steps[:, None]
    col_step = steps[None, :]

    allow = np.broadcast_to(shared[None, :], (len(kinds), len(kinds))).copy()
    allow |= orig[:, None] & orig[None, :] & (col_step <= row_step)
    allow |= pseudo[:, None] & orig[None, :] & (col_step < row_step)
    allow |= pseudo[:, None] & pseudo[None, :] & (col_step == row_step)
    return allow


def _check_consistent(x: PackedInput, order: FactorizationOrder, plan: CorruptionPlan, vocab: Vocab) -> None:
    try:
        order.validate(len(x), usable_positions(x, vocab))
    except ValueError as e:
        raise CorpusError(f"inconsistent factorization order: {e}") from e
    if set(plan.actions) != set(order.positions):
        raise CorpusError("corruption plan does not cover exactly the masked positions")


def _base(x: PackedInput, plan: CorruptionPlan, vocab: Vocab):
    tokens, segments = x.as_arrays()
    corrupted = tokens.copy()
    kinds = np.full(len(tokens), TokenKind.CONTEXT, dtype=np.int64)
    for p in plan.actions:
        corrupted[p] = plan.slot_token(p, int(tokens[p]), vocab)
        kinds[p] = TokenKind.CONV_MASK
    return tokens, corrupted, segments, kinds


def assemble_pmlm_input(
    x: PackedInput,
    order: FactorizationOrder,
    plan: CorruptionPlan,
    vocab: Vocab,
    append_pseudo: bool = True,
) -> PmlmInstance:
    """Lay out ``x`` with ``[M]`` slots in place, then per step ``[P]`` block + originals.

    With ``append_pseudo=False`` only the in-place (autoencoding) view is
    built; the result then matches :func:`build_cloze_instance`.
    """
    _check_consistent(x, order, plan, vocab)
    original, corrupted, segments, kinds = _base(x, plan, vocab)
    n = len(original)
    tok = list(corrupted)
    pos = list(range(n))
    seg = list(segments)
    kind = list(kinds)
    step = [0] * n
    par_rows, par_labels = [], []
    if append_pseudo:
        for i, block in enumerate(order.steps, start=1):
            for p in block:
                par_rows.append(len(tok))
                par_labels.append(int(original[p]))
                tok.append(vocab.pseudo)
                pos.append(p)
                seg.append(int(segments[p]))
                kind.append(TokenKind.PSEUDO)
                step.append(i)
            for p in block:
                tok.append(int(original[p]))
                pos.append(p)
                seg.append(int(segments[p]))
                kind.append(TokenKind.ORIGINAL)
                step.append(i)
    kind_arr = np.asarray(kind, dtype=np.int64)
    step_arr = np.asarray(step, dtype=np.int64)
    ae = order.positions
    return PmlmInstance(
        token_ids=np.asarray(tok, dtype=np.int64),
        position_ids=np.asarray(pos, dtype=np.int64),
        segment_ids=np.asarray(seg, dtype=np.int64),
        kinds=kind_arr,
        steps=step_arr,
        attention_mask=build_attention_mask(kind_arr, step_arr),
        ae_rows=np.asarray(ae, dtype=np.int64),
        ae_labels=original[np.asarray(ae, dtype=np.int64)] if ae else np.zeros(0, dtype=np.int64),
        par_rows=np.asarray(par_rows, dtype=np.int64),
        par_labels=np.asarray(par_labels, dtype=np.int64),
    )


def build_cloze_instance(
    x: PackedInput, masked: Sequence[int], plan: CorruptionPlan, vocab: Vocab
) -> PmlmInstance:
    """Vanilla BERT-style instance: corrupted sequence, full attention, AE targets."""
    masked = sorted(int(p) for p in masked)
    if set(masked) != set(plan.actions):
        raise CorpusError("corruption plan does not cover exactly the masked positions")
    original, corrupted, segments, kinds = _base(x, plan, vocab)
    n = len(original)
    idx = np.asarray(masked, dtype=np.int64)
    return PmlmInstance(
        token_ids=corrupted,
        position_ids=np.arange(n, dtype=np.int64),
        segment_ids=segments,
        kinds=kinds,
        steps=np.zeros(n, dtype=np.int64),
        attention_mask=np.ones((n, n), dtype=bool),
        ae_rows=idx,
        ae_labels=original[idx],
    )


def build_step_instance(
    x: PackedInput, order: FactorizationOrder, plan: CorruptionPlan, step: int, vocab: Vocab
) -> PmlmInstance:
    """Standalone instance holding only what step ``step``'s pseudo tokens may see.

    Layout: corrupted base sequence, originals of earlier steps (in step
    order), then this step's ``[P]`` tokens. The mask is written out directly
    rather than derived from :func:`build_attention_mask`.
    """
    if not 1 <= step <= len(order):
        raise IndexError(f"step {step} out of range 1..{len(order)}")
    _check_consistent(x, order, plan, vocab)
    original, corrupted, segments, kinds = _base(x, plan, vocab)
    n = len(original)
    tok, pos, seg = list(corrupted), list(range(n)), list(segments)
    kind, stp = list(kinds), [0] * n
    for j, block in enumerate(order.steps[: step - 1], start=1):
        for p in block:
            tok.append(int(original[p]))
            pos.append(p)
            seg.append(int(segments[p]))
            kind.append(TokenKind.ORIGINAL)
            stp.append(j)
    first_pseudo = len(tok)
    for p in order.steps[step - 1]:
        tok.append(vocab.pseudo)
        pos.append(p)
        seg.append(int(segments[p]))
        kind.append(TokenKind.PSEUDO)
        stp.append(step)
    total = len(tok)

    mask = np.zeros((total, total), dtype=bool)
    mask[:, :n] = True
    for r in range(n, first_pseudo):
        for c in range(n, first_pseudo):
            mask[r, c] = stp[c] <= stp[r]
    mask[first_pseudo:, :] = True

    block = order.steps[step - 1]
    return PmlmInstance(
        token_ids=np.asarray(tok, dtype=np.int64),
        position_ids=np.asarray(pos, dtype=np.int64),
        segment_ids=np.asarray(seg, dtype=np.int64),
        kinds=np.asarray(kind, dtype=np.int64),
        steps=np.asarray(stp, dtype=np.int64),
        attention_mask=mask,
        par_rows=np.arange(first_pseudo, total, dtype=np.int64),
        par_labels=original[np.asarray(block, dtype=np.int64)],
    )


def step_subset(instance: PmlmInstance, step: int) -> np.ndarray:
    """Rows of ``instance`` visible to the pseudo tokens of ``step``, in layout order."""
    k, s = instance.kinds, instance.steps
    keep = (k == TokenKind.CONTEXT) | (k == TokenKind.CONV_MASK)
    keep |= (k == TokenKind.ORIGINAL) & (s < step)
    keep |= (k == TokenKind.PSEUDO) & (s == step)
    return np.flatnonzero(keep)


def _seq2seq_base(src: Sequence[int], vocab: Vocab):
    special = vocab.special_ids
    if any(t in special for t in src):
        raise CorpusError("special token inside source")
    tok = [vocab.sos, *src, vocab.eos]
    return tok, list(range(len(tok))), [0] * len(tok)


def build_seq2seq_input(
    src: Sequence[int], tgt: Sequence[int], vocab: Vocab, max_len: int | None = None
) -> PmlmInstance:
    """``[SOS] SRC [EOS]`` as context, then per target token (incl. final ``[EOS]``) a ``[P]`` and the token."""
    if any(t in vocab.special_ids for t in tgt):
        raise CorpusError("special token inside target")
    target = [*tgt, vocab.eos]
    n_positions = len(src) + 2 + len(target)
    if max_len is not None and n_positions > max_len:
        raise CorpusError(f"sequence too long: {n_positions} positions > {max_len}")
    tok, pos, seg = _seq2seq_base(src, vocab)
    kind = [TokenKind.CONTEXT] * len(tok)
    stp = [0] * len(tok)
    start = len(tok)
    par_rows = []
    for k, t in enumerate(target, start=1):
        par_rows.append(len(tok))
        tok += [vocab.pseudo, t]
        pos += [start + k - 1] * 2
        seg += [1, 1]
        kind += [TokenKind.PSEUDO, TokenKind.ORIGINAL]
        stp += [k, k]
    kind_arr = np.asarray(kind, dtype=np.int64)
    stp_arr = np.asarray(stp, dtype=np.int64)
    return PmlmInstance(
        token_ids=np.asarray(tok, dtype=np.int64),
        position_ids=np.asarray(pos, dtype=np.int64),
        segment_ids=np.asarray(seg, dtype=np.int64),
        kinds=kind_arr,
        steps=stp_arr,
        attention_mask=build_attention_mask(kind_arr, stp_arr),
        par_rows=np.asarray(par_rows, dtype=np.int64),
        par_labels=np.asarray(target, dtype=np.int64),
    )


def build_decode_input(src: Sequence[int], prefix: Sequence[int], vocab: Vocab) -> PmlmInstance:
    """Source, the already generated ``prefix``, and one ``[P]`` for the next token.

    The prediction row is the last row.
    """
    tok, pos, seg = _seq2seq_base(src, vocab)
    kind = [TokenKind.CONTEXT] * len(tok)
    stp = [0] * len(tok)
    start = len(tok)
    for k, t in enumerate(prefix, start=1):
        tok.append(int(t))
        pos.append(start + k - 1)
        seg.append(1)
        kind.append(TokenKind.ORIGINAL)
        stp.append(k)
    nxt = len(prefix) + 1
    tok.append(vocab.pseudo)
    pos.append(start + nxt - 1)
    seg.append(1)
    kind.append(TokenKind.PSEUDO)
    stp.append(nxt)
    kind_arr = np.asarray(kind, dtype=np.int64)
    stp_arr = np.asarray(stp, dtype=np.int64)
    return PmlmInstance(
        token_ids=np.asarray(tok, dtype=np.int64),
        position_ids=np.asarray(pos, dtype=np.int64),
        segment_ids=np.asarray(seg, dtype=np.int64),
        kinds=kind_arr,
        steps=stp_arr,
        attention_mask=build_attention_mask(kind_arr, stp_arr),
        par_rows=np.asarray([len(tok) - 1], dtype=np.int64),
        par_labels=np.zeros(1, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# leakage audit


def transitive_closure(mask: np.ndarray) -> np.ndarray:
    """reach[i, j] iff information at j can flow to i through attention edges."""
    reach = np.asarray(mask, dtype=bool) | np.eye(len(mask), dtype=bool)
    while True:
        f = reach.astype(np.float32)
        nxt = (f @ f) > 0
        if np.array_equal(nxt, reach):
            return reach
        reach = nxt


def _bfs_tree(adjacency: list[np.ndarray], src: int) -> dict[int, int]:
    prev = {src: -1}
    queue = deque([src])
    while queue:
        r = queue.popleft()
        for c in adjacency[r]:
            c = int(c)
            if c not in prev:
                prev[c] = r
                queue.append(c)
    return prev


def _path(prev: dict[int, int], dst: int) -> list[int]:
    out = [dst]
    while prev[out[-1]] != -1:
        out.append(prev[out[-1]])
    return out[::-1]


@dataclass
class LeakageReport:
    passed: bool
    violations: list[list[int]]
    labels: list[str]

    def describe(self) -> list[str]:
        return [" -> ".join(self.labels[r] for r in path) for path in self.violations]

    def __str__(self) -> str:
        head = "PASS" if self.passed else f"FAIL ({len(self.violations)} violating paths)"
        return "\n".join([f"audit: {head}", *(f"  leak: {d}" for d in self.describe())])


def audit_leakage(instance: PmlmInstance, vocab: Vocab | None = None) -> LeakageReport:
    """Check every multi-hop attention path for explicit and implicit leaks.

    Forbidden: a pseudo token of step i reaching an original token of step
    j >= i, and any context or ``[M]`` token reaching an original token.
    """
    mask = instance.attention_mask
    reach = transitive_closure(mask)
    kinds, steps = instance.kinds, instance.steps
    orig = kinds == TokenKind.ORIGINAL
    shared = (kinds == TokenKind.CONTEXT) | (kinds == TokenKind.CONV_MASK)
    bad = np.zeros_like(reach)
    bad |= shared[:, None] & orig[None, :]
    bad |= (kinds == TokenKind.PSEUDO)[:, None] & orig[None, :] & (steps[None, :] >= steps[:, None])
    hits = np.argwhere(reach & bad)
    adjacency = [np.flatnonzero(row) for row in mask] if len(hits) else []
    trees: dict[int, dict[int, int]] = {}
    violations = []
    for r, c in hits:
        if int(r) not in trees:
            trees[int(r)] = _bfs_tree(adjacency, int(r))
        tree = trees[int(r)]
        violations.append(_path(tree, int(c)))
    labels = [instance.label(r, vocab) for r in range(len(instance))]
    return LeakageReport(passed=not violations, violations=violations, labels=labels)


def conditioning_positions(instance: PmlmInstance, row: int, usable: Sequence[bool] | None = None) -> set[int]:
    """Positions whose original content can reach ``row``.

    ``[M]`` and ``[P]`` tokens carry no content, so only context and original
    tokens count. ``usable`` (per position) filters out special tokens.
    """
    reach = transitive_closure(instance.attention_mask)[row]
    content = (instance.kinds == TokenKind.CONTEXT) | (instance.kinds == TokenKind.ORIGINAL)
    out = {int(p) for p in instance.position_ids[reach & content]}
    if usable is not None:
        out = {p for p in out if usable[p]}
    return out


def format_mask(instance: PmlmInstance, vocab: Vocab) -> str:
    """Line-oriented grid: a legend line per row, then the 0/1 matrix."""
    n = len(instance)
    lines = [f"# tokens {n}", "# row\ttoken\tkind\tstep\tposition\tsegment"]
    for r in range(n):
        kind = TokenKind(int(instance.kinds[r]))
        lines.append(
            f"{r}\t{vocab.id_to_token[int(instance.token_ids[r])]}\t{_KIND_SHORT[kind]}"
            f"\t{int(instance.steps[r])}\t{int(instance.position_ids[r])}\t{int(instance.segment_ids[r])}"
        )
    width = max(len(instance.label(r, vocab)) for r in range(n))
    lines.append("# mask (row attends column)")
    for r in range(n):
        bits = " ".join("1" if b else "0" for b in instance.attention_mask[r])
        lines.append(f"{instance.label(r, vocab):>{width}} | {bits}")
    return "\n".join(lines)
