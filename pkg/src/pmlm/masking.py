"""Blockwise span masking, factorization orders, and the 80/10/10 corruption policy."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from pmlm.corpus import PackedInput, Vocab

MASK_RATIO_PERCENT = 15
BLOCK_PROB = 0.4
MIN_BLOCK, MAX_BLOCK = 2, 6


@dataclass(frozen=True)
class FactorizationOrder:
    """Ordered factorization steps; each step is a contiguous run of positions.

    Positions index the packed sequence (``[SOS]`` sits at 0).
    """

    steps: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def positions(self) -> list[int]:
        return [p for step in self.steps for p in step]

    @property
    def masked_count(self) -> int:
        return sum(len(s) for s in self.steps)

    def step_of(self) -> dict[int, int]:
        """Map position -> 1-based step index."""
        return {p: i + 1 for i, step in enumerate(self.steps) for p in step}

    def validate(self, length: int, usable: Sequence[bool] | None = None) -> None:
        seen: set[int] = set()
        for step in self.steps:
            if not step:
                raise ValueError("empty factorization step")
            if list(step) != list(range(step[0], step[0] + len(step))):
                raise ValueError(f"step {step} is not a contiguous run")
            for p in step:
                if not 0 <= p < length:
                    raise ValueError(f"position {p} outside sequence of length {length}")
                if usable is not None and not usable[p]:
                    raise ValueError(f"position {p} is a special-token position")
                if p in seen:
                    raise ValueError(f"position {p} appears in two steps")
                seen.add(p)

    @classmethod
    def of(cls, *steps: Sequence[int]) -> "FactorizationOrder":
        return cls(tuple(tuple(int(p) for p in s) for s in steps))

    def singletons(self, rng: np.random.Generator | None = None) -> "FactorizationOrder":
        """Split every span into single-token steps, optionally shuffled (AR order)."""
        flat = [(p,) for p in self.positions]
        if rng is not None:
            flat = [flat[i] for i in rng.permutation(len(flat))]
        return FactorizationOrder(tuple(flat))


class Action(enum.IntEnum):
    MASK = 0
    RANDOM = 1
    KEEP = 2


@dataclass(frozen=True)
class CorruptionPlan:
    """What the in-place conventional-mask slot holds, per masked position."""

    actions: dict[int, Action]
    replacements: dict[int, int]

    def slot_token(self, position: int, original: int, vocab: Vocab) -> int:
        action = self.actions[position]
        if action is Action.MASK:
            return vocab.mask
        if action is Action.RANDOM:
            return self.replacements[position]
        return original

    @classmethod
    def all_masked(cls, positions: Sequence[int]) -> "CorruptionPlan":
        return cls({int(p): Action.MASK for p in positions}, {})


def usable_positions(x: PackedInput, vocab: Vocab | None = None) -> np.ndarray:
    special = vocab.special_ids if vocab is not None else frozenset(range(6))
    return np.array([t not in special for t in x.token_ids], dtype=bool)


def mask_budget(usable_len: int) -> int:
    """ceil(0.15 * n) in exact integer arithmetic."""
    return (MASK_RATIO_PERCENT * usable_len + 99) // 100


def sample_blockwise_mask(
    x: PackedInput,
    rng: np.random.Generator,
    vocab: Vocab | None = None,
    block_prob: float = BLOCK_PROB,
) -> FactorizationOrder:
    """Draw spans until at least 15% of usable tokens are masked.

    Each draw picks a length (a 2..6 block with probability ``block_prob``,
    else a single token) and then a start position. A start whose span runs
    off the end, touches a special token, or overlaps an earlier span is
    redrawn with the same length, so accepted steps keep the drawn length
    distribution. Steps are returned in sampling order, which doubles as the
    factorization order.
    """
    usable = usable_positions(x, vocab)
    n_usable = int(usable.sum())
    if n_usable < 1:
        raise ValueError("no maskable tokens")
    need = mask_budget(n_usable)
    free = usable.copy()
    steps: list[tuple[int, ...]] = []
    total = 0
    misses = 0
    while total < need:
        length = int(rng.integers(MIN_BLOCK, MAX_BLOCK + 1)) if rng.random() < block_prob else 1
        if misses >= 100:
            # only single slots left and block_prob forbids drawing them
            length = 1
        p = _place(free, length, rng)
        if p is None:
            misses += 1
            continue
        misses = 0
        free[p : p + length] = False
        steps.append(tuple(range(p, p + length)))
        total += length
    return FactorizationOrder(tuple(steps))


def _place(free: np.ndarray, length: int, rng: np.random.Generator) -> int | None:
    n = len(free)
    tries = 0
    while True:
        p = int(rng.integers(0, n))
        if p + length <= n and free[p : p + length].all():
            return p
        tries += 1
        if tries % 64 == 0:
            window = np.convolve(free.astype(np.int64), np.ones(length, dtype=np.int64), mode="valid")
            if not (window == length).any():
                return None


def plan_corruption(
    order: FactorizationOrder,
    vocab: Vocab,
    rng: np.random.Generator,
    probs: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> CorruptionPlan:
    p_mask, p_random, _ = probs
    actions: dict[int, Action] = {}
    replacements: dict[int, int] = {}
    for pos in order.positions:
        u = rng.random()
        if u < p_mask:
            actions[pos] = Action.MASK
        elif u < p_mask + p_random:
            actions[pos] = Action.RANDOM
            replacements[pos] = int(rng.integers(vocab.first_regular_id, len(vocab)))
        else:
            actions[pos] = Action.KEEP
    return CorruptionPlan(actions, replacements)


def format_plan(order: FactorizationOrder, plan: CorruptionPlan, x: PackedInput, vocab: Vocab) -> str:
    """One line per step: index, positions, actions (and replacement tokens)."""
    lines = []
    for i, step in enumerate(order.steps, start=1):
        acts = []
        for p in step:
            act = plan.actions[p]
            label = act.name.lower()
            if act is Action.RANDOM:
                label += f"->{vocab.id_to_token[plan.replacements[p]]}"
            acts.append(label)
        toks = " ".join(vocab.id_to_token[x.token_ids[p]] for p in step)
        lines.append(f"{i}\t{','.join(map(str, step))}\t{','.join(acts)}\t{toks}")
    return "\n".join(lines)
