"""Small post-LN Transformer encoder with additive attention masks.

Token, absolute position and segment embeddings are summed; the output
classifier is tied to the token embedding table. A per-head relative
position bias (shared by all layers) can be added to the attention scores.
Gradients come from torch autograd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from pmlm.assembly import PmlmInstance

_NEG = {torch.float32: -1e4, torch.float64: -1e9}


@dataclass
class ModelConfig:
    vocab_size: int = 0  # filled in from the vocabulary
    layers: int = 4
    hidden_size: int = 128
    attention_heads: int = 4
    attention_head_size: int = 0  # 0 -> hidden_size // attention_heads
    ffn_inner_hidden_size: int = 512
    max_positions: int = 128
    max_relative_position: int = 128
    relative_buckets: int = 32
    dropout: float = 0.1
    use_relative_bias: bool = True
    dtype: str = "float32"
    init_range: float = 0.02

    def __post_init__(self):
        if self.attention_head_size == 0 and self.attention_heads > 0:
            self.attention_head_size = self.hidden_size // self.attention_heads

    def validate(self) -> None:
        names = ("vocab_size", "hidden_size", "attention_heads", "attention_head_size",
                 "ffn_inner_hidden_size", "max_positions", "relative_buckets")
        for name in names:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if self.attention_heads * self.attention_head_size != self.hidden_size:
            raise ValueError("attention_heads * attention_head_size must equal hidden_size")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def relative_position_bucket(relative: torch.Tensor, num_buckets: int = 32, max_distance: int = 128) -> torch.Tensor:
    """Bucket signed distances: exact near zero, log-spaced out to ``max_distance``.

    Half of the buckets hold positive distances. Distances beyond
    ``max_distance`` share the last bucket of their sign.
    """
    half = num_buckets // 2
    bucket = (relative > 0).long() * half
    dist = relative.abs()
    exact = half // 2
    large = exact + (
        torch.log(dist.clamp(min=1).double() / exact) / math.log(max_distance / exact) * (half - exact)
    ).long()
    large = large.clamp(max=half - 1)
    return bucket + torch.where(dist < exact, dist, large)


@dataclass
class Batch:
    token_ids: torch.Tensor  # [B, T]
    position_ids: torch.Tensor
    segment_ids: torch.Tensor
    attention_mask: torch.Tensor  # [B, T, T] bool
    lengths: list[int]

    def __len__(self) -> int:
        return self.token_ids.shape[0]


def collate(instances: Sequence[PmlmInstance]) -> Batch:
    """Right-pad instances; pad rows attend only themselves and nobody attends them."""
    if not instances:
        raise ValueError("empty batch")
    lengths = [len(inst) for inst in instances]
    b, t = len(instances), max(lengths)
    tok = np.zeros((b, t), dtype=np.int64)
    pos = np.zeros((b, t), dtype=np.int64)
    seg = np.zeros((b, t), dtype=np.int64)
    mask = np.zeros((b, t, t), dtype=bool)
    for i, inst in enumerate(instances):
        n = lengths[i]
        tok[i, :n] = inst.token_ids
        pos[i, :n] = inst.position_ids
        seg[i, :n] = inst.segment_ids
        mask[i, :n, :n] = inst.attention_mask
        idx = np.arange(n, t)
        mask[i, idx, idx] = True
    return Batch(
        torch.from_numpy(tok), torch.from_numpy(pos), torch.from_numpy(seg), torch.from_numpy(mask), lengths
    )


@dataclass
class ForwardOutput:
    hidden: torch.Tensor  # [B, T, d_h], top layer
    logits: torch.Tensor | None  # [B, T, V]
    attentions: list[torch.Tensor] | None = None  # per layer [B, heads, T, T]

    def row_logits(self, index: int, rows: Sequence[int] | np.ndarray) -> torch.Tensor:
        return self.logits[index, torch.as_tensor(np.asarray(rows, dtype=np.int64))]


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.hidden_size
        self.heads = config.attention_heads
        self.head_size = config.attention_head_size
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.attn_out = nn.Linear(d, d)
        self.attn_norm = nn.LayerNorm(d, eps=1e-12)
        self.ffn_in = nn.Linear(d, config.ffn_inner_hidden_size)
        self.ffn_out = nn.Linear(config.ffn_inner_hidden_size, d)
        self.ffn_norm = nn.LayerNorm(d, eps=1e-12)
        self.dropout = nn.Dropout(config.dropout)

    def attention(self, h: torch.Tensor, additive_mask: torch.Tensor, bias: torch.Tensor | None, past=None):
        b, t, _ = h.shape

        def split(x):
            return x.view(b, t, self.heads, self.head_size).transpose(1, 2)

        q, k, v = split(self.query(h)), split(self.key(h)), split(self.value(h))
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_size)
        if bias is not None:
            scores = scores + bias
        scores = scores + additive_mask[:, None]
        probs = torch.softmax(scores, dim=-1)
        ctx = (self.dropout(probs) @ v).transpose(1, 2).reshape(b, t, -1)
        return self.attn_out(ctx), probs, (k, v)

    def forward(self, h, additive_mask, bias, past=None):
        a, probs, kv = self.attention(h, additive_mask, bias, past)
        h = self.attn_norm(h + self.dropout(a))
        f = self.ffn_out(F.gelu(self.ffn_in(h)))
        h = self.ffn_norm(h + self.dropout(f))
        return h, probs, kv


@dataclass
class KVCache:
    """Per-layer keys/values ``[B, heads, T, head_size]`` plus the positions they sit at."""

    layers: list[tuple[torch.Tensor, torch.Tensor]]
    positions: torch.Tensor  # [B, T]

    def __len__(self) -> int:
        return self.positions.shape[1]

    def select(self, index: Sequence[int]) -> "KVCache":
        idx = torch.as_tensor(list(index), dtype=torch.long)
        return KVCache([(k[idx], v[idx]) for k, v in self.layers], self.positions[idx])

    def truncate(self, length: int) -> "KVCache":
        return KVCache([(k[:, :, :length], v[:, :, :length]) for k, v in self.layers], self.positions[:, :length])


class PmlmModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.hidden_size
        self.token_embedding = nn.Embedding(config.vocab_size, d)
        self.position_embedding = nn.Embedding(config.max_positions, d)
        self.segment_embedding = nn.Embedding(2, d)
        self.relative_bias = nn.Embedding(config.relative_buckets, config.attention_heads) if config.use_relative_bias else None
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.layers))
        self.output_bias = nn.Parameter(torch.zeros(config.vocab_size))
        self.embed_dropout = nn.Dropout(config.dropout)
        self.forward_passes = 0
        self._init_weights()
        self.to(config.torch_dtype)

    def _init_weights(self) -> None:
        std = self.config.init_range
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, 0.0, std)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Embedding):
                nn.init.normal_(m.weight, 0.0, std)
        if self.relative_bias is not None:
            nn.init.zeros_(self.relative_bias.weight)

    @property
    def dtype(self) -> torch.dtype:
        return self.token_embedding.weight.dtype

    def _check_ids(self, batch: Batch) -> None:
        c = self.config
        for name, ids, limit in (
            ("token", batch.token_ids, c.vocab_size),
            ("position", batch.position_ids, c.max_positions),
            ("segment", batch.segment_ids, 2),
        ):
            if ids.numel() and (ids.min() < 0 or ids.max() >= limit):
                raise ValueError(f"{name} id out of range [0, {limit})")
        if not batch.attention_mask.any(-1).all():
            raise ValueError("no attendable key for some row")

    def embed(self, batch: Batch) -> torch.Tensor:
        self._check_ids(batch)
        return (
            self.token_embedding(batch.token_ids)
            + self.position_embedding(batch.position_ids)
            + self.segment_embedding(batch.segment_ids)
        )

    def position_bias(self, position_ids: torch.Tensor, key_positions: torch.Tensor | None = None) -> torch.Tensor | None:
        if self.relative_bias is None:
            return None
        keys = position_ids if key_positions is None else key_positions
        rel = keys[:, None, :] - position_ids[:, :, None]  # key - query
        buckets = relative_position_bucket(
            rel, self.config.relative_buckets, self.config.max_relative_position
        )
        return self.relative_bias(buckets).permute(0, 3, 1, 2)  # [B, heads, T, T]

    def encode(self, batch: Batch, return_attention: bool = False):
        h = self.embed_dropout(self.embed(batch))
        additive = torch.zeros(batch.attention_mask.shape, dtype=h.dtype)
        additive = additive.masked_fill(~batch.attention_mask, _NEG[h.dtype])
        bias = self.position_bias(batch.position_ids)
        attentions = []
        for i, block in enumerate(self.blocks, start=1):
            h, probs, _ = block(h, additive, bias)
            if not torch.isfinite(h).all():
                raise FloatingPointError(f"non-finite hidden state after layer {i}")
            if return_attention:
                attentions.append(probs)
        return h, attentions

    @torch.no_grad()
    def encode_step(
        self,
        token_ids: torch.Tensor,
        position_ids: torch.Tensor,
        segment_ids: torch.Tensor,
        mask: torch.Tensor,
        past: KVCache | None = None,
    ) -> tuple[torch.Tensor, KVCache]:
        """Encode only new tokens, reusing cached keys/values of earlier ones.

        ``mask`` is ``[B, T_new, T_past + T_new]``. Exact whenever no cached
        token may attend any new token, which holds for left-to-right decoding.
        Returns the new tokens' hidden states and the extended cache.
        """
        self.eval()
        batch = Batch(token_ids, position_ids, segment_ids, mask, [token_ids.shape[1]] * len(token_ids))
        h = self.embed(batch)
        keys = position_ids if past is None else torch.cat([past.positions, position_ids], dim=1)
        additive = torch.zeros(mask.shape, dtype=h.dtype).masked_fill(~mask, _NEG[h.dtype])
        bias = self.position_bias(position_ids, keys)
        layers = []
        for i, block in enumerate(self.blocks):
            h, _, kv = block(h, additive, bias, None if past is None else past.layers[i])
            layers.append(kv)
        return h, KVCache(layers, keys)

    def classify_tokens(self, hidden: torch.Tensor, weight: torch.Tensor | None = None) -> torch.Tensor:
        weight = self.token_embedding.weight if weight is None else weight
        return hidden @ weight.T + self.output_bias

    def forward(
        self,
        batch: Batch | Sequence[PmlmInstance],
        train: bool = False,
        return_attention: bool = False,
        with_logits: bool = True,
    ) -> ForwardOutput:
        if not isinstance(batch, Batch):
            batch = collate(batch)
        self.train(train)
        self.forward_passes += len(batch)
        hidden, attentions = self.encode(batch, return_attention)
        logits = self.classify_tokens(hidden) if with_logits else None
        if logits is not None and not torch.isfinite(logits).all():
            raise FloatingPointError("non-finite logits")
        return ForwardOutput(hidden, logits, attentions if return_attention else None)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())
