"""Dual-stream condition injection.

A frozen stub encoder stands in for a large pretrained text model: it emits
one feature stack per generator block (mirroring features taken from every
depth of a language model), and the generator fuses each stack with its image
tokens through joint self-attention in which condition tokens contribute keys
and values but never queries.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

CONDITION_MODES = ("class-label", "token-text")


@dataclass(frozen=True)
class ConditionSpec:
    """What kind of conditioning a generator accepts."""

    mode: str = "class-label"
    num_classes: int = 10
    vocab: tuple[str, ...] = ()
    max_len: int = 16
    dropout: float = 0.10

    def __post_init__(self):
        if self.mode not in CONDITION_MODES:
            raise ValueError(f"mode must be one of {CONDITION_MODES}, got {self.mode!r}")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must lie in [0, 1]")
        if self.mode == "class-label" and self.num_classes < 1:
            raise ValueError("class-label mode needs num_classes >= 1")
        if self.mode == "token-text" and not self.vocab:
            raise ValueError("token-text mode needs a non-empty vocabulary")


def load_vocab(path) -> tuple[str, ...]:
    """Read a vocabulary file: plain text, one token per line."""
    with open(path, encoding="utf-8") as fh:
        tokens = [line.strip() for line in fh if line.strip()]
    return tuple(tokens)


class ConditionEncoder(nn.Module):
    """Stub condition encoder emitting per-block feature stacks.

    class-label mode: a learned per-class embedding broadcast to all depths.
    token-text mode: a fixed-seed frozen token embedding table followed by one
    frozen linear map per generator depth. Both modes share a learned null
    embedding stack used for dropped / empty conditions.

    Feature stacks are tensors of shape (depth, batch, n_cond, hidden).
    """

    def __init__(self, spec: ConditionSpec, depth: int, hidden: int, generator: torch.Generator):
        super().__init__()
        self.spec = spec
        self.depth = depth
        self.hidden = hidden
        self.null_embed = nn.Parameter(
            torch.empty(depth, 1, hidden).normal_(0.0, 0.02, generator=generator)
        )
        if spec.mode == "class-label":
            self.class_embed = nn.Parameter(
                torch.empty(spec.num_classes, hidden).normal_(0.0, 0.02, generator=generator)
            )
        else:
            self.token_index = {tok: i for i, tok in enumerate(spec.vocab)}
            token_embed = torch.empty(len(spec.vocab), hidden).normal_(0.0, 1.0, generator=generator)
            depth_maps = torch.empty(depth, hidden, hidden).normal_(
                0.0, hidden ** -0.5, generator=generator
            )
            self.token_embed = nn.Parameter(token_embed, requires_grad=False)
            self.depth_maps = nn.Parameter(depth_maps, requires_grad=False)

    def null_stack(self, batch: int) -> Tensor:
        return self.null_embed[:, None].expand(self.depth, batch, 1, self.hidden)

    def encode_labels(self, labels: Tensor) -> Tensor:
        if labels.min() < 0 or labels.max() >= self.spec.num_classes:
            raise ValueError(f"labels must lie in [0, {self.spec.num_classes})")
        feats = self.class_embed[labels][:, None]  # (B, 1, hidden)
        return feats[None].expand(self.depth, *feats.shape)

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for tok in text.split():
            if tok not in self.token_index:
                known = ", ".join(self.spec.vocab)
                raise ValueError(f"unknown token {tok!r}; vocabulary: {known}")
            ids.append(self.token_index[tok])
        if not 1 <= len(ids) <= self.spec.max_len:
            raise ValueError(f"condition must hold 1..{self.spec.max_len} tokens, got {len(ids)}")
        return ids

    def encode_text(self, texts: list[str]) -> Tensor:
        id_lists = [self.tokenize(t) for t in texts]
        n = len(id_lists[0])
        if any(len(ids) != n for ids in id_lists):
            raise ValueError("all conditions in one batch must have the same token count")
        ids = torch.tensor(id_lists, dtype=torch.long)
        base = self.token_embed[ids].to(self.depth_maps.dtype)  # (B, n, hidden)
        return torch.einsum("bnc,dce->dbne", base, self.depth_maps)

    def encode(self, cond, batch: int | None = None) -> Tensor:
        """Encode labels, texts, or None (the null condition) to a stack."""
        if cond is None:
            if batch is None:
                raise ValueError("encoding the null condition requires a batch size")
            return self.null_stack(batch)
        if self.spec.mode == "class-label":
            labels = cond if torch.is_tensor(cond) else torch.tensor(cond, dtype=torch.long)
            return self.encode_labels(labels.reshape(-1))
        if isinstance(cond, str):
            cond = [cond]
        return self.encode_text(list(cond))

    forward = encode

    def apply_dropout(self, stack: Tensor, drop_mask: Tensor) -> Tensor:
        """Replace dropped batch elements with the null stack."""
        return substitute_null(stack, self.null_stack(stack.shape[1]), drop_mask)


def substitute_null(stack: Tensor, null: Tensor, drop_mask: Tensor) -> Tensor:
    """Swap dropped batch elements of a feature stack for the null stack.

    A dropped element becomes bit-identical to encoding the null condition
    directly. Multi-token stacks receive the null token broadcast across
    their token slots (mixed lengths are not representable in one tensor).
    """
    if not bool(drop_mask.any()):
        return stack
    if null.shape[2] != stack.shape[2]:
        null = null.expand(-1, -1, stack.shape[2], -1)
    return torch.where(drop_mask.view(1, -1, 1, 1), null, stack)


class JointSelfAttention(nn.Module):
    """Self-attention where condition tokens are keys/values but not queries.

    Queries come from the image tokens alone; keys and values are computed by
    the shared projections over the concatenation [condition; image]. With
    ``causal=True`` image position i attends to image positions <= i while
    every position still sees all condition slots. An optional per-layer
    cache holds image-token keys/values for incremental decoding.
    """

    def __init__(self, hidden: int, heads: int, bias: bool = False):
        super().__init__()
        if hidden % heads:
            raise ValueError("hidden size must be divisible by the head count")
        self.heads = heads
        self.head_dim = hidden // heads
        self.wq = nn.Linear(hidden, hidden, bias=bias)
        self.wk = nn.Linear(hidden, hidden, bias=bias)
        self.wv = nn.Linear(hidden, hidden, bias=bias)
        self.wo = nn.Linear(hidden, hidden, bias=bias)

    def _heads(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        x: Tensor,
        cond: Tensor | None = None,
        causal: bool = False,
        layer_cache=None,
    ) -> Tensor:
        b, n, c = x.shape
        q = self._heads(self.wq(x))
        k_img = self._heads(self.wk(x))
        v_img = self._heads(self.wv(x))
        past = 0
        if layer_cache is not None:
            past = layer_cache.length
            k_img, v_img = layer_cache.extend(k_img, v_img)
        n_cond = 0
        if cond is not None:
            n_cond = cond.shape[1]
            k = torch.cat([self._heads(self.wk(cond)), k_img], dim=2)
            v = torch.cat([self._heads(self.wv(cond)), v_img], dim=2)
        else:
            k, v = k_img, v_img
        scores = q @ k.transpose(-1, -2) / self.head_dim ** 0.5
        if causal:
            i = torch.arange(n, device=x.device)[:, None]
            j = torch.arange(k_img.shape[2], device=x.device)[None, :]
            allowed = j <= i + past
            if n_cond:
                allowed = torch.cat(
                    [torch.ones(n, n_cond, dtype=torch.bool, device=x.device), allowed], dim=1
                )
            scores = scores.masked_fill(~allowed, float("-inf"))
        out = F.softmax(scores, dim=-1) @ v
        out = out.transpose(1, 2).reshape(b, n, c)
        return self.wo(out)
