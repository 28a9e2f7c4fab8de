"""Token-by-token autoregressive generation over binary codes.

A learnable split token seeds the sequence; each position emits one logit
vector over the bits of the next token, trained with BCE and sampled
factorized-Bernoulli. Standard layer normalization throughout (no timestep
pathway). Incremental decoding uses per-block key/value caches and
reproduces full-context logits exactly at equal precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .binary import bce, bernoulli_sample
from .blocks import GeneratorBlock, KVCache, causal_mask, init_linear_
from .conditioning import substitute_null
from .diffusion import GuidanceParams

__all__ = ["ARConfig", "ARModel", "causal_mask", "KVCache", "ar_loss", "ar_sample"]


@dataclass(frozen=True)
class ARConfig:
    tokens: int = 16
    code_bits: int = 16
    hidden: int = 256
    depth: int = 6
    heads: int = 8

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden size must be divisible by the head count")


class ARModel(nn.Module):
    """Causal transformer over [split token, code tokens 1..k-1]."""

    def __init__(self, cfg: ARConfig, generator: torch.Generator):
        super().__init__()
        self.cfg = cfg
        self.split_token = nn.Parameter(
            torch.empty(1, 1, cfg.hidden).normal_(0.0, 0.02, generator=generator)
        )
        self.bit_embed = nn.Linear(cfg.code_bits, cfg.hidden, bias=False)
        init_linear_(self.bit_embed, generator)
        self.blocks = nn.ModuleList(
            GeneratorBlock(cfg.hidden, cfg.heads, cfg.tokens, use_adaln=False, generator=generator)
            for _ in range(cfg.depth)
        )
        self.norm_f = nn.LayerNorm(cfg.hidden)
        self.head = nn.Linear(cfg.hidden, cfg.code_bits, bias=False)
        self.head.weight.data.zero_()

    @property
    def depth(self) -> int:
        return self.cfg.depth

    def _run(self, x: Tensor, cond: Tensor | None, cache: KVCache | None, pos_offset: int) -> Tensor:
        for d, blk in enumerate(self.blocks):
            x = blk(
                x,
                cond=None if cond is None else cond[d],
                causal=True,
                layer_cache=None if cache is None else cache.layers[d],
                pos_offset=pos_offset,
            )
        return self.head(self.norm_f(x))

    def forward(self, codes: Tensor | None, cond: Tensor | None = None) -> Tensor:
        """Teacher-forced pass over a code prefix.

        ``codes`` holds tokens 1..i (or None for the empty prefix); position
        j of the output predicts the bits of token j+1, so the result has
        i + 1 positions.
        """
        if codes is None or codes.shape[1] == 0:
            batch = 1 if codes is None else codes.shape[0]
            x = self.split_token.expand(batch, 1, self.cfg.hidden)
        else:
            if codes.shape[1] > self.cfg.tokens - 1:
                raise ValueError("prefix longer than the sequence allows")
            x = torch.cat(
                [self.split_token.expand(codes.shape[0], 1, self.cfg.hidden),
                 self.bit_embed(codes)], dim=1)
        return self._run(x, cond, None, 0)

    def step(self, prev: Tensor | None, cond: Tensor | None, cache: KVCache, batch: int = 1) -> Tensor:
        """Incremental pass: feed one new token, return next-token logits."""
        pos = cache.length
        if pos == 0:
            if prev is not None:
                raise ValueError("first step starts from the split token")
            x = self.split_token.expand(batch, 1, self.cfg.hidden)
        else:
            x = self.bit_embed(prev)
        return self._run(x, cond, cache, pos)


def ar_loss(
    model: ARModel,
    z: Tensor,
    rng: torch.Generator | None = None,
    cond: Tensor | None = None,
    null: Tensor | None = None,
    drop_prob: float = 0.10,
) -> Tensor:
    """Mean next-token BCE over all positions and bits (teacher-forced)."""
    b, k, cb = z.shape
    if (k, cb) != (model.cfg.tokens, model.cfg.code_bits):
        raise ValueError(f"expected {model.cfg.tokens}x{model.cfg.code_bits} codes")
    if cond is not None and drop_prob > 0:
        if rng is None or null is None:
            raise ValueError("condition dropout requires a generator and the null stack")
        drop = torch.rand(b, generator=rng) < drop_prob
        cond = substitute_null(cond, null, drop)
    logits = model(z[:, :-1], cond)
    return bce(torch.sigmoid(logits), z)


def ar_sample(
    model: ARModel,
    g: GuidanceParams,
    rng: torch.Generator,
    batch: int = 1,
    cond: Tensor | None = None,
    null: Tensor | None = None,
    use_cache: bool = True,
) -> Tensor:
    """Generate k tokens with guided factorized-Bernoulli sampling.

    One Bernoulli draw per position regardless of caching, so cached and
    uncached generation consume the generator identically.
    """
    guided = cond is not None and g.alpha > 0
    if guided and null is None:
        raise ValueError("guided sampling requires the null condition stack")
    cache_c = KVCache(model.depth) if use_cache else None
    cache_n = KVCache(model.depth) if (use_cache and guided) else None
    tokens: list[Tensor] = []
    prev = None
    with torch.no_grad():
        for _ in range(model.cfg.tokens):
            if use_cache:
                l_c = model.step(prev, cond if cond is not None else null, cache_c, batch)
                l_n = model.step(prev, null, cache_n, batch) if guided else None
            else:
                if tokens:
                    prefix = torch.cat(tokens, dim=1)
                else:
                    p = next(model.parameters())
                    prefix = torch.zeros(batch, 0, model.cfg.code_bits, dtype=p.dtype, device=p.device)
                l_c = model.forward(prefix, cond if cond is not None else null)[:, -1:]
                l_n = model.forward(prefix, null)[:, -1:] if guided else None
            if guided:
                # (1+a) c/tau - a n/tau, arranged so equal branches cancel exactly
                base = l_c / g.temperature
                logits = base + g.alpha * (base - l_n / g.temperature)
            else:
                logits = l_c / g.temperature
            bits = bernoulli_sample(torch.sigmoid(logits), rng)
            tokens.append(bits)
            prev = bits
    return torch.cat(tokens, dim=1)
