"""Transformer blocks shared by the diffusion and autoregressive generators.

Both generators mirror a decoder-only language model: bias-free projections,
pre-norm blocks, GELU MLP with expansion 4, and a learnable positional
embedding per block. The diffusion variant adds timestep-conditioned
adaLN-Zero modulation whose gates start at zero, so every freshly
initialized block is an identity map on the residual stream.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .conditioning import JointSelfAttention

MLP_EXPANSION = 4


def init_linear_(m: nn.Linear, generator: torch.Generator, std: float = 0.02) -> None:
    m.weight.data.normal_(0.0, std, generator=generator)
    if m.bias is not None:
        m.bias.data.zero_()


def causal_mask(n: int, device=None) -> Tensor:
    """Boolean (n, n) mask; entry [i, j] is True iff position i may attend to j."""
    if n < 1:
        raise ValueError("mask length must be >= 1")
    return torch.ones(n, n, dtype=torch.bool, device=device).tril()


class LayerKV:
    """Cached keys/values of the image tokens processed so far by one block."""

    def __init__(self):
        self.k: Tensor | None = None
        self.v: Tensor | None = None

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[2]

    def extend(self, k_new: Tensor, v_new: Tensor) -> tuple[Tensor, Tensor]:
        if self.k is None:
            self.k, self.v = k_new, v_new
        else:
            self.k = torch.cat([self.k, k_new], dim=2)
            self.v = torch.cat([self.v, v_new], dim=2)
        return self.k, self.v


class KVCache:
    """One LayerKV slot per transformer block."""

    def __init__(self, depth: int):
        self.layers = [LayerKV() for _ in range(depth)]

    @property
    def length(self) -> int:
        return self.layers[0].length


def adaln_modulate(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    return x * (1 + scale) + shift


class Mlp(nn.Module):
    def __init__(self, hidden: int, bias: bool = False):
        super().__init__()
        self.fc1 = nn.Linear(hidden, MLP_EXPANSION * hidden, bias=bias)
        self.fc2 = nn.Linear(MLP_EXPANSION * hidden, hidden, bias=bias)
        self.act = nn.GELU()

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(x)))


class GeneratorBlock(nn.Module):
    """Pre-norm block with condition key/value injection.

    The block's positional embedding and (for the diffusion variant) the
    adaLN scale/shift are applied on the attention input, inside the gated
    residual branch; with zero gates the block leaves its input untouched.
    """

    def __init__(
        self,
        hidden: int,
        heads: int,
        max_positions: int,
        use_adaln: bool,
        generator: torch.Generator,
    ):
        super().__init__()
        self.use_adaln = use_adaln
        self.pos_emb = nn.Parameter(
            torch.empty(max_positions, hidden).normal_(0.0, 0.02, generator=generator)
        )
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=not use_adaln)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=not use_adaln)
        self.attn = JointSelfAttention(hidden, heads, bias=False)
        self.mlp = Mlp(hidden, bias=False)
        self.cond_adapter = nn.Linear(hidden, hidden, bias=True)
        for m in (self.attn.wq, self.attn.wk, self.attn.wv, self.attn.wo,
                  self.mlp.fc1, self.mlp.fc2, self.cond_adapter):
            init_linear_(m, generator)
        if use_adaln:
            # bias-free and zero-initialized: modulation is strictly linear in
            # the timestep embedding and vanishes at initialization
            self.modulation = nn.Linear(hidden, 6 * hidden, bias=False)
            self.modulation.weight.data.zero_()

    def modulation_vectors(self, t_embed: Tensor) -> tuple[Tensor, ...]:
        """Six (batch, hidden) vectors: scale/shift/gate for attn and MLP."""
        return self.modulation(t_embed).chunk(6, dim=-1)

    def forward(
        self,
        x: Tensor,
        cond: Tensor | None = None,
        t_embed: Tensor | None = None,
        causal: bool = False,
        layer_cache: LayerKV | None = None,
        pos_offset: int = 0,
    ) -> Tensor:
        n = x.shape[1]
        if self.use_adaln:
            if t_embed is None:
                raise ValueError("adaLN block requires a timestep embedding")
            sc1, sh1, g1, sc2, sh2, g2 = (
                m[:, None] for m in self.modulation_vectors(t_embed)
            )
        h = self.norm1(x)
        if self.use_adaln:
            h = adaln_modulate(h, sc1, sh1)
        h = h + self.pos_emb[pos_offset:pos_offset + n]
        cond_in = self.cond_adapter(cond) if cond is not None else None
        a = self.attn(h, cond_in, causal=causal, layer_cache=layer_cache)
        x = x + (g1 * a if self.use_adaln else a)
        h = self.norm2(x)
        if self.use_adaln:
            h = adaln_modulate(h, sc2, sh2)
        m = self.mlp(h)
        return x + (g2 * m if self.use_adaln else m)
