"""Transformer autoencoder between images and binary codes.

The encoder runs joint self-attention over patch tokens (optionally merged
2x2) and k learnable latent tokens, then projects the updated latent tokens
to code bits through a temperature-sigmoid quantizer. The decoder replicates
a learned mask token to the requested output grid, attends jointly with the
embedded code tokens, optionally expands tokens 2x2, and regresses pixels
with a per-token head. Image tokens carry 2D rotary position embeddings;
latent and code tokens are left unrotated (angle zero). Decode grids larger
than the training grid divide their position indices by the grid ratio so
the angular range matches training.

Images are (batch, 3, h, w) float tensors in [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .binary import quantize, straight_through
from .blocks import Mlp, init_linear_

ROPE_BASE = 100.0


class ConfigurationError(ValueError):
    """Raised when a request falls outside the configured geometry."""


@dataclass(frozen=True)
class TokenizerConfig:
    patch: int = 4
    hidden: int = 256
    code_bits: int = 16
    latent_tokens: int = 16
    depth_enc: int = 6
    depth_dec: int = 6
    heads: int = 8
    downsample: bool = True
    train_res: int = 32
    decode_res: tuple[int, ...] = (32, 48, 64)
    pixel_head: str = "conv"

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigurationError("hidden size must be divisible by the head count")
        if (self.hidden // self.heads) % 4:
            raise ConfigurationError("head dim must be a multiple of 4 for 2D rotations")
        if self.pixel_head not in ("conv", "linear"):
            raise ConfigurationError("pixel_head must be 'conv' or 'linear'")
        if self.pixel_head == "conv" and 2 ** int(math.log2(self.patch)) != self.patch:
            raise ConfigurationError("conv pixel head needs a power-of-two patch size")
        for r in (self.train_res, *self.decode_res):
            if r % self.patch:
                raise ConfigurationError(f"resolution {r} is not a multiple of patch {self.patch}")
            if self.downsample and (r // self.patch) % 2:
                raise ConfigurationError(f"resolution {r} gives an odd grid; downsampling needs even")
        if self.latent_tokens >= (self.train_res // self.patch) ** 2:
            raise ConfigurationError("latent token count must be below the patch token count")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def train_grid(self) -> int:
        return self.train_res // self.patch

    def decoder_grid(self, out_res: int) -> int:
        """Mask-token grid the decoder transformer runs on (pre-expansion)."""
        g = out_res // self.patch
        return g // 2 if self.downsample else g


def rope_angles(grid_h: int, grid_w: int, head_dim: int, decode_scale: float = 1.0) -> Tensor:
    """Per-position 2D rotation angles, shape (grid_h * grid_w, head_dim // 2).

    The first half of the rotation pairs encodes the row index, the second
    half the column index; indices are divided by ``decode_scale``, so a grid
    ``decode_scale`` times larger spans the training angular range (decode
    position s*i lands exactly on training position i for integer s).
    """
    if decode_scale <= 0:
        raise ValueError("decode_scale must be > 0")
    if head_dim % 4:
        raise ValueError("head_dim must be a multiple of 4")
    quarter = head_dim // 4
    freqs = ROPE_BASE ** (-torch.arange(quarter, dtype=torch.float64) / quarter)
    rows = torch.arange(grid_h, dtype=torch.float64) / decode_scale
    cols = torch.arange(grid_w, dtype=torch.float64) / decode_scale
    row_ang = torch.outer(rows, freqs)[:, None, :].expand(grid_h, grid_w, quarter)
    col_ang = torch.outer(cols, freqs)[None, :, :].expand(grid_h, grid_w, quarter)
    return torch.cat([row_ang, col_ang], dim=-1).reshape(grid_h * grid_w, head_dim // 2)


def apply_rope(x: Tensor, angles: Tensor) -> Tensor:
    """Rotate feature pairs (d, d + D/2) of queries or keys by the angle table."""
    cos = angles.cos().to(x.dtype)
    sin = angles.sin().to(x.dtype)
    d = x.shape[-1] // 2
    x1, x2 = x[..., :d], x[..., d:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class PatchEmbed(nn.Module):
    """Learned linear map from p x p x 3 patches to tokens (row-major grid)."""

    def __init__(self, patch: int, hidden: int, generator: torch.Generator):
        super().__init__()
        self.patch = patch
        self.proj = nn.Conv2d(3, hidden, kernel_size=patch, stride=patch)
        self.proj.weight.data.normal_(0.0, 0.02, generator=generator)
        self.proj.bias.data.zero_()

    def forward(self, images: Tensor) -> Tensor:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError("expected images of shape (batch, 3, h, w)")
        if images.shape[-2] % self.patch or images.shape[-1] % self.patch:
            raise ValueError("image dims must be multiples of the patch size")
        return self.proj(images).flatten(2).transpose(1, 2)


class TokenDownsample(nn.Module):
    """Merge each 2x2 token group through a single c x 4c linear map."""

    def __init__(self, hidden: int, generator: torch.Generator):
        super().__init__()
        self.proj = nn.Linear(4 * hidden, hidden, bias=False)
        init_linear_(self.proj, generator)

    def forward(self, tokens: Tensor, grid_h: int, grid_w: int) -> Tensor:
        if grid_h % 2 or grid_w % 2:
            raise ValueError("token grid extents must be even to downsample")
        b, l, c = tokens.shape
        if l != grid_h * grid_w:
            raise ValueError("token count does not match the grid")
        x = tokens.view(b, grid_h, grid_w, c)
        group = torch.cat(
            [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1
        )
        return self.proj(group).view(b, l // 4, c)


class TokenUpsample(nn.Module):
    """Expand each token to 4c and split it into its 2x2 child group."""

    def __init__(self, hidden: int, generator: torch.Generator):
        super().__init__()
        self.proj = nn.Linear(hidden, 4 * hidden, bias=False)
        init_linear_(self.proj, generator)

    def forward(self, tokens: Tensor, grid_h: int, grid_w: int) -> Tensor:
        b, l, c = tokens.shape
        if l != grid_h * grid_w:
            raise ValueError("token count does not match the grid")
        x = self.proj(tokens).view(b, grid_h, grid_w, 2, 2, c)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, 2 * grid_h, 2 * grid_w, c)
        return x.reshape(b, 4 * l, c)


class SelfAttention(nn.Module):
    """Full joint self-attention with rotary positions on image tokens."""

    def __init__(self, hidden: int, heads: int, generator: torch.Generator):
        super().__init__()
        self.heads = heads
        self.head_dim = hidden // heads
        self.wqkv = nn.Linear(hidden, 3 * hidden)
        self.wo = nn.Linear(hidden, hidden)
        init_linear_(self.wqkv, generator)
        init_linear_(self.wo, generator)

    def forward(self, x: Tensor, angles: Tensor) -> Tensor:
        b, n, c = x.shape
        q, k, v = self.wqkv(x).chunk(3, dim=-1)
        q, k, v = (t.view(b, n, self.heads, self.head_dim).transpose(1, 2) for t in (q, k, v))
        q = apply_rope(q, angles)
        k = apply_rope(k, angles)
        att = F.softmax(q @ k.transpose(-1, -2) / self.head_dim ** 0.5, dim=-1)
        return self.wo((att @ v).transpose(1, 2).reshape(b, n, c))


class TokenizerBlock(nn.Module):
    def __init__(self, hidden: int, heads: int, generator: torch.Generator):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden)
        self.attn = SelfAttention(hidden, heads, generator)
        self.norm2 = nn.LayerNorm(hidden)
        self.mlp = Mlp(hidden, bias=True)
        init_linear_(self.mlp.fc1, generator)
        init_linear_(self.mlp.fc2, generator)

    def forward(self, x: Tensor, angles: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x), angles)
        return x + self.mlp(self.norm2(x))


class ChannelNorm(nn.Module):
    """Per-position normalization over channels; keeps tokens independent."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        x = (x - mu) / torch.sqrt(var + 1e-6)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


def _init_conv(conv: nn.Module, generator: torch.Generator) -> None:
    fan_in = conv.weight.shape[1] * conv.weight.shape[2] * conv.weight.shape[3]
    conv.weight.data.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)
    conv.bias.data.zero_()


class ConvPixelHead(nn.Module):
    """Per-token transpose-conv stack expanding each token to its patch.

    Repeated (transpose-conv x2, channel norm, ReLU) stages double the
    spatial extent up to the patch size; a final 1x1 conv maps to RGB. All
    kernels match their strides, so patches tile without overlap.
    """

    def __init__(self, hidden: int, patch: int, generator: torch.Generator):
        super().__init__()
        stages = int(math.log2(patch))
        layers: list[nn.Module] = []
        ch = hidden
        for _ in range(stages):
            nxt = max(ch // 2, 16)
            up = nn.ConvTranspose2d(ch, nxt, kernel_size=2, stride=2)
            _init_conv(up, generator)
            layers += [up, ChannelNorm(nxt), nn.ReLU()]
            ch = nxt
        final = nn.Conv2d(ch, 3, kernel_size=1)
        _init_conv(final, generator)
        layers.append(final)
        self.stack = nn.Sequential(*layers)

    def forward(self, tokens: Tensor, grid_h: int, grid_w: int) -> Tensor:
        b, l, c = tokens.shape
        if l != grid_h * grid_w:
            raise ValueError("token count does not match the output grid")
        x = tokens.view(b, grid_h, grid_w, c).permute(0, 3, 1, 2)
        return self.stack(x)


class LinearPixelHead(nn.Module):
    """Single linear map from each token to its p x p x 3 patch."""

    def __init__(self, hidden: int, patch: int, generator: torch.Generator):
        super().__init__()
        self.patch = patch
        self.proj = nn.Linear(hidden, patch * patch * 3)
        init_linear_(self.proj, generator)

    def forward(self, tokens: Tensor, grid_h: int, grid_w: int) -> Tensor:
        b, l, c = tokens.shape
        if l != grid_h * grid_w:
            raise ValueError("token count does not match the output grid")
        p = self.patch
        x = self.proj(tokens).view(b, grid_h, grid_w, p, p, 3)
        x = x.permute(0, 5, 1, 3, 2, 4).reshape(b, 3, grid_h * p, grid_w * p)
        return x


class Tokenizer(nn.Module):
    """Encoder, binary quantizer, and multi-resolution decoder."""

    def __init__(self, cfg: TokenizerConfig, generator: torch.Generator):
        super().__init__()
        self.cfg = cfg
        c = cfg.hidden
        self.patch_embed = PatchEmbed(cfg.patch, c, generator)
        self.down = TokenDownsample(c, generator) if cfg.downsample else None
        self.latent_tokens = nn.Parameter(
            torch.empty(cfg.latent_tokens, c).normal_(0.0, 0.02, generator=generator)
        )
        self.enc_blocks = nn.ModuleList(
            TokenizerBlock(c, cfg.heads, generator) for _ in range(cfg.depth_enc)
        )
        self.enc_norm = nn.LayerNorm(c)
        self.to_code = nn.Linear(c, cfg.code_bits)
        init_linear_(self.to_code, generator)

        self.mask_token = nn.Parameter(torch.empty(c).normal_(0.0, 0.02, generator=generator))
        self.code_embed = nn.Linear(cfg.code_bits, c)
        init_linear_(self.code_embed, generator)
        self.dec_blocks = nn.ModuleList(
            TokenizerBlock(c, cfg.heads, generator) for _ in range(cfg.depth_dec)
        )
        self.dec_norm = nn.LayerNorm(c)
        self.up = TokenUpsample(c, generator) if cfg.downsample else None
        head_cls = ConvPixelHead if cfg.pixel_head == "conv" else LinearPixelHead
        self.pixel_head = head_cls(c, cfg.patch, generator)

    def encoder_parameters(self):
        """Parameters owned by the encoder side (frozen in adversarial stage)."""
        mods: list[nn.Module] = [self.patch_embed, self.enc_blocks, self.enc_norm]
        if self.down is not None:
            mods.append(self.down)
        for m in mods:
            yield from m.parameters()
        yield self.latent_tokens

    def _angles(self, grid: int, scale: float, extra: int) -> Tensor:
        ang = rope_angles(grid, grid, self.cfg.head_dim, scale)
        return torch.cat([ang, torch.zeros(extra, ang.shape[1], dtype=ang.dtype)], dim=0)

    def encode_logits(self, images: Tensor) -> Tensor:
        if images.shape[-2:] != (self.cfg.train_res, self.cfg.train_res):
            raise ConfigurationError(
                f"encoder accepts {self.cfg.train_res}x{self.cfg.train_res} inputs, "
                f"got {tuple(images.shape[-2:])}"
            )
        toks = self.patch_embed(images)
        grid = self.cfg.train_grid
        if self.down is not None:
            toks = self.down(toks, grid, grid)
            grid //= 2
        b = toks.shape[0]
        lat = self.latent_tokens[None].expand(b, -1, -1)
        x = torch.cat([toks, lat], dim=1)
        angles = self._angles(grid, 1.0, self.cfg.latent_tokens)
        for blk in self.enc_blocks:
            x = blk(x, angles)
        return self.to_code(self.enc_norm(x[:, -self.cfg.latent_tokens:]))

    def encode(
        self,
        images: Tensor,
        tau: float,
        rng: torch.Generator | None = None,
        mode: str = "sample",
    ) -> tuple[Tensor, Tensor]:
        """Images -> (code, probs).

        mode "sample": bits are sampled (tau > 0, straight-through gradients
        attached) or thresholded (tau = 0). mode "relaxed": the sigmoid
        probabilities stand in for the code, keeping the whole path
        differentiable for gradient checking; requires tau > 0.
        """
        logits = self.encode_logits(images)
        if mode == "relaxed":
            if tau <= 0:
                raise ValueError("relaxed encoding requires tau > 0")
            probs = torch.sigmoid(logits / tau)
            return probs, probs
        if mode != "sample":
            raise ValueError(f"unknown encode mode {mode!r}")
        code, probs = quantize(logits, tau, rng)
        if tau > 0:
            code = straight_through(probs, code)
        return code, probs

    def decode(self, code: Tensor, out_res: int) -> Tensor:
        if out_res not in self.cfg.decode_res:
            raise ConfigurationError(
                f"decode resolution {out_res} not in {self.cfg.decode_res}"
            )
        b = code.shape[0]
        grid = self.cfg.decoder_grid(out_res)
        train_grid = self.cfg.decoder_grid(self.cfg.train_res)
        masks = self.mask_token[None, None].expand(b, grid * grid, -1)
        x = torch.cat([masks, self.code_embed(code)], dim=1)
        angles = self._angles(grid, grid / train_grid, self.cfg.latent_tokens)
        for blk in self.dec_blocks:
            x = blk(x, angles)
        toks = self.dec_norm(x[:, : grid * grid])
        if self.up is not None:
            toks = self.up(toks, grid, grid)
            grid *= 2
        return torch.tanh(self.pixel_head(toks, grid, grid))

    def forward(
        self,
        images: Tensor,
        tau: float,
        rng: torch.Generator | None = None,
        out_res: int | None = None,
        mode: str = "sample",
    ) -> Tensor:
        code, _ = self.encode(images, tau, rng, mode=mode)
        return self.decode(code, out_res if out_res is not None else self.cfg.train_res)


class RandomFeatureExtractor(nn.Module):
    """Frozen random-convolution feature pyramid for the perceptual term."""

    def __init__(self, seed: int = 1234):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList([
            nn.Conv2d(3, 32, 3, stride=2, padding=1),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.Conv2d(64, 64, 3, stride=1, padding=1),
        ])
        for conv in self.convs:
            _init_conv(conv, generator)
        self.requires_grad_(False)

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        for conv in self.convs:
            x = F.relu(conv(x))
            feats.append(x)
        return feats


def _feature_distance(extractor: RandomFeatureExtractor, a: Tensor, b: Tensor) -> Tensor:
    fa, fb = extractor(a), extractor(b)
    return sum(F.mse_loss(x, y) for x, y in zip(fa, fb)) / len(fa)


def reconstruction_loss(
    x: Tensor,
    x_hat: Tensor,
    perceptual: RandomFeatureExtractor | None = None,
    rng: torch.Generator | None = None,
    perceptual_weight: float = 0.5,
) -> Tensor:
    """Smooth-L1 plus a frozen random-feature perceptual term.

    The perceptual term matches features on (a) both images resized to 7/8
    of their resolution and (b) one random aligned crop of half resolution.
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    loss = F.smooth_l1_loss(x_hat, x, beta=1.0)
    if perceptual is None or perceptual_weight == 0:
        return loss
    res = x.shape[-1]
    g_res = max(4, round(res * 7 / 8))
    xa = F.interpolate(x, size=(g_res, g_res), mode="bilinear", align_corners=False)
    xb = F.interpolate(x_hat, size=(g_res, g_res), mode="bilinear", align_corners=False)
    perc = _feature_distance(perceptual, xa, xb)
    c_res = res // 2
    if c_res >= 4:
        if rng is not None:
            top = int(torch.randint(0, res - c_res + 1, (1,), generator=rng))
            left = int(torch.randint(0, res - c_res + 1, (1,), generator=rng))
        else:
            top = left = (res - c_res) // 2
        ca = x[..., top:top + c_res, left:left + c_res]
        cb = x_hat[..., top:top + c_res, left:left + c_res]
        perc = perc + _feature_distance(perceptual, ca, cb)
    return loss + perceptual_weight * perc
