"""Bernoulli diffusion over binary codes.

Continuous time runs over [0, 1]: t = 0 is the clean code, t = 1 is fair
coin flips. The forward marginal is z^t ~ B(0.5 t + (1 - t) z). The reverse
process denoises with a transformer that predicts per-bit flip
probabilities; XOR with the noisy bits converts those to clean-bit
probabilities.

The reverse-step kernel is the bridging chain consistent with the forward
marginal: a bit survives un-randomized from time s to time t with
probability kappa = (1 - t)/(1 - s) and is replaced by a fair coin
otherwise, which composes exactly (kappa_{s->u} * kappa_{u->t} =
kappa_{s->t}) and reproduces the marginal at s = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .binary import bce, bernoulli_sample, soft_xor
from .blocks import GeneratorBlock, adaln_modulate, init_linear_
from .conditioning import substitute_null

__all__ = [
    "GuidanceParams", "DenoiserConfig", "Denoiser", "adaln_modulate",
    "sample_timestep", "forward_noise", "transition_retention",
    "posterior_prob", "posterior_grid", "predict_clean", "diffusion_loss",
    "sample_original", "sample_simplified",
]


@dataclass(frozen=True)
class GuidanceParams:
    """Classifier-free guidance scale, sampling temperature, and step count."""

    alpha: float = 7.5
    temperature: float = 0.75
    steps: int = 20

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.temperature <= 0:
            raise ValueError("sampling temperature must be > 0")
        if self.steps < 1:
            raise ValueError("step count must be >= 1")


def sample_timestep(
    rng: torch.Generator, loc: float = 0.0, scale: float = 1.0, shape=()
) -> Tensor:
    """Logit-normal timesteps: t = sigmoid(loc + scale * n), n ~ N(0, 1)."""
    if scale <= 0:
        raise ValueError("scale must be > 0")
    n = torch.empty(shape).normal_(generator=rng)
    return torch.sigmoid(loc + scale * n)


def _check_time(t) -> None:
    t_min = float(t.min()) if torch.is_tensor(t) else float(t)
    t_max = float(t.max()) if torch.is_tensor(t) else float(t)
    if t_min < 0 or t_max > 1:
        raise ValueError("timesteps must lie in [0, 1]")


def forward_noise(code: Tensor, t, rng: torch.Generator) -> Tensor:
    """Sample z^t ~ B(0.5 t + (1 - t) z), elementwise independent.

    ``t`` is a scalar or a per-sample tensor of shape (batch,).
    """
    _check_time(t)
    if torch.is_tensor(t) and t.dim() > 0:
        t = t.view(-1, *([1] * (code.dim() - 1))).to(code.dtype)
    params = 0.5 * t + (1 - t) * code
    return bernoulli_sample(params, rng)


def transition_retention(s: float, t: float) -> float:
    """Probability that a bit survives un-randomized from time s to time t."""
    if t < s or s >= 1:
        raise ValueError(f"need 0 <= s <= t with s < 1, got s={s}, t={t}")
    if s < 0 or t > 1:
        raise ValueError("times must lie in [0, 1]")
    return (1.0 - t) / (1.0 - s)


def posterior_prob(z_t_bit: int, p_clean: float, s: float, t: float) -> float:
    """P(z^s = 1 | z^t, clean ~ B(p_clean)) for a single bit.

    Marginalizes the clean bit with weights (1 - p_clean, p_clean), using the
    exact per-clean-bit posterior of the bridging chain. Requires
    0 <= s < t <= 1.
    """
    if z_t_bit not in (0, 1):
        raise ValueError("observed bit must be 0 or 1")
    if not 0.0 <= p_clean <= 1.0:
        raise ValueError("p_clean must lie in [0, 1]")
    if not 0.0 <= s < t <= 1.0:
        raise ValueError(f"need 0 <= s < t <= 1, got s={s}, t={t}")
    kappa = transition_retention(s, t)
    # chain probabilities: a_z = P(z^s=1 | clean=z), k_b = P(z^t=1 | z^s=b)
    a1, a0 = 1.0 - 0.5 * s, 0.5 * s
    k1, k0 = 0.5 * (1.0 + kappa), 0.5 * (1.0 - kappa)
    like1 = k1 if z_t_bit else 1.0 - k1  # P(z^t | z^s=1)
    like0 = k0 if z_t_bit else 1.0 - k0
    inner1 = like1 * a1 / (like1 * a1 + like0 * (1.0 - a1))
    inner0 = like1 * a0 / (like1 * a0 + like0 * (1.0 - a0))
    return p_clean * inner1 + (1.0 - p_clean) * inner0


def posterior_grid(z_t: Tensor, p_clean: Tensor, s: float, t: float) -> Tensor:
    """Vectorized `posterior_prob` over a whole grid of bits."""
    if not 0.0 <= s < t <= 1.0:
        raise ValueError(f"need 0 <= s < t <= 1, got s={s}, t={t}")
    kappa = (1.0 - t) / (1.0 - s)
    a1, a0 = 1.0 - 0.5 * s, 0.5 * s
    k1, k0 = 0.5 * (1.0 + kappa), 0.5 * (1.0 - kappa)
    like1 = z_t * k1 + (1 - z_t) * (1.0 - k1)
    like0 = z_t * k0 + (1 - z_t) * (1.0 - k0)
    inner1 = like1 * a1 / (like1 * a1 + like0 * (1.0 - a1))
    inner0 = like1 * a0 / (like1 * a0 + like0 * (1.0 - a0))
    return p_clean * inner1 + (1.0 - p_clean) * inner0


@dataclass(frozen=True)
class DenoiserConfig:
    tokens: int = 16
    code_bits: int = 16
    hidden: int = 256
    depth: int = 6
    heads: int = 8

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden size must be divisible by the head count")


class Denoiser(nn.Module):
    """Transformer denoiser over embedded bit tokens with adaLN-Zero blocks.

    A single linear layer turns the scalar timestep into the modulation
    embedding. The output head is zero-initialized, so the untrained model
    predicts flip probability 0.5 everywhere (loss = log 2).
    """

    def __init__(self, cfg: DenoiserConfig, generator: torch.Generator):
        super().__init__()
        self.cfg = cfg
        self.bit_embed = nn.Linear(cfg.code_bits, cfg.hidden, bias=False)
        self.t_proj = nn.Linear(1, cfg.hidden)
        init_linear_(self.bit_embed, generator)
        init_linear_(self.t_proj, generator)
        self.blocks = nn.ModuleList(
            GeneratorBlock(cfg.hidden, cfg.heads, cfg.tokens, use_adaln=True, generator=generator)
            for _ in range(cfg.depth)
        )
        self.norm_f = nn.LayerNorm(cfg.hidden)
        self.head = nn.Linear(cfg.hidden, cfg.code_bits, bias=False)
        self.head.weight.data.zero_()

    @property
    def depth(self) -> int:
        return self.cfg.depth

    def timestep_embedding(self, t, batch: int) -> Tensor:
        p = self.t_proj.weight
        if not torch.is_tensor(t):
            t = torch.tensor(float(t))
        t = t.to(device=p.device, dtype=p.dtype).reshape(-1, 1)
        if t.shape[0] == 1 and batch > 1:
            t = t.expand(batch, 1)
        return self.t_proj(t)

    def forward(self, z_t: Tensor, t, cond: Tensor | None = None) -> Tensor:
        """Logit grid of per-bit flip probabilities for noisy codes z_t."""
        b, k, cb = z_t.shape
        if (k, cb) != (self.cfg.tokens, self.cfg.code_bits):
            raise ValueError(f"expected {self.cfg.tokens}x{self.cfg.code_bits} codes")
        _check_time(t)
        x = self.bit_embed(z_t)
        te = self.timestep_embedding(t, b)
        for d, blk in enumerate(self.blocks):
            x = blk(x, cond=None if cond is None else cond[d], t_embed=te)
        return self.head(self.norm_f(x))


def predict_clean(
    model: Denoiser,
    z_t: Tensor,
    t,
    g: GuidanceParams,
    cond: Tensor | None = None,
    null: Tensor | None = None,
) -> Tensor:
    """Guided clean-bit probabilities.

    Guidance extrapolates conditional against null logits, divided by the
    sampling temperature; the sigmoid gives flip probabilities which are
    XORed with z^t. ``cond=None`` runs the null (unconditional) path.
    """
    if cond is None:
        # unconditional path: the null stack when an encoder exists, else bare
        logits = model(z_t, t, null) / g.temperature
    elif g.alpha == 0:
        logits = model(z_t, t, cond) / g.temperature
    else:
        if null is None:
            raise ValueError("guided sampling requires the null condition stack")
        # (1+a) c/tau - a n/tau, arranged so equal branches cancel exactly
        base = model(z_t, t, cond) / g.temperature
        logits = base + g.alpha * (base - model(z_t, t, null) / g.temperature)
    return soft_xor(torch.sigmoid(logits), z_t)


def diffusion_loss(
    model: Denoiser,
    z: Tensor,
    rng: torch.Generator,
    cond: Tensor | None = None,
    null: Tensor | None = None,
    drop_prob: float = 0.10,
    t: Tensor | None = None,
) -> Tensor:
    """Flip-prediction BCE at a logit-normal timestep.

    Draw order from ``rng`` is fixed (timesteps, forward noise, condition
    dropout) so training runs are resumable from a saved generator state.
    ``t`` can be passed explicitly for deterministic evaluation.
    """
    b = z.shape[0]
    if t is None:
        t = sample_timestep(rng, shape=(b,))
    z_t = forward_noise(z, t, rng)
    if cond is not None and drop_prob > 0:
        if null is None:
            raise ValueError("condition dropout requires the null stack")
        drop = torch.rand(b, generator=rng) < drop_prob
        cond = substitute_null(cond, null, drop)
    logits = model(z_t, t, cond)
    return bce(soft_xor(torch.sigmoid(logits), z_t), z)


def _init_noise(model: Denoiser, batch: int, rng: torch.Generator) -> Tensor:
    p = next(model.parameters())
    half = torch.full(
        (batch, model.cfg.tokens, model.cfg.code_bits), 0.5, dtype=p.dtype, device=p.device
    )
    return bernoulli_sample(half, rng)


def sample_original(
    model: Denoiser,
    g: GuidanceParams,
    rng: torch.Generator,
    batch: int = 1,
    cond: Tensor | None = None,
    null: Tensor | None = None,
) -> Tensor:
    """Ancestral sampler: step via the exact per-bit reverse posterior."""
    z = _init_noise(model, batch, rng)
    s_count = g.steps
    with torch.no_grad():
        for step in range(1, s_count + 1):
            t_cur = 1.0 - (step - 1) / s_count
            t_next = 1.0 - step / s_count
            p_clean = predict_clean(model, z, t_cur, g, cond, null)
            # at t_next = 0 the posterior reduces to p_clean exactly
            p_next = posterior_grid(z, p_clean, t_next, t_cur)
            z = bernoulli_sample(p_next, rng)
    return z


def sample_simplified(
    model: Denoiser,
    g: GuidanceParams,
    rng: torch.Generator,
    batch: int = 1,
    cond: Tensor | None = None,
    null: Tensor | None = None,
) -> Tensor:
    """Simplified sampler: re-noise the predicted clean distribution to t."""
    z = _init_noise(model, batch, rng)
    s_count = g.steps
    with torch.no_grad():
        for step in range(1, s_count + 1):
            t_cur = 1.0 - (step - 1) / s_count
            t_next = 1.0 - step / s_count
            p_clean = predict_clean(model, z, t_cur, g, cond, null)
            p_next = 0.5 * t_next + (1.0 - t_next) * p_clean
            z = bernoulli_sample(p_next, rng)
    return z

