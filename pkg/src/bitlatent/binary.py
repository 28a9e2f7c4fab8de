"""Bit-level primitives shared by the tokenizer and both generative models.

Conventions used throughout the package:

* a *code* is a float tensor whose entries are exactly 0.0 or 1.0,
* a *probability grid* has entries in the closed unit interval,
* a *logit grid* is any finite real tensor of the same shape.

All three are plain tensors of shape ``(..., k, c)`` with ``k`` tokens of
``c`` bits each. Every sampling routine draws from an explicitly passed
``torch.Generator``; nothing in this module touches global RNG state.
"""

from __future__ import annotations

import torch
from torch import Tensor

# Clamp applied to probabilities before logs in `bce`. Chosen well below the
# 1e-4 relative tolerance of the finite-difference gradient checks.
LOG_EPS = 1e-7


def bernoulli_sample(probs: Tensor, generator: torch.Generator) -> Tensor:
    """Draw independent bits, bit[i] = 1 with probability probs[i]."""
    if probs.numel() and (probs.min() < 0 or probs.max() > 1):
        raise ValueError("Bernoulli parameters must lie in [0, 1]")
    return torch.bernoulli(probs, generator=generator)


def quantize(
    logits: Tensor, tau: float, generator: torch.Generator | None = None
) -> tuple[Tensor, Tensor]:
    """Convert logits to bits via a temperature sigmoid.

    tau > 0: probs = sigmoid(logits / tau), code sampled from probs.
    tau = 0: hard threshold, bit = 1 iff logit > 0 (ties map to 0), and the
    returned probs are the code itself. The tau = 0 path is deterministic and
    needs no generator.
    """
    if tau < 0:
        raise ValueError(f"temperature must be >= 0, got {tau}")
    if tau == 0:
        code = (logits > 0).to(logits.dtype)
        return code, code
    if generator is None:
        raise ValueError("stochastic quantization (tau > 0) requires a generator")
    probs = torch.sigmoid(logits / tau)
    code = bernoulli_sample(probs, generator)
    return code, probs


def straight_through(probs: Tensor, code: Tensor) -> Tensor:
    """Attach the identity gradient estimator to a sampled code.

    Forward value equals ``code``; the backward pass treats the output as if
    it were ``probs``.
    """
    if probs.shape != code.shape:
        raise ValueError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(code.shape)}")
    return probs + (code - probs).detach()


def soft_xor(p: Tensor, b: Tensor) -> Tensor:
    """Probability-valued XOR against a hard bit grid.

    out = p where b = 0 and 1 - p where b = 1. Involutive in b:
    soft_xor(soft_xor(p, b), b) == p exactly.
    """
    if p.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(b.shape)}")
    return p * (1 - b) + (1 - p) * b


def bce(p: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy of a probability grid against a bit grid."""
    p = p.clamp(LOG_EPS, 1 - LOG_EPS)
    return -(target * p.log() + (1 - target) * (1 - p).log()).mean()
