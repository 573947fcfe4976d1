"""Differentiable relaxations of categorical token selection.

The soft embedding of a logits row z is the expected token embedding under
softmax(z / tau): exact, unbiased as a function of the distribution, and
differentiable, so generator logits can feed any embedding-consuming network
(teacher trunk, discriminator, decoder) with gradients intact. The Gumbel
straight-through variant is the biased baseline it is compared against: hard
one-hot forward, soft backward.

The mask row of an embedding table is never part of the relaxation: logits
score only real tokens, so soft_embed consumes the first ``vocab_size`` rows.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .common import DTYPE, rand
from .toyworld import DecoderSpec, decode

__all__ = [
    "RelaxationConfig",
    "soft_embed",
    "gumbel_st_embed",
    "sample_tokens",
    "fidelity_gap",
]


@dataclass(frozen=True)
class RelaxationConfig:
    """How generator logits become embedding rows downstream.

    ``soft`` is the expectation relaxation; ``gumbel_st`` the straight-through
    baseline; ``hard`` plain sampling (no gradient, rejected by callers that
    need one). ``noise_scale`` multiplies the Gumbel noise (0 disables it).
    """

    kind: str = "soft"
    temperature: float = 1.0
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("soft", "gumbel_st", "hard"):
            raise ValueError(f"unknown relaxation kind {self.kind!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


def _check_tau(tau: float) -> None:
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")


def soft_embed(z: torch.Tensor, E: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """Expected embedding per position: softmax(z / tau) @ E[:V].

    ``z`` is (..., L, V); ``E`` has at least V rows (extra rows, e.g. the mask
    row, are ignored). Output is (..., L, d), differentiable in ``z``.
    """
    _check_tau(tau)
    v = z.shape[-1]
    if E.shape[0] < v:
        raise ValueError(f"embedding table has {E.shape[0]} rows, need >= {v}")
    p = torch.softmax(z / tau, dim=-1)
    return p @ E[:v].to(p.dtype)


def gumbel_st_embed(z: torch.Tensor, E: torch.Tensor, tau: float,
                    rng: torch.Generator, noise_scale: float = 1.0) -> torch.Tensor:
    """Gumbel straight-through embedding: hard forward, soft backward.

    Forward value is the embedding row of argmax(z + noise_scale * g) for
    Gumbel noise g; the backward pass uses the gradient of the tempered
    softmax of the same perturbed logits, so the estimator is biased for any
    finite tau.
    """
    _check_tau(tau)
    v = z.shape[-1]
    u = rand(z.shape, rng).clamp_min(1e-12)
    g = -torch.log(-torch.log(u))
    y = z + noise_scale * g
    p_soft = torch.softmax(y / tau, dim=-1)
    hard = torch.nn.functional.one_hot(y.argmax(-1), v).to(p_soft.dtype)
    # grouping keeps the forward value exactly one-hot (p - p is exactly 0)
    st = hard + (p_soft - p_soft.detach())
    return st @ E[:v].to(st.dtype)


def sample_tokens(z: torch.Tensor, temperature: float, rng: torch.Generator) -> torch.Tensor:
    """Independent per-position categorical draw from softmax(z / temperature).

    Temperature 0 is argmax. No gradient flows; the result is a long tensor
    shaped like ``z`` without its vocabulary axis.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    z = z.detach()
    if temperature == 0.0:
        return z.argmax(-1)
    probs = torch.softmax(z / temperature, dim=-1)
    flat = probs.reshape(-1, probs.shape[-1])
    out = torch.multinomial(flat, 1, generator=rng)
    return out.reshape(z.shape[:-1])


def fidelity_gap(z: torch.Tensor, E: torch.Tensor, dec: DecoderSpec,
                 rng: torch.Generator | None = None, tau: float = 1.0,
                 n_samples: int = 1, exact: bool = False) -> torch.Tensor:
    """Decoded distance between the relaxation and hard sampling.

    Mean squared difference between decode(soft_embed(z)) and the decode of
    the row-lookup embedding of tokens drawn at the same temperature. With
    ``exact=True`` the expectation over hard draws is computed in closed form
    (per-position enumeration) instead of Monte Carlo. ``E`` must be
    decoder-compatible, i.e. normally ``dec.embed_table``.

    Near-deterministic logits give a gap near zero (the relaxation's fidelity
    property); flat logits give the decoded-embedding variance of the token
    distribution.
    """
    _check_tau(tau)
    v = z.shape[-1]
    soft_sig = decode(dec, soft_embed(z, E, tau))
    if exact:
        p = torch.softmax(z / tau, dim=-1)
        # (V, L, m) decoded signal of every possible hard token per position
        rows = decode(dec, E[:v].to(DTYPE)[:, None, :].expand(v, z.shape[-2], E.shape[1]))
        sq = ((rows[None] - soft_sig[..., None, :, :]) ** 2).mean(-1)  # (..., V, L)
        per_pos = (p.transpose(-1, -2) * sq).sum(-2)  # expectation over tokens
        return per_pos.mean()
    if rng is None:
        raise ValueError("Monte Carlo mode needs an rng")
    gaps = []
    for _ in range(n_samples):
        x = sample_tokens(z, tau, rng)
        hard_sig = decode(dec, E[x].to(DTYPE))
        gaps.append(((soft_sig - hard_sig) ** 2).mean())
    return torch.stack(gaps).mean()
