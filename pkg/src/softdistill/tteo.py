"""Test-time optimization of the generator's input embeddings.

With the trained one-step generator completely frozen, the only free
variable at inference is the input: the embedding rows of a drawn
initialization (mask rows included). Plain gradient ascent (no momentum, no
clipping by default) pushes those rows to raise the soft-decoded reward of
the generator's output; after each iterate the hard candidate is sampled and
scored, and the best-scoring candidate over all iterates of all restarts is
returned. Iteration 0 is scored before any update, so zero iterations with N
restarts is exactly Best-of-N sampling.

Every restart owns a child random stream derived from (seed, restart index),
so restart k draws the same initialization regardless of how many restarts
or iterations run alongside it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .common import DTYPE, spawn_generator
from .distill import InitDistribution, draw_init
from .models import SequenceModel
from .rewards import RewardConfig
from .softembed import sample_tokens, soft_embed
from .toyworld import DecoderSpec, decode, toy_reward

__all__ = ["TteoConfig", "tteo_optimize"]


@dataclass(frozen=True)
class TteoConfig:
    """Plain-gradient-ascent settings: momentum 0, clipping off by default."""

    lr: float = 0.2
    iterations: int = 4
    n_starts: int = 4
    grad_clip: float = 0.0
    temperature: float = 1.0
    rewards: RewardConfig = field(
        default_factory=lambda: RewardConfig((("target_affinity", 1.0),)))

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")


def _hard_reward(student: SequenceModel, dec: DecoderSpec, rewards: RewardConfig,
                 e: torch.Tensor, c: int, temperature: float,
                 rng: torch.Generator):
    """Sample a hard candidate from the current embeddings and score it."""
    with torch.no_grad():
        z = student.logits_from_embeddings(e, c)
        if temperature == 0.0:
            x = z.argmax(-1)
        else:
            x = sample_tokens(z, temperature, rng)
        sig = decode(dec, dec.embed_table[x])
        val = 0.0
        for name, lam in rewards.items:
            val += lam * float(toy_reward(name, sig, c, dec)[0])
    return x[0], val


def _soft_objective(student: SequenceModel, dec: DecoderSpec,
                    rewards: RewardConfig, e: torch.Tensor, c: int) -> torch.Tensor:
    z = student.logits_from_embeddings(e, c)
    sig = decode(dec, soft_embed(z, dec.embed_table, 1.0))
    total = None
    for name, lam in rewards.items:
        r = toy_reward(name, sig, c, dec).sum()
        total = lam * r if total is None else total + lam * r
    return total


def tteo_optimize(student: SequenceModel, dec: DecoderSpec, c: int,
                  cfg: TteoConfig, init: InitDistribution, seed: int):
    """Multi-restart embedding ascent; returns (best tokens, best reward, trace).

    Per restart: draw an initialization, look up its input embedding rows,
    and alternate scoring the hard sample with gradient-ascent updates of the
    embeddings on the soft-decoded reward. Model parameters receive no
    updates; a non-finite reward abandons the restart (recorded in the
    trace). The trace holds per-restart reward-per-iteration lists and the
    running best.
    """
    cfg.rewards.require_nonempty()
    was_training = student.training
    student.eval()
    best_tokens, best_reward = None, -math.inf
    trace = []
    for k in range(cfg.n_starts):
        rng = spawn_generator(seed, "tteo", k)
        x_init = draw_init(init, 1, rng)
        e = student.tok_emb(x_init).detach().clone()
        entry = {"rewards": [], "failed": False}
        local_best, local_tokens = -math.inf, None
        for it in range(cfg.iterations + 1):
            tokens, val = _hard_reward(student, dec, cfg.rewards, e, c,
                                       cfg.temperature, rng)
            if not math.isfinite(val):
                entry["failed"] = True
                break
            entry["rewards"].append(val)
            if val > local_best:
                local_best, local_tokens = val, tokens
            if it == cfg.iterations:
                break
            e_var = e.requires_grad_(True)
            obj = _soft_objective(student, dec, cfg.rewards, e_var, c)
            grad = torch.autograd.grad(obj, e_var)[0]
            if not torch.isfinite(grad).all():
                entry["failed"] = True
                break
            if cfg.grad_clip > 0:
                norm = grad.norm()
                if norm > cfg.grad_clip:
                    grad = grad * (cfg.grad_clip / norm)
            e = (e.detach() + cfg.lr * grad).detach()
        entry["best"] = local_best if entry["rewards"] else None
        trace.append(entry)
        if entry["rewards"] and local_best > best_reward:
            best_reward, best_tokens = local_best, local_tokens
    if was_training:
        student.train()
    if best_tokens is None:
        raise RuntimeError("every restart produced a non-finite reward")
    return best_tokens, best_reward, trace
