"""Adversarial refinement on frozen teacher features.

The discriminator never owns a backbone: real and fake embedding sequences
run through the frozen teacher trunk, per-block activations are tapped, and
small trainable convolutional heads aggregate each tap into a feature vector.
A ratio embedding is added to every head output, the heads are concatenated,
and a final MLP with a zero-initialized last layer produces the logit (so a
fresh discriminator outputs exactly 0 everywhere).

Both real and fake inputs are masked-embedding augmented before the teacher:
positions are replaced by the mask embedding row at a ratio drawn from a
uniform range, with the same mask pattern applied to the paired real and
fake batches. The fake path stays differentiable through the soft embedding
into the generator's logits; real tokens enter via one-hot row lookup.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .common import DTYPE, rand, randn
from .models import ModelConfig, SequenceModel
from .softembed import RelaxationConfig, gumbel_st_embed, sample_tokens, soft_embed

__all__ = [
    "DiscriminatorSpec",
    "AugmentedInput",
    "Discriminator",
    "build_discriminator",
    "mask_embeddings",
    "discriminate",
    "gan_losses",
    "relax_embed",
]


@dataclass(frozen=True)
class DiscriminatorSpec:
    """Architecture and augmentation knobs for the lightweight heads.

    ``taps`` lists teacher block indices to read activations from (None taps
    every block). ``mask_range`` is the uniform interval the augmentation
    ratio is drawn from; (0, 0) disables masking. ``feature_noise`` optionally
    perturbs tapped activations with Gaussian noise of that scale.
    """

    taps: tuple | None = None
    head_width: int = 32
    final_hidden: int = 64
    mask_range: tuple = (0.0, 0.95)
    feature_noise: float = 0.0

    def __post_init__(self):
        lo, hi = self.mask_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("mask_range must satisfy 0 <= low <= high <= 1")


@dataclass
class AugmentedInput:
    """Embedding rows after mask augmentation, with the applied pattern."""

    embeddings: torch.Tensor  # (B, L, d)
    r: torch.Tensor           # (B,)
    mask: torch.Tensor        # (B, L) bool


class Discriminator(nn.Module):
    def __init__(self, model_cfg: ModelConfig, spec: DiscriminatorSpec):
        super().__init__()
        taps = spec.taps if spec.taps is not None else tuple(range(model_cfg.n_layers))
        for t in taps:
            if not 0 <= t < model_cfg.n_layers:
                raise ValueError(f"tap index {t} out of range for depth {model_cfg.n_layers}")
        self.taps = tuple(taps)
        self.spec = spec
        d, w = model_cfg.d_model, spec.head_width
        self.heads = nn.ModuleList(
            nn.Sequential(
                nn.Conv1d(d, w, kernel_size=3, padding=1), nn.GELU(),
                nn.Conv1d(w, w, kernel_size=3, stride=2, padding=1), nn.GELU())
            for _ in self.taps)
        self.r_proj = nn.Linear(8, w)
        self.final = nn.Sequential(
            nn.Linear(w * len(self.taps), spec.final_hidden), nn.GELU(),
            nn.Linear(spec.final_hidden, 1))
        nn.init.zeros_(self.final[-1].weight)
        nn.init.zeros_(self.final[-1].bias)

    def _ratio_features(self, r: torch.Tensor) -> torch.Tensor:
        freqs = torch.tensor([1.0, 2.0, 4.0, 8.0], dtype=r.dtype)
        ang = 2.0 * torch.pi * r[:, None] * freqs
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)

    def forward(self, tapped: list[torch.Tensor], r: torch.Tensor) -> torch.Tensor:
        """Tapped activations (one (B, L, d) tensor per tap) -> (B,) logit."""
        if len(tapped) != len(self.taps):
            raise ValueError(f"expected {len(self.taps)} tapped tensors, got {len(tapped)}")
        r_emb = F.gelu(self.r_proj(self._ratio_features(r)))
        feats = []
        for head, h in zip(self.heads, tapped):
            pooled = head(h.transpose(1, 2)).mean(-1)  # conv over positions
            feats.append(pooled + r_emb)
        return self.final(torch.cat(feats, dim=-1)).squeeze(-1)


def build_discriminator(model_cfg: ModelConfig, spec: DiscriminatorSpec,
                        seed: int) -> Discriminator:
    """Deterministically initialized discriminator heads (teacher not included)."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        disc = Discriminator(model_cfg, spec)
    return disc.to(DTYPE)


def mask_embeddings(emb: torch.Tensor, r, mask_row: torch.Tensor,
                    rng: torch.Generator | None = None,
                    mask: torch.Tensor | None = None) -> AugmentedInput:
    """Replace each position's row by ``mask_row`` independently with prob r.

    Pass an explicit boolean ``mask`` to reuse a pattern across paired
    batches; otherwise one is drawn from ``rng``. ``r`` may be scalar or a
    per-element (B,) tensor.
    """
    r = torch.as_tensor(r, dtype=DTYPE)
    if r.dim() == 0:
        r = r.expand(emb.shape[0])
    if (r < 0).any() or (r > 1).any():
        raise ValueError("mask ratio must lie in [0, 1]")
    if mask is None:
        if rng is None:
            raise ValueError("need an rng when no explicit mask is given")
        mask = rand(emb.shape[:2], rng) < r[:, None]
    out = torch.where(mask[..., None], mask_row.to(emb.dtype), emb)
    return AugmentedInput(out, r, mask)


def _tapped_features(disc: Discriminator, teacher: SequenceModel,
                     emb: torch.Tensor, c) -> list[torch.Tensor]:
    _, hidden = teacher.logits_from_embeddings(emb, c, return_hidden=True)
    return [hidden[i] for i in disc.taps]


def discriminate(disc: Discriminator, teacher: SequenceModel,
                 inp: AugmentedInput, c) -> torch.Tensor:
    """Score augmented embeddings: frozen-teacher features through the heads.

    Differentiable both in ``inp.embeddings`` (generator updates) and in head
    parameters (discriminator updates); class conditioning enters through the
    teacher trunk, ratio conditioning through the head-side embedding.
    """
    if not teacher.frozen:
        raise ValueError("discriminator features require a frozen teacher")
    return disc(_tapped_features(disc, teacher, inp.embeddings, c), inp.r)


def relax_embed(z: torch.Tensor, E: torch.Tensor, relaxation: RelaxationConfig,
                rng: torch.Generator, require_grad: bool = True) -> torch.Tensor:
    """Turn logits into embedding rows per the configured relaxation."""
    if relaxation.kind == "soft":
        return soft_embed(z, E, relaxation.temperature)
    if relaxation.kind == "gumbel_st":
        return gumbel_st_embed(z, E, relaxation.temperature, rng,
                               relaxation.noise_scale)
    if require_grad:
        raise ValueError("hard relaxation provides no gradient path")
    return E[sample_tokens(z, 1.0, rng)].to(DTYPE)


def gan_losses(disc: Discriminator, teacher: SequenceModel, real: torch.Tensor,
               fake_logits: torch.Tensor, c, rng: torch.Generator,
               relaxation: RelaxationConfig | None = None,
               p_r: tuple = (0.0, 0.95), feature_noise: float = 0.0):
    """Non-saturating GAN objectives over mask-augmented embeddings.

    Draws one ratio per batch element from the uniform ``p_r`` interval and
    one mask pattern shared by the paired real and fake rows. Returns
    (d_loss, g_loss, diagnostics):

    * d_loss scores real embeddings (token lookup) against detached fake
      features; it trains head parameters only.
    * g_loss is -log sigmoid(D(fake)) with the fake path differentiable
      through the relaxation into ``fake_logits``.
    """
    if not teacher.frozen:
        raise ValueError("gan losses require a frozen teacher")
    relaxation = relaxation or RelaxationConfig()
    B = real.shape[0]
    lo, hi = p_r
    r = lo + (hi - lo) * rand((B,), rng)
    E = teacher.embedding_table
    mask_row = E[teacher.cfg.mask_id].detach()
    pattern = rand(real.shape, rng) < r[:, None]
    real_emb = E[real].detach()
    fake_emb = relax_embed(fake_logits, E, relaxation, rng, require_grad=False)
    real_aug = mask_embeddings(real_emb, r, mask_row, mask=pattern)
    fake_aug = mask_embeddings(fake_emb, r, mask_row, mask=pattern)
    with torch.no_grad():
        real_taps = _tapped_features(disc, teacher, real_aug.embeddings, c)
    fake_taps = _tapped_features(disc, teacher, fake_aug.embeddings, c)
    if feature_noise > 0:
        real_taps = [h + feature_noise * randn(h.shape, rng) for h in real_taps]
        fake_taps = [h + feature_noise * randn(h.shape, rng) for h in fake_taps]
    logit_real = disc(real_taps, r)
    logit_fake = disc(fake_taps, r)
    logit_fake_d = disc([h.detach() for h in fake_taps], r)
    d_loss = F.softplus(-logit_real).mean() + F.softplus(logit_fake_d).mean()
    g_loss = F.softplus(-logit_fake).mean()
    diag = {
        "real_logit_mean": float(logit_real.detach().mean()),
        "fake_logit_mean": float(logit_fake.detach().mean()),
        "fake_logit_std": float(logit_fake.detach().std()),
        "r_mean": float(r.mean()),
    }
    return d_loss, g_loss, diag
