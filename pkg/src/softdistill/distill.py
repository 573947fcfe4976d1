"""One-step generator distillation by on-policy distribution matching.

The student maps a partially-masked, partially-random initialization to a
full logits grid in a single forward pass. Its training signal comes from a
frozen teacher and an auxiliary denoiser: student samples are re-corrupted,
both models score the corrupted state, and the gradient of a divergence
between their conditionals, taken at the auxiliary's logits over masked
positions, is applied to the student's logits through a linear surrogate.
The auxiliary itself is trained with the denoising loss on student samples,
so it tracks the student's conditionals as the student moves.

The combined generator objective adds the adversarial and reward terms from
``adversarial`` and ``rewards`` with configurable weights; ``distill_step``
wires the whole thing together, including the discriminator's own update and
the student's EMA shadow.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .adversarial import (Discriminator, DiscriminatorSpec,
                          build_discriminator, gan_losses)
from .common import (DTYPE, TrainingDiverged, check_finite, make_generator,
                     rand, randint)
from .maskdiff import MaskSchedule, forward_mask, mdm_loss
from .models import SequenceModel, clone_model, guided_logits
from .rewards import RewardConfig, reward_loss
from .softembed import RelaxationConfig, sample_tokens
from .toyworld import DecoderSpec, GroundTruthDistribution

__all__ = [
    "InitDistribution",
    "DivergenceSpec",
    "DistillConfig",
    "DistillState",
    "draw_init",
    "divergence",
    "matching_surrogate_loss",
    "auxiliary_update",
    "combined_generator_loss",
    "distill_step",
    "init_distill_state",
    "attach_discriminator",
    "run_distill",
]


@dataclass(frozen=True)
class InitDistribution:
    """Entropy-preserving initialization: exact mask count, random elsewhere.

    A draw has round(r_init * L) mask positions chosen uniformly without
    replacement; every other position is a uniform token. The random tokens
    carry the entropy a one-step generator needs, the masks leave room for
    the generator to decide.
    """

    r_init: float = 0.6
    vocab_size: int = 4
    seq_len: int = 4

    def __post_init__(self):
        if not 0.0 <= self.r_init <= 1.0:
            raise ValueError("r_init must lie in [0, 1]")

    @property
    def n_masked(self) -> int:
        return int(round(self.r_init * self.seq_len))


def draw_init(init: InitDistribution, n: int, rng: torch.Generator) -> torch.Tensor:
    """(n, L) batch of initializations with exactly ``init.n_masked`` masks."""
    L, V = init.seq_len, init.vocab_size
    x = randint(V, (n, L), rng)
    if init.n_masked > 0:
        # uniform k-subset per row via random-key argsort
        keys = rand((n, L), rng)
        pos = torch.argsort(keys, dim=1)[:, :init.n_masked]
        x = x.scatter(1, pos, V)
    return x


@dataclass(frozen=True)
class DivergenceSpec:
    """Divergence family for matching teacher and auxiliary conditionals.

    ``fkl`` is KL(teacher || auxiliary), ``rkl`` the reverse, and
    ``jeffreys`` the blend (1 - lam) * fkl + lam * rkl. Negative ``lam`` is
    accepted as an extrapolated weighting; the zero-divergence fixed point
    and its zero gradient are preserved for any ``lam``.
    """

    family: str = "fkl"
    jeffreys_lambda: float = -0.2

    def __post_init__(self):
        if self.family not in ("fkl", "rkl", "jeffreys"):
            raise ValueError(f"unknown divergence family {self.family!r}")


def divergence(spec: DivergenceSpec, logp_a: torch.Tensor,
               logp_b: torch.Tensor) -> torch.Tensor:
    """Per-position divergence D(p_a || p_b) from log-probabilities.

    Inputs are (..., V) log-softmax rows; output drops the vocabulary axis.
    """
    p_a, p_b = logp_a.exp(), logp_b.exp()
    fkl = (p_a * (logp_a - logp_b)).sum(-1)
    if spec.family == "fkl":
        return fkl
    rkl = (p_b * (logp_b - logp_a)).sum(-1)
    if spec.family == "rkl":
        return rkl
    lam = spec.jeffreys_lambda
    return (1.0 - lam) * fkl + lam * rkl


@dataclass
class DistillConfig:
    steps: int = 3000
    batch_size: int = 64
    lr: float = 1e-4
    aux_lr: float | None = 3e-4  # tracker runs hotter than the student; None inherits lr
    disc_lr: float = 1e-3
    warmup_steps: int = 100
    grad_clip: float = 1.0
    betas: tuple = (0.9, 0.999)
    disc_betas: tuple = (0.0, 0.999)
    ema_ratio: float = 0.9999
    lr_decay: str = "none"
    lr_min_ratio: float = 0.1
    cfg_w: float = 1.5
    sample_temperature: float = 1.0
    freeze_embedding: bool = True
    gan_onset_steps: int = 1000
    seed: int = 0
    log_every: int = 100


@dataclass
class DistillState:
    """Everything a distillation run owns, including the persistent step count."""

    teacher: SequenceModel
    student: SequenceModel
    aux: SequenceModel
    dist: GroundTruthDistribution
    dec: DecoderSpec
    cfg: DistillConfig
    schedule_gen: MaskSchedule
    schedule_aux: MaskSchedule
    init: InitDistribution
    div: DivergenceSpec
    weights: dict
    rewards: RewardConfig
    relaxation: RelaxationConfig
    disc: Discriminator | None = None
    disc_spec: DiscriminatorSpec | None = None
    opt_student: torch.optim.Optimizer | None = None
    opt_aux: torch.optim.Optimizer | None = None
    opt_disc: torch.optim.Optimizer | None = None
    step: int = 0
    ema: dict = field(default_factory=dict)
    rng: torch.Generator | None = None

    def gan_active(self) -> bool:
        return self.weights.get("gan", 0.0) != 0.0 and self.disc is not None

    def gan_applied_to_generator(self) -> bool:
        return self.gan_active() and self.step >= self.cfg.gan_onset_steps

    def ema_model(self) -> SequenceModel:
        """A frozen copy of the student carrying the EMA parameter shadow."""
        out = clone_model(self.student)
        sd = out.state_dict()
        for k, v in self.ema.items():
            sd[k].copy_(v)
        return out.freeze()


def init_distill_state(teacher: SequenceModel, dist: GroundTruthDistribution,
                       dec: DecoderSpec, cfg: DistillConfig,
                       schedule_gen: MaskSchedule | None = None,
                       schedule_aux: MaskSchedule | None = None,
                       init: InitDistribution | None = None,
                       div: DivergenceSpec | None = None,
                       weights: dict | None = None,
                       rewards: RewardConfig | None = None,
                       relaxation: RelaxationConfig | None = None,
                       disc_spec: DiscriminatorSpec | None = None) -> DistillState:
    """Set up student and auxiliary as teacher copies plus fresh optimizers.

    The teacher is frozen here. The student's embedding table is frozen when
    the config says so; a discriminator is built only if a spec is given.
    """
    teacher = teacher if teacher.frozen else clone_model(teacher, freeze=True)
    student = clone_model(teacher)
    aux = clone_model(teacher)
    if cfg.freeze_embedding:
        student.tok_emb.weight.requires_grad_(False)
    weights = dict({"distill": 1.0, "gan": 0.0, "reward": 0.0}, **(weights or {}))
    state = DistillState(
        teacher=teacher, student=student, aux=aux, dist=dist, dec=dec, cfg=cfg,
        schedule_gen=schedule_gen or MaskSchedule("arccos"),
        schedule_aux=schedule_aux or MaskSchedule("arccos"),
        init=init or InitDistribution(vocab_size=teacher.cfg.vocab_size,
                                      seq_len=teacher.cfg.seq_len),
        div=div or DivergenceSpec(),
        weights=weights,
        rewards=rewards or RewardConfig(),
        relaxation=relaxation or RelaxationConfig(),
        disc_spec=disc_spec,
        rng=make_generator(cfg.seed),
    )
    state.opt_student = torch.optim.Adam(
        [p for p in student.parameters() if p.requires_grad],
        lr=cfg.lr, betas=cfg.betas)
    state.opt_aux = torch.optim.Adam(
        aux.parameters(), lr=cfg.aux_lr if cfg.aux_lr is not None else cfg.lr,
        betas=cfg.betas)
    if disc_spec is not None:
        state.disc = build_discriminator(teacher.cfg, disc_spec, cfg.seed + 7919)
        state.opt_disc = torch.optim.Adam(state.disc.parameters(),
                                          lr=cfg.disc_lr, betas=cfg.disc_betas)
    state.ema = {k: v.detach().clone() for k, v in student.state_dict().items()}
    return state


def attach_discriminator(state: DistillState, disc_spec: DiscriminatorSpec,
                         seed: int | None = None) -> DistillState:
    """Give an existing state a fresh discriminator and its optimizer."""
    state.disc_spec = disc_spec
    state.disc = build_discriminator(state.teacher.cfg, disc_spec,
                                     (seed if seed is not None else state.cfg.seed) + 7919)
    state.opt_disc = torch.optim.Adam(state.disc.parameters(),
                                      lr=state.cfg.disc_lr, betas=state.cfg.disc_betas)
    return state


def matching_surrogate_loss(state: DistillState, x_init: torch.Tensor, c,
                            rng: torch.Generator,
                            z_theta: torch.Tensor | None = None,
                            x_theta: torch.Tensor | None = None):
    """Distribution-matching surrogate applied to student logits.

    Pipeline: student logits at the initialization; a hard token sample from
    them (no gradient); re-corruption of that sample at a uniform time; the
    divergence between the guided teacher conditional and the auxiliary
    conditional at the corrupted state, summed over its masked positions; the
    gradient g of that divergence with respect to the auxiliary's logits.
    The returned surrogate is the inner product of stop-gradient(g) with the
    student's logits at matching positions, so its gradient with respect to
    student parameters is g times the logits Jacobian. Constant time
    weighting; batch-averaged.

    Returns (surrogate, diagnostics); diagnostics carry the sampled tokens so
    the auxiliary update can reuse them.
    """
    if z_theta is None:
        z_theta = state.student.logits(x_init, c)
    if x_theta is None:
        x_theta = sample_tokens(z_theta, state.cfg.sample_temperature, rng)
    t = rand((x_init.shape[0],), rng)
    x_t = forward_mask(x_theta, t, state.schedule_gen, state.teacher.cfg.mask_id, rng)
    masked = x_t == state.teacher.cfg.mask_id
    with torch.no_grad():
        z_phi = guided_logits(state.teacher, x_t, c, state.cfg.cfg_w)
        z_psi_val = state.aux.logits(x_t, c)
    z_psi = z_psi_val.detach().requires_grad_(True)
    per_pos = divergence(state.div, F.log_softmax(z_phi, dim=-1),
                         F.log_softmax(z_psi, dim=-1))
    div_total = (per_pos * masked.to(DTYPE)).sum(-1).mean()
    g = torch.autograd.grad(div_total, z_psi)[0]
    if not torch.isfinite(g).all():
        raise TrainingDiverged("non-finite divergence gradient in matching loss")
    surrogate = (g.detach() * z_theta).sum()
    diag = {
        "x_theta": x_theta,
        "div_value": float(div_total.detach()),
        "g_norm": float(g.norm()),
        "masked_frac": float(masked.to(DTYPE).mean()),
    }
    return surrogate, diag


def auxiliary_update(state: DistillState, x_theta: torch.Tensor, c,
                     rng: torch.Generator) -> float:
    """One denoising step for the auxiliary with student samples as data."""
    if (x_theta == state.aux.cfg.mask_id).any():
        raise ValueError("auxiliary update requires mask-free student samples")
    loss = mdm_loss(state.aux, x_theta.detach(), c, state.schedule_aux, rng)
    check_finite(loss.detach(), "auxiliary loss")
    state.opt_aux.zero_grad(set_to_none=True)
    loss.backward()
    if state.cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.aux.parameters(), state.cfg.grad_clip)
    state.opt_aux.step()
    return float(loss.detach())


def combined_generator_loss(state: DistillState, batch, rng: torch.Generator):
    """Weighted sum of matching, adversarial, and reward generator terms.

    Terms with zero weight are skipped entirely; the adversarial term is
    additionally gated by the onset step. One student forward is shared by
    all active terms. Raises if every weight is zero.
    """
    x_init, c = batch
    w = state.weights
    if all(w.get(k, 0.0) == 0.0 for k in ("distill", "gan", "reward")):
        raise ValueError("all generator loss weights are zero")
    z_theta = state.student.logits(x_init, c)
    x_theta = sample_tokens(z_theta, state.cfg.sample_temperature, rng)
    total = z_theta.new_zeros(())
    diag = {"x_theta": x_theta, "z_theta": z_theta.detach()}
    if w.get("distill", 0.0) != 0.0:
        surrogate, mdiag = matching_surrogate_loss(state, x_init, c, rng,
                                                   z_theta=z_theta, x_theta=x_theta)
        total = total + w["distill"] * surrogate
        diag["match_div"] = mdiag["div_value"]
        diag["match_g_norm"] = mdiag["g_norm"]
    if w.get("gan", 0.0) != 0.0 and state.disc is not None \
            and state.step >= state.cfg.gan_onset_steps:
        real = torch.empty_like(x_theta)
        for cls in torch.as_tensor(c).unique():
            rows = torch.as_tensor(c) == cls
            real[rows] = state.dist.sample(int(cls), int(rows.sum()), rng)
        _, g_loss, gdiag = gan_losses(
            state.disc, state.teacher, real, z_theta, c, rng,
            relaxation=state.relaxation, p_r=state.disc_spec.mask_range,
            feature_noise=state.disc_spec.feature_noise)
        total = total + w["gan"] * g_loss
        diag["g_loss"] = float(g_loss.detach())
        diag.update({k: v for k, v in gdiag.items() if k.startswith("fake")})
    if w.get("reward", 0.0) != 0.0:
        r_loss = reward_loss(state.dec, state.rewards, z_theta, c)
        total = total + w["reward"] * r_loss
        diag["reward_loss"] = float(r_loss.detach())
    check_finite(total.detach(), "generator loss")
    diag["total"] = float(total.detach())
    return total, diag


def _apply_warmup(opt: torch.optim.Optimizer, base_lr: float, step: int,
                  warmup: int, cfg: DistillConfig | None = None) -> None:
    lr = base_lr * min(1.0, step / max(1, warmup))
    if cfg is not None and cfg.lr_decay == "cosine" and step > warmup:
        frac = min(1.0, (step - warmup) / max(1, cfg.steps - warmup))
        floor = cfg.lr_min_ratio * base_lr
        lr = floor + (base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))
    for group in opt.param_groups:
        group["lr"] = lr


def distill_step(state: DistillState, batch, rng: torch.Generator) -> dict:
    """One full training iteration: generator, auxiliary, discriminator.

    Order per iteration: combined generator loss and student update (clipped,
    EMA shadow refreshed), auxiliary denoising update on the student tokens
    sampled in the same iteration, then a discriminator update on a fresh
    real batch versus the same student logits (detached). The persistent step
    counter gates the adversarial term's onset.
    """
    x_init, c = batch
    total, diag = combined_generator_loss(state, batch, rng)
    state.opt_student.zero_grad(set_to_none=True)
    if state.disc is not None:
        state.opt_disc.zero_grad(set_to_none=True)
    total.backward()
    if state.cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(
            [p for p in state.student.parameters() if p.requires_grad],
            state.cfg.grad_clip)
    _apply_warmup(state.opt_student, state.cfg.lr, state.step + 1,
                  state.cfg.warmup_steps, state.cfg)
    state.opt_student.step()
    with torch.no_grad():
        sd = state.student.state_dict()
        for k, shadow in state.ema.items():
            shadow.mul_(state.cfg.ema_ratio).add_(sd[k], alpha=1 - state.cfg.ema_ratio)
    if state.weights.get("distill", 0.0) != 0.0:
        diag["aux_loss"] = auxiliary_update(state, diag["x_theta"], c, rng)
        aux_lr = state.cfg.aux_lr if state.cfg.aux_lr is not None else state.cfg.lr
        _apply_warmup(state.opt_aux, aux_lr, state.step + 1,
                      state.cfg.warmup_steps, state.cfg)
    if state.gan_active():
        real = torch.empty_like(diag["x_theta"])
        for cls in torch.as_tensor(c).unique():
            rows = torch.as_tensor(c) == cls
            real[rows] = state.dist.sample(int(cls), int(rows.sum()), rng)
        d_loss, _, gdiag = gan_losses(
            state.disc, state.teacher, real, diag["z_theta"].detach(), c, rng,
            relaxation=state.relaxation, p_r=state.disc_spec.mask_range,
            feature_noise=state.disc_spec.feature_noise)
        check_finite(d_loss.detach(), "discriminator loss")
        state.opt_disc.zero_grad(set_to_none=True)
        d_loss.backward()
        _apply_warmup(state.opt_disc, state.cfg.disc_lr, state.step + 1,
                      state.cfg.warmup_steps)
        state.opt_disc.step()
        diag["d_loss"] = float(d_loss.detach())
        diag["disc_fake_logit_mean"] = gdiag["fake_logit_mean"]
        diag["disc_fake_logit_std"] = gdiag["fake_logit_std"]
    state.step += 1
    diag.pop("z_theta", None)
    diag.pop("x_theta", None)
    diag["step"] = state.step
    return diag


def run_distill(state: DistillState, steps: int, callback=None) -> list[dict]:
    """Drive ``distill_step`` for ``steps`` iterations on fresh batches.

    Classes are drawn uniformly; initializations from the state's init
    distribution. Returns one record per logging interval; the callback (if
    given) can append evaluation fields and runs on the live state.
    """
    records = []
    rng = state.rng
    for i in range(steps):
        c = randint(state.dist.spec.num_classes, (state.cfg.batch_size,), rng)
        x_init = draw_init(state.init, state.cfg.batch_size, rng)
        diag = distill_step(state, (x_init, c), rng)
        if (i + 1) % state.cfg.log_every == 0 or i == steps - 1:
            rec = {k: v for k, v in diag.items() if isinstance(v, (int, float))}
            if callback is not None:
                extra = callback(state)
                if extra:
                    rec.update(extra)
            records.append(rec)
    return records
