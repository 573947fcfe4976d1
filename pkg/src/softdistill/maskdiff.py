"""Masked discrete diffusion: corruption schedules, loss, and samplers.

The forward process replaces tokens with the mask id independently per
position, with probability given by a monotone schedule r(t) on [0, 1]. The
denoiser is trained with cross-entropy on masked positions only, summed over
positions and averaged over the batch. The reverse sampler starts fully
masked and unmasks positions over S steps in confidence order, following the
masked-count trajectory implied by the schedule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .common import DTYPE, TrainingDiverged, check_finite, make_generator, rand, randint
from .models import SequenceModel, guided_logits

__all__ = [
    "MaskSchedule",
    "get_schedule",
    "forward_mask",
    "masked_nll",
    "mdm_loss",
    "reverse_sample",
    "TeacherTrainConfig",
    "teacher_train",
]


@dataclass(frozen=True)
class MaskSchedule:
    """Named map from diffusion time t in [0, 1] to mask ratio r in [0, 1].

    Kinds ``linear``, ``cosine`` and ``arccos`` are functions of t with
    r(0) = 0 and r(1) = 1. Kind ``uniform_range`` is not a function of t but a
    sampler drawing ratios uniformly from [low, high]; it is what the
    discriminator's masking augmentation uses.
    """

    kind: str = "arccos"
    low: float = 0.0
    high: float = 0.95

    def __post_init__(self):
        if self.kind not in ("linear", "cosine", "arccos", "uniform_range"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "uniform_range" and not 0.0 <= self.low <= self.high <= 1.0:
            raise ValueError("uniform_range needs 0 <= low <= high <= 1")

    def ratio(self, t):
        """Mask ratio at time t (tensor or float); t is clamped to [0, 1]."""
        if self.kind == "uniform_range":
            raise ValueError("uniform_range has no deterministic t->ratio map")
        t = torch.as_tensor(t, dtype=DTYPE).clamp(0.0, 1.0)
        if self.kind == "linear":
            return t
        if self.kind == "cosine":
            return 1.0 - torch.cos(math.pi * t / 2.0)
        return torch.arccos(1.0 - t) * 2.0 / math.pi

    def draw(self, n: int, rng: torch.Generator) -> torch.Tensor:
        """Draw n mask ratios: r(U[0,1]) for function kinds, U[low,high] otherwise."""
        u = rand((n,), rng)
        if self.kind == "uniform_range":
            return self.low + (self.high - self.low) * u
        return self.ratio(u)


def get_schedule(name: str, low: float = 0.0, high: float = 0.95) -> MaskSchedule:
    return MaskSchedule(name, low, high)


def forward_mask(x0: torch.Tensor, t, schedule: MaskSchedule, mask_id: int,
                 rng: torch.Generator) -> torch.Tensor:
    """Corrupt clean tokens: each position masks independently with prob r(t).

    ``x0`` is (B, L) long and must contain no mask ids; ``t`` is a scalar or a
    (B,) tensor of times, converted through the schedule.
    """
    if (x0 == mask_id).any():
        raise ValueError("forward_mask expects clean sequences without mask ids")
    r = schedule.ratio(t)
    if r.dim() == 0:
        r = r.expand(x0.shape[0])
    u = rand(x0.shape, rng)
    hit = u < r[:, None]
    return torch.where(hit, torch.full_like(x0, mask_id), x0)


def masked_nll(logits: torch.Tensor, x0: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
    """Per-sequence sum of -log softmax(logits)[x0] over masked positions.

    The low-level kernel of the denoising loss, exposed separately so tests
    can feed hand-set logits and fixed corruption patterns.
    """
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, x0[..., None]).squeeze(-1)
    return (nll * masked.to(nll.dtype)).sum(-1)


def mdm_loss(model: SequenceModel, x0: torch.Tensor, c, schedule: MaskSchedule,
             rng: torch.Generator, t: torch.Tensor | None = None) -> torch.Tensor:
    """Masked-denoising cross-entropy.

    Draws one t per batch element (unless given), corrupts, and scores the
    model's per-position conditionals at masked positions only: the loss is
    the sum over masked positions of -log p(x0_i | x_t, c), averaged over the
    batch. Unmasked positions contribute nothing. Time weighting is constant.
    """
    mask_id = model.cfg.mask_id
    if t is None:
        t = rand((x0.shape[0],), rng)
    x_t = forward_mask(x0, t, schedule, mask_id, rng)
    logits = model.logits(x_t, c)
    return masked_nll(logits, x0, x_t == mask_id).mean()


def _masked_count_trajectory(seq_len: int, steps: int, schedule: MaskSchedule) -> list[int]:
    # target number of still-masked positions after each step
    return [int(torch.round(schedule.ratio((steps - s) / steps) * seq_len).item())
            for s in range(1, steps + 1)]


def reverse_sample(model: SequenceModel, c, steps: int, schedule: MaskSchedule,
                   rng: torch.Generator, n: int = 1, cfg_w: float = 0.0,
                   temperature: float = 1.0, order: str = "confidence") -> torch.Tensor:
    """Iterative ancestral decoding from the fully-masked state.

    After step s of S the number of masked positions equals
    round(L * r((S - s) / S)). With ``order="confidence"`` the newly revealed
    positions are chosen among the currently masked ones in decreasing order
    of the sampled token's probability, ties broken by position index; with
    ``order="random"`` they are chosen uniformly. Once revealed a position
    never changes. ``steps`` larger than the sequence length is clamped to
    it. ``temperature`` 0 means greedy argmax (confidence then read from the
    untempered distribution).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if order not in ("confidence", "random"):
        raise ValueError(f"unknown unmask order {order!r}")
    L = model.cfg.seq_len
    steps = min(steps, L)
    x = torch.full((n, L), model.cfg.mask_id, dtype=torch.long)
    with torch.no_grad():
        for target in _masked_count_trajectory(L, steps, schedule):
            masked = x == model.cfg.mask_id
            cur = int(masked[0].sum().item())
            k = cur - target
            if k <= 0:
                continue
            logits = guided_logits(model, x, c, cfg_w)
            if temperature == 0.0:
                cand = logits.argmax(-1)
                conf = torch.softmax(logits, dim=-1)
            else:
                probs = torch.softmax(logits / temperature, dim=-1)
                flat = probs.reshape(-1, probs.shape[-1])
                cand = torch.multinomial(flat, 1, generator=rng).reshape(n, L)
                conf = probs
            if order == "random":
                score = rand((n, L), rng)
            else:
                score = conf.gather(-1, cand[..., None]).squeeze(-1)
            score = torch.where(masked, score, torch.full_like(score, -math.inf))
            rank = torch.argsort(-score, dim=1, stable=True)
            reveal = rank[:, :k]
            x = x.scatter(1, reveal, cand.gather(1, reveal))
    return x


@dataclass
class TeacherTrainConfig:
    steps: int = 5000
    batch_size: int = 256
    lr: float = 1e-3
    warmup_steps: int = 100
    grad_clip: float = 1.0
    betas: tuple = (0.9, 0.999)
    class_dropout: float = 0.1
    lr_decay: str = "cosine"
    schedule: MaskSchedule = field(default_factory=lambda: MaskSchedule("arccos"))
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")


def teacher_train(model: SequenceModel, dist, cfg: TeacherTrainConfig,
                  callback=None, resume: dict | None = None) -> tuple[list[dict], dict]:
    """Fit a denoiser to a toy world by masked-denoising cross-entropy.

    Classes are drawn uniformly per element and dropped to the null id with
    probability ``class_dropout`` so guidance is meaningful at sampling time.
    Linear warmup then (by default) cosine decay; gradients clipped in norm;
    aborts on non-finite loss. Returns (records, trainer state); passing the
    trainer state back as ``resume`` continues the run with bit-identical
    optimizer moments and random draws.
    """
    if model.frozen:
        raise ValueError("cannot train a frozen model")
    rng = make_generator(cfg.seed)
    opt = torch.optim.Adam(model.trainable_parameters(), lr=cfg.lr, betas=cfg.betas)
    start_step = 0
    if resume is not None:
        opt.load_state_dict(resume["optimizer"])
        rng.set_state(resume["rng_state"])
        start_step = resume["step"]
    records = []
    model.train()
    for step in range(start_step + 1, cfg.steps + 1):
        c = randint(dist.spec.num_classes, (cfg.batch_size,), rng)
        x0 = torch.empty(cfg.batch_size, dist.spec.seq_len, dtype=torch.long)
        for cls in c.unique():
            rows = c == cls
            x0[rows] = dist.sample(int(cls), int(rows.sum()), rng)
        drop = rand((cfg.batch_size,), rng) < cfg.class_dropout
        c_in = torch.where(drop, torch.full_like(c, model.cfg.null_class_id), c)
        loss = mdm_loss(model, x0, c_in, cfg.schedule, rng)
        check_finite(loss.detach(), "teacher loss")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        lr = cfg.lr * min(1.0, step / max(1, cfg.warmup_steps))
        if cfg.lr_decay == "cosine" and step > cfg.warmup_steps:
            frac = (step - cfg.warmup_steps) / max(1, cfg.steps - cfg.warmup_steps)
            lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
        for group in opt.param_groups:
            group["lr"] = lr
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.steps:
            rec = {"step": step, "loss": float(loss.item())}
            if callback is not None:
                extra = callback(model, step)
                if extra:
                    rec.update(extra)
            records.append(rec)
    model.eval()
    state = {"step": cfg.steps if cfg.steps > start_step else start_step,
             "optimizer": opt.state_dict(), "rng_state": rng.get_state()}
    return records, state
