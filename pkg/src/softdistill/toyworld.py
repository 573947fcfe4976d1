"""Synthetic discrete worlds with enumerable ground truth.

A world is a class-conditional mixture over token sequences: each class owns a
few anchor patterns, and a sample is an anchor with independent per-position
corruption (with probability ``eps`` the token is redrawn uniformly over the
whole vocabulary). Everything about the distribution is available in closed
form, which is what makes brute-force verification of the training pipeline
possible downstream.

Alongside the distribution we build a frozen linear "tokenizer decoder": a
per-position affine map from decoder embeddings to a small continuous signal
space. Rewards are defined on that signal, so reward gradients can flow
through soft embeddings into generator logits.
"""
from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass

import torch

from .common import DTYPE, randint, randn, spawn_generator

__all__ = [
    "ToyWorldSpec",
    "GroundTruthDistribution",
    "DecoderSpec",
    "build_toyworld",
    "sample_data",
    "decode",
    "toy_reward",
    "export_table",
    "REWARD_NAMES",
]

REWARD_NAMES = ("target_affinity", "smoothness")

# Hard cap on joint enumeration at micro scale; the default micro world is
# 4^4 = 256 states and anything above this cap would defeat the point of
# having an exactly enumerable reference.
_MICRO_MAX_STATES = 4096


@dataclass(frozen=True)
class ToyWorldSpec:
    """Fully determines a world: sizes, corruption level, decoder seed."""

    scale: str = "micro"
    seq_len: int = 4
    vocab_size: int = 4
    num_classes: int = 2
    patterns_per_class: int = 2
    eps: float = 0.05
    seed: int = 0
    decoder_dim: int = 8
    signal_dim: int = 3

    def __post_init__(self):
        if self.scale not in ("micro", "small"):
            raise ValueError(f"unknown scale {self.scale!r}")
        for name in ("seq_len", "vocab_size", "num_classes", "patterns_per_class",
                     "decoder_dim", "signal_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.eps < 1.0 / self.vocab_size:
            raise ValueError(
                f"eps must lie in [0, 1/vocab_size); got eps={self.eps} with "
                f"vocab_size={self.vocab_size}")
        if self.scale == "micro" and self.vocab_size ** self.seq_len > _MICRO_MAX_STATES:
            raise ValueError(
                f"micro scale requires vocab_size**seq_len <= {_MICRO_MAX_STATES} "
                f"for exact enumeration; got {self.vocab_size ** self.seq_len}")
        if self.num_classes * self.patterns_per_class > self.vocab_size ** self.seq_len:
            raise ValueError("more anchor patterns requested than distinct sequences exist")

    @property
    def num_states(self) -> int:
        return self.vocab_size ** self.seq_len

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    @classmethod
    def micro(cls, **overrides) -> "ToyWorldSpec":
        return cls(**{"scale": "micro", **overrides})

    @classmethod
    def small(cls, **overrides) -> "ToyWorldSpec":
        base = dict(scale="small", seq_len=16, vocab_size=16, num_classes=4,
                    patterns_per_class=2, eps=0.05)
        base.update(overrides)
        return cls(**base)

    def to_config_section(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_config_section(cls, section) -> "ToyWorldSpec":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in section:
                continue
            raw = section[f.name]
            if f.type in ("int", int):
                kwargs[f.name] = int(raw)
            elif f.type in ("float", float):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = str(raw)
        return cls(**kwargs)


class GroundTruthDistribution:
    """Closed-form access to the world's class-conditional law.

    At micro scale the full joint table over ``vocab_size**seq_len`` states is
    precomputed per class; at small scale only samplers, log-probs and
    low-order marginals are offered (the joint is too large to enumerate).

    Sequence ids are big-endian: position 0 is the most significant digit,
    ``id = sum_i x_i * vocab_size**(seq_len-1-i)``.
    """

    def __init__(self, spec: ToyWorldSpec, patterns: torch.Tensor):
        self.spec = spec
        self.patterns = patterns  # (C, K, L) long
        self._tables = None
        if spec.scale == "micro":
            self._tables = torch.stack(
                [self._build_table(c) for c in range(spec.num_classes)])

    # per-position corruption kernel: row p -> distribution over tokens
    def _q_row(self, pattern_row: torch.Tensor) -> torch.Tensor:
        spec = self.spec
        q = torch.full((spec.seq_len, spec.vocab_size), spec.eps / spec.vocab_size,
                       dtype=DTYPE)
        keep = 1.0 - spec.eps + spec.eps / spec.vocab_size
        q[torch.arange(spec.seq_len), pattern_row] = keep
        return q

    def _build_table(self, c: int) -> torch.Tensor:
        spec = self.spec
        table = torch.zeros(spec.num_states, dtype=DTYPE)
        for k in range(spec.patterns_per_class):
            q = self._q_row(self.patterns[c, k])
            joint = q[0]
            for i in range(1, spec.seq_len):
                joint = joint[..., None] * q[i]
            table += joint.reshape(-1)
        table /= spec.patterns_per_class
        # analytic mass is exactly 1; renormalize to squeeze out float error
        table /= table.sum()
        return table

    def _check_class(self, c: int) -> None:
        if not 0 <= c < self.spec.num_classes:
            raise ValueError(f"class {c} out of range [0, {self.spec.num_classes})")

    def table(self, c: int) -> torch.Tensor:
        """Exact joint over sequence ids for class ``c`` (micro scale only)."""
        self._check_class(c)
        if self._tables is None:
            raise ValueError("joint table only available at micro scale")
        return self._tables[c]

    def sample(self, c: int, n: int, rng: torch.Generator) -> torch.Tensor:
        self._check_class(c)
        spec = self.spec
        k = randint(spec.patterns_per_class, (n,), rng)
        x = self.patterns[c][k].clone()
        corrupt = torch.rand((n, spec.seq_len), generator=rng, dtype=DTYPE) < spec.eps
        redraw = randint(spec.vocab_size, (n, spec.seq_len), rng)
        return torch.where(corrupt, redraw, x)

    def log_prob(self, x: torch.Tensor, c: int) -> torch.Tensor:
        """Exact log-probability of token rows ``x`` (..., L) under class ``c``."""
        self._check_class(c)
        spec = self.spec
        comp = []
        for k in range(spec.patterns_per_class):
            q = self._q_row(self.patterns[c, k])  # (L, V)
            lq = torch.log(q)
            comp.append(lq.gather(1, x.reshape(-1, spec.seq_len).T.contiguous()).T.sum(-1))
        lp = torch.logsumexp(torch.stack(comp, dim=-1), dim=-1) - torch.log(
            torch.tensor(float(spec.patterns_per_class), dtype=DTYPE))
        return lp.reshape(x.shape[:-1])

    def position_marginals(self, c: int) -> torch.Tensor:
        """(L, V) per-position token marginals for class ``c``; rows sum to 1."""
        self._check_class(c)
        qs = torch.stack([self._q_row(self.patterns[c, k])
                          for k in range(self.spec.patterns_per_class)])
        return qs.mean(0)

    def pairwise_marginal(self, c: int, i: int, j: int) -> torch.Tensor:
        """(V, V) joint marginal of positions ``i`` and ``j`` for class ``c``."""
        self._check_class(c)
        spec = self.spec
        for pos in (i, j):
            if not 0 <= pos < spec.seq_len:
                raise ValueError(f"position {pos} out of range")
        out = torch.zeros(spec.vocab_size, spec.vocab_size, dtype=DTYPE)
        for k in range(spec.patterns_per_class):
            q = self._q_row(self.patterns[c, k])
            out += torch.outer(q[i], q[j])
        return out / spec.patterns_per_class

    def sequence_ids(self, x: torch.Tensor) -> torch.Tensor:
        spec = self.spec
        weights = spec.vocab_size ** torch.arange(spec.seq_len - 1, -1, -1)
        return (x * weights).sum(-1)

    def id_to_sequence(self, ids: torch.Tensor) -> torch.Tensor:
        spec = self.spec
        ids = torch.as_tensor(ids)
        digits = []
        rest = ids.clone()
        for i in range(spec.seq_len - 1, -1, -1):
            digits.append(rest % spec.vocab_size)
            rest = rest // spec.vocab_size
        return torch.stack(digits[::-1], dim=-1)


@dataclass(frozen=True)
class DecoderSpec:
    """Frozen per-position linear decoder from embeddings to a signal grid.

    ``embed_table`` has ``vocab_size + 1`` rows; the last row is the mask
    token. ``class_targets[c]`` is the decoded signal of class ``c``'s first
    anchor pattern and anchors the target-affinity reward.
    """

    embed_table: torch.Tensor  # (V+1, d_dec)
    weight: torch.Tensor       # (L, d_dec, m)
    bias: torch.Tensor         # (L, m)
    class_targets: torch.Tensor  # (C, L, m)

    @property
    def embed_dim(self) -> int:
        return self.embed_table.shape[1]

    @property
    def signal_dim(self) -> int:
        return self.weight.shape[2]

    def token_embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.embed_table[x]


def build_toyworld(spec: ToyWorldSpec) -> tuple[GroundTruthDistribution, DecoderSpec]:
    """Construct the world deterministically from ``spec`` (bit-stable in seed)."""
    prng = spawn_generator(spec.seed, "patterns")
    seen: set[tuple] = set()
    rows = []
    # rejection-sample globally distinct anchor patterns
    while len(rows) < spec.num_classes * spec.patterns_per_class:
        cand = tuple(randint(spec.vocab_size, (spec.seq_len,), prng).tolist())
        if cand in seen:
            continue
        seen.add(cand)
        rows.append(cand)
    patterns = torch.tensor(rows, dtype=torch.long).reshape(
        spec.num_classes, spec.patterns_per_class, spec.seq_len)
    dist = GroundTruthDistribution(spec, patterns)

    drng = spawn_generator(spec.seed, "decoder")
    embed_table = randn((spec.vocab_size + 1, spec.decoder_dim), drng)
    weight = randn((spec.seq_len, spec.decoder_dim, spec.signal_dim), drng) / spec.decoder_dim ** 0.5
    bias = 0.1 * randn((spec.seq_len, spec.signal_dim), drng)
    anchor_emb = embed_table[patterns[:, 0]]  # (C, L, d_dec)
    targets = torch.einsum("cld,ldm->clm", anchor_emb, weight) + bias
    dec = DecoderSpec(embed_table, weight, bias, targets)
    return dist, dec


def sample_data(dist: GroundTruthDistribution, c: int, n: int,
                rng: torch.Generator) -> torch.Tensor:
    """Draw ``n`` clean sequences of class ``c``; shape (n, L), dtype long."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return dist.sample(c, n, rng)


def decode(dec: DecoderSpec, emb: torch.Tensor) -> torch.Tensor:
    """Apply the frozen linear decoder to embedding rows.

    ``emb`` is (..., L, d_dec); returns (..., L, m). Differentiable in ``emb``.
    """
    if emb.shape[-1] != dec.embed_dim:
        raise ValueError(
            f"embedding width {emb.shape[-1]} != decoder width {dec.embed_dim}")
    if emb.shape[-2] != dec.weight.shape[0]:
        raise ValueError(
            f"sequence length {emb.shape[-2]} != decoder length {dec.weight.shape[0]}")
    return torch.einsum("...ld,ldm->...lm", emb, dec.weight) + dec.bias


def toy_reward(name: str, signal: torch.Tensor, c, dec: DecoderSpec) -> torch.Tensor:
    """Differentiable reward of a decoded signal grid.

    ``signal`` is (..., L, m); ``c`` is an int or a (...,) long tensor of class
    labels. Returns (...,). ``target_affinity`` is the negative mean squared
    distance to the class target; ``smoothness`` is the negative mean squared
    difference of adjacent positions. Both are bounded above by 0.
    """
    if name == "target_affinity":
        c = torch.as_tensor(c)
        target = dec.class_targets[c]
        return -((signal - target) ** 2).mean(dim=(-1, -2))
    if name == "smoothness":
        diff = signal[..., 1:, :] - signal[..., :-1, :]
        return -(diff ** 2).mean(dim=(-1, -2))
    raise ValueError(f"unknown reward {name!r}; known: {REWARD_NAMES}")


def export_table(dist: GroundTruthDistribution) -> str:
    """Render the exact joint as tabular text: sequence_id, class, probability."""
    buf = io.StringIO()
    buf.write("sequence_id\tclass\tprobability\n")
    for c in range(dist.spec.num_classes):
        table = dist.table(c)
        for sid in range(dist.spec.num_states):
            buf.write(f"{sid}\t{c}\t{table[sid].item():.17g}\n")
    return buf.getvalue()
