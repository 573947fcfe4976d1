"""Class-conditional transformer over short token sequences.

One architecture serves every role in the pipeline: teacher denoiser, one-step
generator, auxiliary denoiser, and frozen feature extractor for the
discriminator. The vocabulary has ``vocab_size`` real tokens plus a mask token
with id ``vocab_size``; the logits head only ever scores real tokens. Class
conditioning uses an embedding table with one extra null row (id
``num_classes``) so classifier-free guidance has an unconditional branch.

Models can be run either from token ids or directly from embedding rows; the
token path is defined as embedding lookup followed by the embedding path, so
the two agree exactly and gradient-based ops can substitute soft embeddings
for lookups without changing semantics.
"""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .common import DTYPE

__all__ = [
    "ModelConfig",
    "SequenceModel",
    "build_model",
    "forward_logits",
    "forward_from_embeddings",
    "cfg_logits",
    "clone_model",
]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 4
    seq_len: int = 4
    num_classes: int = 2
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    @property
    def null_class_id(self) -> int:
        return self.num_classes

    def to_config_section(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_config_section(cls, section) -> "ModelConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in section:
                cast = float if f.name == "dropout" else int
                kwargs[f.name] = cast(section[f.name])
        return cls(**kwargs)


class _Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, h):
        b, l, d = h.shape
        dh = d // self.n_heads
        q, k, v = self.qkv(self.ln1(h)).chunk(3, dim=-1)
        q = q.view(b, l, self.n_heads, dh).transpose(1, 2)
        k = k.view(b, l, self.n_heads, dh).transpose(1, 2)
        v = v.view(b, l, self.n_heads, dh).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-2, -1) / dh ** 0.5, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, l, d)
        h = h + self.drop(self.proj(out))
        h = h + self.drop(self.mlp(self.ln2(h)))
        return h


class SequenceModel(nn.Module):
    """Bidirectional encoder producing per-position logits over real tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.frozen = False
        self.tok_emb = nn.Embedding(cfg.vocab_size + 1, cfg.d_model)
        self.pos_emb = nn.Parameter(0.02 * torch.randn(cfg.seq_len, cfg.d_model))
        self.cls_emb = nn.Embedding(cfg.num_classes + 1, cfg.d_model)
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size)

    @property
    def embedding_table(self) -> torch.Tensor:
        """(vocab_size + 1, d_model); the last row embeds the mask token."""
        return self.tok_emb.weight

    def _class_rows(self, c, batch: int) -> torch.Tensor:
        c = torch.as_tensor(c, dtype=torch.long)
        if c.dim() == 0:
            c = c.expand(batch)
        if c.shape != (batch,):
            raise ValueError(f"class labels shaped {tuple(c.shape)}, expected ({batch},)")
        if c.min() < 0 or c.max() > self.cfg.num_classes:
            raise ValueError("class id out of range (null id is num_classes)")
        return self.cls_emb(c)

    def logits_from_embeddings(self, emb: torch.Tensor, c, return_hidden: bool = False):
        """Run the trunk on embedding rows (B, L, d).

        Returns (B, L, vocab_size) logits, and with ``return_hidden`` also the
        list of per-block activations (for discriminator feature taps).
        """
        if emb.dim() != 3 or emb.shape[1] != self.cfg.seq_len or emb.shape[2] != self.cfg.d_model:
            raise ValueError(f"embeddings shaped {tuple(emb.shape)}, expected "
                             f"(B, {self.cfg.seq_len}, {self.cfg.d_model})")
        h = emb + self.pos_emb + self._class_rows(c, emb.shape[0])[:, None, :]
        hidden = []
        for block in self.blocks:
            h = block(h)
            hidden.append(h)
        logits = self.head(self.ln_f(h))
        if return_hidden:
            return logits, hidden
        return logits

    def logits(self, x: torch.Tensor, c, return_hidden: bool = False):
        """Run the trunk on token ids (B, L); mask id is a legal input token."""
        if x.dim() != 2 or x.shape[1] != self.cfg.seq_len:
            raise ValueError(f"tokens shaped {tuple(x.shape)}, expected (B, {self.cfg.seq_len})")
        if x.min() < 0 or x.max() > self.cfg.vocab_size:
            raise ValueError("token id out of range (mask id is vocab_size)")
        return self.logits_from_embeddings(self.tok_emb(x), c, return_hidden)

    def freeze(self) -> "SequenceModel":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        self.eval()
        return self

    def trainable_parameters(self):
        if self.frozen:
            raise ValueError("model is frozen; it cannot receive parameter updates")
        return [p for p in self.parameters() if p.requires_grad]


def build_model(cfg: ModelConfig, seed: int) -> SequenceModel:
    """Deterministically initialize a model (same cfg and seed, same bits)."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = SequenceModel(cfg)
    return model.to(DTYPE)


def forward_logits(model: SequenceModel, x: torch.Tensor, c, return_hidden: bool = False):
    return model.logits(x, c, return_hidden)


def forward_from_embeddings(model: SequenceModel, emb: torch.Tensor, c,
                            return_hidden: bool = False):
    return model.logits_from_embeddings(emb, c, return_hidden)


def cfg_logits(cond: torch.Tensor, uncond: torch.Tensor, w: float) -> torch.Tensor:
    """Classifier-free guidance combination ``(1 + w) * cond - w * uncond``.

    ``w = 0`` returns the conditional logits unchanged.
    """
    if cond.shape != uncond.shape:
        raise ValueError("conditional and unconditional logits must share a shape")
    if w == 0.0:
        return cond
    return (1.0 + w) * cond - w * uncond


def guided_logits(model: SequenceModel, x: torch.Tensor, c, w: float) -> torch.Tensor:
    """Logits under guidance weight ``w``; skips the null pass when ``w`` is 0."""
    cond = model.logits(x, c)
    if w == 0.0:
        return cond
    uncond = model.logits(x, model.cfg.null_class_id)
    return cfg_logits(cond, uncond, w)


def clone_model(model: SequenceModel, freeze: bool = False) -> SequenceModel:
    """Independent deep copy; optionally frozen. Copies are unfrozen by default."""
    out = copy.deepcopy(model)
    out.frozen = False
    for p in out.parameters():
        p.requires_grad_(True)
    if freeze:
        out.freeze()
    return out
