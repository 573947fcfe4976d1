"""Shared numerics and determinism helpers.

Everything in this package runs in float64 on CPU by default: the models are
tiny and the test suite leans on central finite differences at tight
tolerances, which float32 cannot support reliably.
"""
from __future__ import annotations

import hashlib
from typing import Iterable

import torch

DTYPE = torch.float64


class TrainingDiverged(RuntimeError):
    """Raised when a training loss or gradient becomes non-finite."""


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def spawn_generator(parent_seed: int, *salt: int | str) -> torch.Generator:
    """Derive an independent generator from a parent seed plus salt values.

    Used wherever a deterministic per-item stream is needed (e.g. one stream
    per optimization restart) so that consuming extra randomness in one item
    cannot shift the draws of another.
    """
    h = hashlib.sha256(repr((int(parent_seed),) + tuple(salt)).encode())
    child = int.from_bytes(h.digest()[:8], "little")
    return make_generator(child & 0x7FFF_FFFF_FFFF_FFFF)


def rand(shape, rng: torch.Generator, dtype=DTYPE) -> torch.Tensor:
    return torch.rand(shape, generator=rng, dtype=dtype)


def randn(shape, rng: torch.Generator, dtype=DTYPE) -> torch.Tensor:
    return torch.randn(shape, generator=rng, dtype=dtype)


def randint(high: int, shape, rng: torch.Generator) -> torch.Tensor:
    return torch.randint(high, shape, generator=rng)


def tensor_checksum(tensors: Iterable[torch.Tensor]) -> str:
    """SHA-256 over the exact bytes of a sequence of tensors.

    Bitwise: two parameter sets compare equal iff every float is identical.
    """
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    return tensor_checksum(p for _, p in sorted(module.state_dict().items()))


def check_finite(value: torch.Tensor, what: str) -> None:
    if not torch.isfinite(value).all():
        raise TrainingDiverged(f"non-finite {what}: {value}")
