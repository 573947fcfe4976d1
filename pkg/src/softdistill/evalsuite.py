"""Oracles and metrics for enumerable worlds.

Two exact distribution computations anchor everything:

* ``student_distribution`` in exact mode: a one-step generator's output
  factorizes per position given its initialization, so its distribution is an
  average of per-position product measures over initializations (sampled, or
  fully enumerated when the initialization space is small).

* ``sampler_distribution_exact``: the iterative reverse sampler visits only
  partially-masked states; at micro scale the full state graph is small
  enough to propagate probabilities through it exactly, including the
  confidence-ordered unmasking rule. This replaces Monte Carlo estimates of
  the teacher's multi-step distribution with a deterministic table.

Total variation distance over these tables is the package's fidelity metric;
support statistics diagnose mode collapse; ``grad_check`` is the shared
central-finite-difference harness.
"""
from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field

import torch

from .common import DTYPE
from .maskdiff import MaskSchedule, _masked_count_trajectory
from .models import SequenceModel, guided_logits

__all__ = [
    "DistributionEstimate",
    "student_distribution",
    "sampler_distribution_exact",
    "tv_distance",
    "kl_divergence",
    "support_diversity",
    "empirical_distribution",
    "empirical_position_marginals",
    "position_marginal_kl",
    "expected_reward_exact",
    "grad_check",
]


@dataclass
class DistributionEstimate:
    """A distribution over sequence ids with provenance.

    ``kind`` is ``exact_enumeration`` or ``monte_carlo``; ``n`` counts the
    averaged initializations (exact) or drawn samples (MC).
    """

    kind: str
    table: torch.Tensor
    n: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("exact_enumeration", "monte_carlo"):
            raise ValueError(f"unknown estimate kind {self.kind!r}")


def _product_tables(probs: torch.Tensor) -> torch.Tensor:
    """(B, L, V) per-position distributions -> (B, V^L) product joints.

    Sequence-id order is big-endian: position 0 is the most significant digit.
    """
    b, seq_len, v = probs.shape
    joint = probs[:, 0]
    for i in range(1, seq_len):
        joint = (joint[:, :, None] * probs[:, i][:, None, :]).reshape(b, -1)
    return joint


def enumerate_inits(init_dist) -> torch.Tensor:
    """All equally-likely initializations of an InitDistribution, as rows.

    The count is C(L, k) * V^(L-k) for k masked positions; capped so the
    enumeration stays micro-sized.
    """
    L, V = init_dist.seq_len, init_dist.vocab_size
    k = init_dist.n_masked
    total = math.comb(L, k) * V ** (L - k)
    if total > 4096:
        raise ValueError(f"{total} distinct initializations; too many to enumerate")
    mask_id = V
    rows = []
    for pos in itertools.combinations(range(L), k):
        free = [i for i in range(L) if i not in pos]
        for fill in itertools.product(range(V), repeat=len(free)):
            row = [mask_id] * L
            for i, tok in zip(free, fill):
                row[i] = tok
            rows.append(row)
    return torch.tensor(rows, dtype=torch.long)


def student_distribution(student: SequenceModel, c: int, init_dist,
                         mode: str = "exact", m_inits: int = 256,
                         rng: torch.Generator | None = None,
                         temperature: float = 1.0,
                         n_samples: int = 100_000,
                         enumerate_init_space: bool = False) -> DistributionEstimate:
    """Distribution of one-step generations for class ``c``.

    Exact mode averages the per-position product measure over
    initializations: ``m_inits`` draws by default, or every possible
    initialization when ``enumerate_init_space`` is set (then the result has
    no sampling error at all). MC mode counts sampled sequences.
    """
    from .distill import draw_init  # local import to avoid a cycle

    spec_states = student.cfg.vocab_size ** student.cfg.seq_len
    if spec_states > 65536:
        raise ValueError("exact enumeration infeasible at this scale")
    if mode not in ("exact", "mc"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "mc":
        if rng is None:
            raise ValueError("mc mode needs an rng")
        from .softembed import sample_tokens
        xs = []
        bs = 4096
        done = 0
        with torch.no_grad():
            while done < n_samples:
                b = min(bs, n_samples - done)
                x_init = draw_init(init_dist, b, rng)
                z = student.logits(x_init, c)
                if temperature == 0.0:
                    xs.append(z.argmax(-1))
                else:
                    xs.append(sample_tokens(z / temperature, 1.0, rng))
                done += b
        x = torch.cat(xs)
        return empirical_distribution(x, student.cfg.vocab_size,
                                      meta={"class": c, "mode": "mc"})
    if enumerate_init_space:
        inits = enumerate_inits(init_dist)
    else:
        if rng is None:
            raise ValueError("exact mode with sampled inits needs an rng")
        inits = draw_init(init_dist, m_inits, rng)
    with torch.no_grad():
        z = student.logits(inits, c)
        if temperature == 0.0:
            probs = torch.nn.functional.one_hot(
                z.argmax(-1), student.cfg.vocab_size).to(DTYPE)
        else:
            probs = torch.softmax(z / temperature, dim=-1)
        table = _product_tables(probs).mean(0)
    table = table / table.sum()
    return DistributionEstimate("exact_enumeration", table, inits.shape[0],
                                {"class": c, "enumerated_inits": enumerate_init_space})


def sampler_distribution_exact(model: SequenceModel, c: int, steps: int,
                               schedule: MaskSchedule, cfg_w: float = 0.0,
                               temperature: float = 1.0,
                               order: str = "confidence") -> DistributionEstimate:
    """Exact output law of the iterative reverse sampler.

    Propagates probability through the graph of partially-masked states,
    enumerating the joint token draw at each state and applying the same
    reveal rule as the sampler (count trajectory from the schedule; with
    ``order="confidence"`` top sampled-token probability first, ties to lower
    position; with ``order="random"`` a uniformly chosen subset). Exponential
    in the masked count per state, so restricted to micro worlds.
    """
    L, V = model.cfg.seq_len, model.cfg.vocab_size
    if V ** L > 4096:
        raise ValueError("exact sampler enumeration only at micro scale")
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if order not in ("confidence", "random"):
        raise ValueError(f"unknown unmask order {order!r}")
    mask_id = model.cfg.mask_id
    steps = min(max(steps, 1), L)
    states = {tuple([mask_id] * L): 1.0}
    with torch.no_grad():
        for target in _masked_count_trajectory(L, steps, schedule):
            batch = [s for s in states
                     if sum(tok == mask_id for tok in s) > target]
            if not batch:
                continue
            x = torch.tensor(batch, dtype=torch.long)
            logits = guided_logits(model, x, c, cfg_w)
            conf_all = torch.softmax(logits, dim=-1)
            if temperature == 0.0:
                samp_all = None
            else:
                samp_all = torch.softmax(logits / temperature, dim=-1)
            nxt: dict[tuple, float] = defaultdict(float)
            for s, p_state in states.items():
                masked_pos = [i for i, tok in enumerate(s) if tok == mask_id]
                k = len(masked_pos)
                if k <= target:
                    nxt[s] += p_state
                    continue
                idx = batch.index(s)
                reveal = k - target
                conf = conf_all[idx]
                samp = conf if samp_all is None else samp_all[idx]
                if order == "random":
                    subsets = list(itertools.combinations(masked_pos, reveal))
                    w_sub = p_state / len(subsets)
                    for chosen in subsets:
                        if temperature == 0.0:
                            out = list(s)
                            for pos in chosen:
                                out[pos] = int(samp[pos].argmax())
                            nxt[tuple(out)] += w_sub
                            continue
                        for vals in itertools.product(range(V), repeat=reveal):
                            w = w_sub
                            for pos, tok in zip(chosen, vals):
                                w *= float(samp[pos, tok])
                            if w == 0.0:
                                continue
                            out = list(s)
                            for pos, tok in zip(chosen, vals):
                                out[pos] = tok
                            nxt[tuple(out)] += w
                    continue
                if temperature == 0.0:
                    draws = [tuple(int(samp[i].argmax()) for i in masked_pos)]
                    weights = [1.0]
                else:
                    draws = list(itertools.product(range(V), repeat=k))
                    weights = None
                for combo in draws:
                    if weights is None:
                        w = 1.0
                        for pos, tok in zip(masked_pos, combo):
                            w *= float(samp[pos, tok])
                        if w == 0.0:
                            continue
                    else:
                        w = weights[0]
                    scored = sorted(
                        ((-float(conf[pos, tok]), pos, tok)
                         for pos, tok in zip(masked_pos, combo)))
                    out = list(s)
                    for _, pos, tok in scored[:reveal]:
                        out[pos] = tok
                    nxt[tuple(out)] += p_state * w
            states = dict(nxt)
    table = torch.zeros(V ** L, dtype=DTYPE)
    weights_pow = [V ** (L - 1 - i) for i in range(L)]
    for s, p in states.items():
        if mask_id in s:
            raise RuntimeError("sampler enumeration left masked state")
        table[sum(t * w for t, w in zip(s, weights_pow))] += p
    table = table / table.sum()
    return DistributionEstimate("exact_enumeration", table, len(states),
                                {"class": c, "steps": steps, "cfg_w": cfg_w,
                                 "order": order})


def empirical_distribution(x: torch.Tensor, vocab_size: int,
                           meta: dict | None = None) -> DistributionEstimate:
    """Sequence-id histogram of sampled rows as a normalized MC estimate."""
    L = x.shape[-1]
    weights = vocab_size ** torch.arange(L - 1, -1, -1)
    ids = (x * weights).sum(-1)
    table = torch.bincount(ids, minlength=vocab_size ** L).to(DTYPE)
    table = table / table.sum()
    return DistributionEstimate("monte_carlo", table, x.shape[0], meta or {})


def _coerce_table(p) -> torch.Tensor:
    if isinstance(p, DistributionEstimate):
        return p.table
    return torch.as_tensor(p, dtype=DTYPE)


def tv_distance(p, q) -> float:
    """Total variation 0.5 * sum |p - q| over a shared support indexing."""
    tp, tq = _coerce_table(p), _coerce_table(q)
    if tp.shape != tq.shape:
        raise ValueError(f"support mismatch: {tuple(tp.shape)} vs {tuple(tq.shape)}")
    return float(0.5 * (tp - tq).abs().sum())


def kl_divergence(p, q, eps: float = 0.0) -> float:
    """KL(p || q) in nats; zero p-mass terms contribute zero."""
    tp, tq = _coerce_table(p), _coerce_table(q)
    if tp.shape != tq.shape:
        raise ValueError("support mismatch")
    pos = tp > 0
    return float((tp[pos] * (torch.log(tp[pos]) - torch.log(tq[pos] + eps))).sum())


def support_diversity(samples: torch.Tensor) -> tuple[int, float]:
    """(distinct row count, plug-in entropy in nats) of sampled sequences."""
    if samples.numel() == 0:
        raise ValueError("empty sample set")
    _, counts = torch.unique(samples, dim=0, return_counts=True)
    p = counts.to(DTYPE) / counts.sum()
    entropy = float(-(p * torch.log(p)).sum())
    return int(counts.numel()), entropy


def empirical_position_marginals(x: torch.Tensor, vocab_size: int) -> torch.Tensor:
    """(L, V) per-position token frequencies of sampled rows."""
    L = x.shape[-1]
    out = torch.zeros(L, vocab_size, dtype=DTYPE)
    for i in range(L):
        out[i] = torch.bincount(x[:, i], minlength=vocab_size).to(DTYPE)
    return out / x.shape[0]


def position_marginal_kl(emp: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Per-position KL(emp || ref) in nats; (L,) tensor."""
    if emp.shape != ref.shape:
        raise ValueError("marginal shape mismatch")
    pos = emp > 0
    terms = torch.zeros_like(emp)
    terms[pos] = emp[pos] * (torch.log(emp[pos]) - torch.log(ref[pos]))
    return terms.sum(-1)


def expected_reward_exact(table, dec, reward_items, c: int, vocab_size: int,
                          seq_len: int) -> float:
    """Expected weighted toy reward under an exact sequence distribution.

    Decodes every sequence in the support via hard decoder-embedding lookup
    and averages the weighted reward sum with the table's probabilities.
    """
    from .toyworld import decode, toy_reward

    t = _coerce_table(table)
    n = vocab_size ** seq_len
    if t.shape != (n,):
        raise ValueError("table length does not match the state space")
    ids = torch.arange(n)
    digits = []
    rest = ids.clone()
    for _ in range(seq_len):
        digits.append(rest % vocab_size)
        rest = rest // vocab_size
    x = torch.stack(digits[::-1], dim=-1)
    sig = decode(dec, dec.embed_table[x])
    total = torch.zeros(n, dtype=DTYPE)
    for name, lam in reward_items:
        total = total + lam * toy_reward(name, sig, c, dec)
    return float((t * total).sum())


def grad_check(fn, point: torch.Tensor, eps: float = 1e-5, tol: float = 1e-4,
               coords=None) -> dict:
    """Central finite differences against autograd for a scalar function.

    ``fn`` maps a tensor shaped like ``point`` to a scalar tensor. ``coords``
    optionally restricts the FD probe to a list of flat indices (for large
    parameter tensors). Relative error is the max absolute deviation over the
    probed coordinates divided by the larger gradient magnitude.
    """
    point = point.detach().clone().to(DTYPE)
    p = point.clone().requires_grad_(True)
    val = fn(p)
    if not torch.isfinite(val):
        raise ValueError("function value non-finite at the probe point")
    analytic = torch.autograd.grad(val, p)[0].reshape(-1)
    flat = point.reshape(-1)
    idx = range(flat.numel()) if coords is None else coords
    numeric = {}
    for i in idx:
        for sgn in (+1.0, -1.0):
            shifted = flat.clone()
            shifted[i] += sgn * eps
            v = fn(shifted.reshape(point.shape))
            if not torch.isfinite(v):
                raise ValueError("function value non-finite during FD probe")
            numeric[i] = numeric.get(i, 0.0) + sgn * float(v.detach()) / (2 * eps)
    a = torch.tensor([float(analytic[i]) for i in numeric], dtype=DTYPE)
    n = torch.tensor([numeric[i] for i in numeric], dtype=DTYPE)
    scale = max(float(a.abs().max()), float(n.abs().max()), 1e-12)
    max_rel = float((a - n).abs().max()) / scale
    return {"max_rel_err": max_rel, "passed": max_rel <= tol,
            "analytic": a, "numeric": n, "scale": scale}
