"""Distillation: init draws, divergences, surrogate gradient, step mechanics."""
import math

import pytest
import torch
import torch.nn.functional as F

import softdistill as sd
from conftest import assert_close

MODEL_CFG = sd.ModelConfig(vocab_size=4, seq_len=4, num_classes=2)


def _fresh_state(micro_world, batch_size=16, seed=0, weights=None,
                 disc=False, **cfg_kw):
    _, dist, dec = micro_world
    teacher = sd.build_model(MODEL_CFG, seed=5).freeze()
    cfg = sd.DistillConfig(batch_size=batch_size, seed=seed, **cfg_kw)
    disc_spec = sd.DiscriminatorSpec() if disc else None
    return sd.init_distill_state(teacher, dist, dec, cfg, weights=weights,
                                 disc_spec=disc_spec)


# ---------------------------------------------------------------------------
# initialization distribution


def test_draw_init_full_mask(rng):
    init = sd.InitDistribution(r_init=1.0, vocab_size=4, seq_len=4)
    x = sd.draw_init(init, 32, rng)
    assert (x == 4).all()


def test_draw_init_no_mask_uniform_tokens(rng):
    init = sd.InitDistribution(r_init=0.0, vocab_size=4, seq_len=4)
    x = sd.draw_init(init, 25_000, rng)
    assert (x < 4).all()
    counts = torch.bincount(x.flatten(), minlength=4).double()
    n = 100_000
    sigma = math.sqrt(n * 0.25 * 0.75)
    assert ((counts - n / 4).abs() <= 3 * sigma).all(), counts


def test_draw_init_exact_mask_count_l10(rng):
    init = sd.InitDistribution(r_init=0.6, vocab_size=4, seq_len=10)
    x = sd.draw_init(init, 200, rng)
    assert ((x == 4).sum(dim=1) == 6).all()


def test_draw_init_mask_positions_uniform(rng):
    # L=4, 2 masks: 6 equally likely position pairs
    init = sd.InitDistribution(r_init=0.5, vocab_size=4, seq_len=4)
    x = sd.draw_init(init, 30_000, rng)
    masked = x == 4
    assert (masked.sum(dim=1) == 2).all()
    codes = (masked.double() * torch.tensor([8.0, 4.0, 2.0, 1.0])).sum(1)
    _, counts = codes.unique(return_counts=True)
    assert len(counts) == 6
    expected = 30_000 / 6
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 20.5, chi2  # chi2(5) at p=0.001


def test_init_distribution_validation():
    with pytest.raises(ValueError):
        sd.InitDistribution(r_init=1.2)
    with pytest.raises(ValueError):
        sd.InitDistribution(r_init=-0.1)
    assert sd.InitDistribution(r_init=0.6, seq_len=4).n_masked == 2


# ---------------------------------------------------------------------------
# divergence family


def _rand_logp(rng, shape=(6, 4)):
    return F.log_softmax(sd.randn(shape, rng), dim=-1)


def test_divergence_zero_at_equal_distributions(rng):
    for fam, lam in (("fkl", 0.0), ("rkl", 0.0), ("jeffreys", -0.2),
                     ("jeffreys", 0.5)):
        spec = sd.DivergenceSpec(family=fam, jeffreys_lambda=lam)
        lp = _rand_logp(rng)
        assert float(sd.divergence(spec, lp, lp).abs().max()) < 1e-14


def test_fkl_hand_value():
    lp = torch.log(torch.tensor([[0.8, 0.2]], dtype=torch.float64))
    lq = torch.log(torch.tensor([[0.5, 0.5]], dtype=torch.float64))
    want = 0.8 * math.log(0.8 / 0.5) + 0.2 * math.log(0.2 / 0.5)
    got = float(sd.divergence(sd.DivergenceSpec(family="fkl"), lp, lq))
    assert abs(got - want) < 1e-14


def test_rkl_is_flipped_fkl(rng):
    lp, lq = _rand_logp(rng), _rand_logp(rng)
    fkl = sd.divergence(sd.DivergenceSpec(family="fkl"), lq, lp)
    rkl = sd.divergence(sd.DivergenceSpec(family="rkl"), lp, lq)
    assert_close(rkl, fkl, 1e-14)


def test_jeffreys_blend_identity(rng):
    lp, lq = _rand_logp(rng), _rand_logp(rng)
    fkl = sd.divergence(sd.DivergenceSpec(family="fkl"), lp, lq)
    rkl = sd.divergence(sd.DivergenceSpec(family="rkl"), lp, lq)
    for lam in (-0.2, 0.0, 0.5, 1.0):
        spec = sd.DivergenceSpec(family="jeffreys", jeffreys_lambda=lam)
        assert_close(sd.divergence(spec, lp, lq),
                     (1 - lam) * fkl + lam * rkl, 1e-12)


def test_jeffreys_half_symmetric(rng):
    spec = sd.DivergenceSpec(family="jeffreys", jeffreys_lambda=0.5)
    lp, lq = _rand_logp(rng), _rand_logp(rng)
    assert_close(sd.divergence(spec, lp, lq), sd.divergence(spec, lq, lp), 1e-10)


def test_divergence_nonnegative_for_proper_blends(rng):
    for fam, lam in (("fkl", 0.0), ("rkl", 0.0), ("jeffreys", 0.3),
                     ("jeffreys", 1.0)):
        spec = sd.DivergenceSpec(family=fam, jeffreys_lambda=lam)
        for _ in range(20):
            lp, lq = _rand_logp(rng), _rand_logp(rng)
            assert float(sd.divergence(spec, lp, lq).min()) >= -1e-14


def test_divergence_spec_validation():
    with pytest.raises(ValueError):
        sd.DivergenceSpec(family="hellinger")


def test_fkl_gradient_closed_form():
    """d KL(p_phi || softmax(z_psi)) / d z_psi = p_psi - p_phi."""
    lp_phi = torch.log(torch.tensor([[0.8, 0.2]], dtype=torch.float64))
    z_psi = torch.zeros(1, 2, dtype=torch.float64, requires_grad=True)
    div = sd.divergence(sd.DivergenceSpec(family="fkl"), lp_phi,
                        F.log_softmax(z_psi, dim=-1)).sum()
    div.backward()
    assert_close(z_psi.grad, torch.tensor([[-0.3, 0.3]], dtype=torch.float64),
                 1e-12)
    # central finite differences on the same scalar
    eps = 1e-6
    for j in range(2):
        zp = torch.zeros(1, 2, dtype=torch.float64)
        zm = zp.clone()
        zp[0, j] += eps
        zm[0, j] -= eps
        fd = (float(sd.divergence(sd.DivergenceSpec(family="fkl"), lp_phi,
                                  F.log_softmax(zp, dim=-1)).sum())
              - float(sd.divergence(sd.DivergenceSpec(family="fkl"), lp_phi,
                                    F.log_softmax(zm, dim=-1)).sum())) / (2 * eps)
        assert abs(fd - float(z_psi.grad[0, j])) < 1e-8


# ---------------------------------------------------------------------------
# matching surrogate


def test_fixed_point_zero_gradient(micro_world, rng):
    """Auxiliary identical to teacher at guidance 0 gives exactly zero grads."""
    state = _fresh_state(micro_world, cfg_w=0.0)
    x_init = sd.draw_init(state.init, 8, rng)
    c = torch.zeros(8, dtype=torch.long)
    surrogate, diag = sd.matching_surrogate_loss(state, x_init, c, rng)
    assert diag["div_value"] == 0.0
    # backward of log-softmax leaves one-ulp crumbs even at an exact zero
    assert diag["g_norm"] < 1e-12
    grads = torch.autograd.grad(
        surrogate, [p for p in state.student.parameters() if p.requires_grad],
        allow_unused=True)
    for g in grads:
        assert g is None or float(g.abs().max()) < 1e-12


def test_surrogate_gradient_equals_g_dot_jacobian(rng):
    """<stop-grad(g), z(theta)> backpropagates exactly g . dz/dtheta."""
    theta = sd.randn((2,), rng).requires_grad_(True)
    A = sd.randn((3, 4, 2), rng)
    g = sd.randn((3, 4), rng)
    z = torch.einsum("lvp,p->lv", A, theta)
    (g.detach() * z).sum().backward()
    eps = 1e-6
    for k in range(2):
        tp, tm = theta.detach().clone(), theta.detach().clone()
        tp[k] += eps
        tm[k] -= eps
        obj = lambda t: float((g * torch.einsum("lvp,p->lv", A, t)).sum())
        fd = (obj(tp) - obj(tm)) / (2 * eps)
        assert abs(fd - float(theta.grad[k])) < 1e-8 * max(1.0, abs(fd))


def test_surrogate_nonzero_off_fixed_point(micro_world, rng):
    """A perturbed auxiliary makes the divergence and student signal nonzero."""
    state = _fresh_state(micro_world, cfg_w=1.5)
    # nudge the aux so the divergence is nonzero
    with torch.no_grad():
        for p in state.aux.parameters():
            p.add_(0.01 * sd.randn(p.shape, rng))
    x_init = sd.draw_init(state.init, 4, rng)
    c = torch.zeros(4, dtype=torch.long)
    z_theta = state.student.logits(x_init, c).detach().requires_grad_(True)
    surrogate, diag = sd.matching_surrogate_loss(state, x_init, c, rng,
                                                 z_theta=z_theta)
    assert diag["div_value"] > 0.0
    surrogate.backward()
    assert float(z_theta.grad.abs().sum()) > 0.0


def test_surrogate_time_and_mask_reuse(micro_world, rng):
    """Passing precomputed z/x must consume the same rng stream as not."""
    state_a = _fresh_state(micro_world, seed=3)
    state_b = _fresh_state(micro_world, seed=3)
    rng_a, rng_b = sd.make_generator(21), sd.make_generator(21)
    x_init = sd.draw_init(state_a.init, 8, sd.make_generator(2))
    c = torch.zeros(8, dtype=torch.long)
    s_a, d_a = sd.matching_surrogate_loss(state_a, x_init, c, rng_a)
    z = state_b.student.logits(x_init, c)
    x_theta = sd.sample_tokens(z, state_b.cfg.sample_temperature, rng_b)
    s_b, d_b = sd.matching_surrogate_loss(state_b, x_init, c, rng_b,
                                          z_theta=z, x_theta=x_theta)
    assert float(s_a.detach()) == float(s_b.detach())
    assert d_a["div_value"] == d_b["div_value"]


# ---------------------------------------------------------------------------
# auxiliary update


def test_auxiliary_rejects_masked_tokens(micro_world, rng):
    state = _fresh_state(micro_world)
    x = torch.full((4, 4), 4, dtype=torch.long)
    with pytest.raises(ValueError):
        sd.auxiliary_update(state, x, torch.zeros(4, dtype=torch.long), rng)


def test_auxiliary_update_touches_only_aux(micro_world, rng):
    state = _fresh_state(micro_world)
    before = {k: sd.module_checksum(m) for k, m in
              (("teacher", state.teacher), ("student", state.student),
               ("aux", state.aux))}
    x = state.dist.sample(0, 32, rng)
    sd.auxiliary_update(state, x, torch.zeros(32, dtype=torch.long), rng)
    assert sd.module_checksum(state.teacher) == before["teacher"]
    assert sd.module_checksum(state.student) == before["student"]
    assert sd.module_checksum(state.aux) != before["aux"]


def test_auxiliary_learns_source_marginal(micro_world):
    """Many denoising steps on fixed-source samples recover its marginal.

    The source here is the exact class-0 ground truth, whose per-position
    marginals are enumerable, so the end state has an exact oracle: the
    auxiliary's conditional at the fully-masked input.
    """
    spec, dist, dec = micro_world
    teacher = sd.build_model(MODEL_CFG, seed=5).freeze()
    cfg = sd.DistillConfig(batch_size=256, seed=0)
    state = sd.init_distill_state(teacher, dist, dec, cfg)
    rng = sd.make_generator(11)
    seqs = torch.cartesian_prod(*[torch.arange(4)] * 4)
    marg = torch.zeros(4, 4, dtype=torch.float64)
    for i in range(4):
        marg[i].scatter_add_(0, seqs[:, i], dist.table(0))
    c = torch.zeros(256, dtype=torch.long)
    for _ in range(400):
        sd.auxiliary_update(state, dist.sample(0, 256, rng), c, rng)
    x = torch.full((1, 4), 4, dtype=torch.long)
    with torch.no_grad():
        lp = F.log_softmax(state.aux.logits(x, torch.zeros(1, dtype=torch.long)),
                           -1)[0]
    kl = (marg * (marg.clamp_min(1e-30).log() - lp)).sum(-1)
    assert float(kl.max()) < 0.05, kl.tolist()


# ---------------------------------------------------------------------------
# step mechanics


def test_combined_loss_rejects_all_zero_weights(micro_world, rng):
    state = _fresh_state(micro_world,
                         weights={"distill": 0.0, "gan": 0.0, "reward": 0.0})
    x_init = sd.draw_init(state.init, 4, rng)
    with pytest.raises(ValueError):
        sd.combined_generator_loss(state, (x_init, torch.zeros(4, dtype=torch.long)),
                                   rng)


def test_pure_distill_step_matches_standalone_surrogate(micro_world):
    """With zero gan/reward weights the combined loss is the bare surrogate."""
    state_a = _fresh_state(micro_world, seed=9)
    state_b = _fresh_state(micro_world, seed=9)
    x_init = sd.draw_init(state_a.init, 8, sd.make_generator(4))
    c = torch.zeros(8, dtype=torch.long)
    total, diag = sd.combined_generator_loss(state_a, (x_init, c),
                                             sd.make_generator(33))
    surrogate, sdiag = sd.matching_surrogate_loss(state_b, x_init, c,
                                                  sd.make_generator(33))
    assert float(total.detach()) == float(surrogate.detach())
    assert diag["match_div"] == sdiag["div_value"]


def test_gan_term_gated_by_onset(micro_world, rng):
    state = _fresh_state(micro_world, disc=True,
                         weights={"distill": 1.0, "gan": 5.0},
                         gan_onset_steps=1000)
    x_init = sd.draw_init(state.init, 8, rng)
    c = torch.zeros(8, dtype=torch.long)
    _, diag_early = sd.combined_generator_loss(state, (x_init, c), rng)
    assert "g_loss" not in diag_early
    assert not state.gan_applied_to_generator()
    state.step = 1000
    _, diag_late = sd.combined_generator_loss(state, (x_init, c), rng)
    assert "g_loss" in diag_late
    assert state.gan_applied_to_generator()


def test_distill_step_freezes_teacher_and_embedding(micro_world, rng):
    state = _fresh_state(micro_world, batch_size=8)
    t_sum = sd.module_checksum(state.teacher)
    emb = state.student.tok_emb.weight.detach().clone()
    s_sum = sd.module_checksum(state.student)
    for _ in range(5):
        c = sd.randint(2, (8,), rng)
        x_init = sd.draw_init(state.init, 8, rng)
        sd.distill_step(state, (x_init, c), rng)
    assert sd.module_checksum(state.teacher) == t_sum
    assert torch.equal(state.student.tok_emb.weight, emb)
    assert sd.module_checksum(state.student) != s_sum
    assert state.step == 5


def test_ema_ratio_zero_tracks_student(micro_world, rng):
    state = _fresh_state(micro_world, batch_size=8, ema_ratio=0.0)
    for _ in range(2):
        c = sd.randint(2, (8,), rng)
        sd.distill_step(state, (sd.draw_init(state.init, 8, rng), c), rng)
    cur = state.student.state_dict()
    for k, v in state.ema.items():
        assert torch.equal(v, cur[k]), k


def test_ema_ratio_one_never_moves(micro_world, rng):
    state = _fresh_state(micro_world, batch_size=8, ema_ratio=1.0)
    init_ema = {k: v.clone() for k, v in state.ema.items()}
    for _ in range(2):
        c = sd.randint(2, (8,), rng)
        sd.distill_step(state, (sd.draw_init(state.init, 8, rng), c), rng)
    for k, v in state.ema.items():
        assert torch.equal(v, init_ema[k]), k
    em = state.ema_model()
    assert em.frozen
    assert sd.module_checksum(em) != sd.module_checksum(state.student)


def test_run_distill_records_and_callback(micro_world):
    state = _fresh_state(micro_world, batch_size=8, log_every=4)
    seen = []

    def cb(st):
        seen.append(st.step)
        return {"probe": float(st.step)}

    records = sd.run_distill(state, 10, callback=cb)
    assert [r["step"] for r in records] == [4, 8, 10]
    assert seen == [4, 8, 10]
    assert all(r["probe"] == r["step"] for r in records)
    assert all(isinstance(v, (int, float)) for r in records for v in r.values())
    assert state.step == 10


def test_run_distill_is_deterministic(micro_world):
    outs = []
    for _ in range(2):
        state = _fresh_state(micro_world, batch_size=8, seed=13)
        sd.run_distill(state, 6)
        outs.append(sd.module_checksum(state.student))
    assert outs[0] == outs[1]


def test_nan_auxiliary_raises_diverged(micro_world, rng):
    state = _fresh_state(micro_world, batch_size=4)
    with torch.no_grad():
        state.aux.pos_emb.fill_(float("nan"))
    c = torch.zeros(4, dtype=torch.long)
    with pytest.raises(sd.TrainingDiverged):
        sd.distill_step(state, (sd.draw_init(state.init, 4, rng), c), rng)


def test_attach_discriminator_is_seeded(micro_world):
    state = _fresh_state(micro_world)
    sd.attach_discriminator(state, sd.DiscriminatorSpec(), seed=1)
    sum1 = sd.module_checksum(state.disc)
    sd.attach_discriminator(state, sd.DiscriminatorSpec(), seed=1)
    assert sd.module_checksum(state.disc) == sum1
    sd.attach_discriminator(state, sd.DiscriminatorSpec(), seed=2)
    assert sd.module_checksum(state.disc) != sum1
