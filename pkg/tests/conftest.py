"""Shared fixtures: one micro world and one quickly-trained denoiser.

The quick teacher is deliberately small (800 steps, batch 128) so the whole
module-test suite stays fast; it is good enough for tests that need sane
conditionals but is not the acceptance-grade teacher, which the acceptance
tests train themselves at full budget and cache on disk.
"""
import pytest
import torch

import softdistill as sd


@pytest.fixture(scope="session")
def micro_world():
    spec = sd.ToyWorldSpec.micro()
    dist, dec = sd.build_toyworld(spec)
    return spec, dist, dec


@pytest.fixture(scope="session")
def quick_teacher(micro_world):
    spec, dist, _ = micro_world
    model = sd.build_model(
        sd.ModelConfig(vocab_size=spec.vocab_size, seq_len=spec.seq_len,
                       num_classes=spec.num_classes), seed=0)
    cfg = sd.TeacherTrainConfig(steps=800, batch_size=128, log_every=200)
    sd.teacher_train(model, dist, cfg)
    model.freeze()
    return model


@pytest.fixture()
def rng():
    return sd.make_generator(0)


def assert_close(a, b, tol, msg=""):
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    err = (a - b).abs().max().item()
    assert err <= tol, f"{msg} max abs err {err:g} > {tol:g}"
