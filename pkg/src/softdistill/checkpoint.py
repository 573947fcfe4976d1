"""Versioned checkpoint containers for teachers and distillation states.

A checkpoint is a torch-serialized dict with a format version and a kind
tag. Teacher checkpoints carry the world section, model config, weights, and
trainer state (optimizer moments plus rng), which is enough to resume
training bit-exactly. Distillation checkpoints additionally carry student,
auxiliary, optional discriminator, their optimizers, the EMA shadow, the
persistent step counter, and the sampling rng state.
"""
from __future__ import annotations

import dataclasses
import os

import torch

from .adversarial import DiscriminatorSpec
from .common import make_generator
from .distill import (DistillConfig, DistillState, DivergenceSpec,
                      InitDistribution, init_distill_state)
from .maskdiff import MaskSchedule, TeacherTrainConfig
from .models import ModelConfig, SequenceModel, build_model
from .rewards import RewardConfig
from .softembed import RelaxationConfig
from .toyworld import ToyWorldSpec, build_toyworld

__all__ = [
    "FORMAT_VERSION",
    "save_checkpoint",
    "load_checkpoint",
    "save_teacher",
    "load_teacher",
    "save_distill",
    "load_distill",
]

FORMAT_VERSION = 1


def save_checkpoint(path: str, kind: str, payload: dict) -> None:
    payload = dict(payload)
    payload["format_version"] = FORMAT_VERSION
    payload["kind"] = kind
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str, expected_kind: str | None = None) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, weights_only=False)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")
    if expected_kind is not None and payload.get("kind") != expected_kind:
        raise ValueError(
            f"expected a {expected_kind} checkpoint, found {payload.get('kind')!r}")
    return payload


def save_teacher(path: str, model: SequenceModel, world: ToyWorldSpec,
                 train_cfg: TeacherTrainConfig, trainer_state: dict,
                 records: list | None = None) -> None:
    cfg_dict = dataclasses.asdict(train_cfg)
    cfg_dict["schedule"] = dataclasses.asdict(train_cfg.schedule)
    save_checkpoint(path, "teacher", {
        "model_cfg": dataclasses.asdict(model.cfg),
        "model_state": model.state_dict(),
        "toyworld": world.to_config_section(),
        "train_cfg": cfg_dict,
        "trainer_state": trainer_state,
        "records": records or [],
    })


def load_teacher(path: str):
    """Returns (model, world spec, train config, trainer state, payload)."""
    payload = load_checkpoint(path, "teacher")
    world = ToyWorldSpec.from_config_section(payload["toyworld"])
    model = build_model(ModelConfig(**payload["model_cfg"]), seed=0)
    model.load_state_dict(payload["model_state"])
    tc = dict(payload["train_cfg"])
    tc["schedule"] = MaskSchedule(**tc["schedule"])
    tc["betas"] = tuple(tc["betas"])
    train_cfg = TeacherTrainConfig(**tc)
    return model, world, train_cfg, payload["trainer_state"], payload


def save_distill(path: str, state: DistillState, world: ToyWorldSpec) -> None:
    payload = {
        "model_cfg": dataclasses.asdict(state.teacher.cfg),
        "toyworld": world.to_config_section(),
        "cfg": dataclasses.asdict(state.cfg),
        "schedule_gen": dataclasses.asdict(state.schedule_gen),
        "schedule_aux": dataclasses.asdict(state.schedule_aux),
        "init": dataclasses.asdict(state.init),
        "div": dataclasses.asdict(state.div),
        "weights": dict(state.weights),
        "rewards": tuple(tuple(i) for i in state.rewards.items),
        "relaxation": dataclasses.asdict(state.relaxation),
        "disc_spec": (dataclasses.asdict(state.disc_spec)
                      if state.disc_spec is not None else None),
        "teacher_state": state.teacher.state_dict(),
        "student_state": state.student.state_dict(),
        "aux_state": state.aux.state_dict(),
        "disc_state": state.disc.state_dict() if state.disc is not None else None,
        "opt_student": state.opt_student.state_dict(),
        "opt_aux": state.opt_aux.state_dict(),
        "opt_disc": (state.opt_disc.state_dict()
                     if state.opt_disc is not None else None),
        "ema": state.ema,
        "step": state.step,
        "rng_state": state.rng.get_state(),
    }
    save_checkpoint(path, "distill", payload)


def load_distill(path: str) -> tuple[DistillState, ToyWorldSpec]:
    """Rebuild a distillation state exactly as saved (step counter included)."""
    p = load_checkpoint(path, "distill")
    world = ToyWorldSpec.from_config_section(p["toyworld"])
    dist, dec = build_toyworld(world)
    teacher = build_model(ModelConfig(**p["model_cfg"]), seed=0)
    teacher.load_state_dict(p["teacher_state"])
    teacher.freeze()
    cfg_d = dict(p["cfg"])
    cfg_d["betas"] = tuple(cfg_d["betas"])
    cfg_d["disc_betas"] = tuple(cfg_d["disc_betas"])
    cfg = DistillConfig(**cfg_d)
    disc_spec = None
    if p["disc_spec"] is not None:
        ds = dict(p["disc_spec"])
        ds["taps"] = tuple(ds["taps"]) if ds["taps"] is not None else None
        ds["mask_range"] = tuple(ds["mask_range"])
        disc_spec = DiscriminatorSpec(**ds)
    state = init_distill_state(
        teacher, dist, dec, cfg,
        schedule_gen=MaskSchedule(**p["schedule_gen"]),
        schedule_aux=MaskSchedule(**p["schedule_aux"]),
        init=InitDistribution(**p["init"]),
        div=DivergenceSpec(**p["div"]),
        weights=dict(p["weights"]),
        rewards=RewardConfig(tuple(tuple(i) for i in p["rewards"])),
        relaxation=RelaxationConfig(**p["relaxation"]),
        disc_spec=disc_spec,
    )
    state.student.load_state_dict(p["student_state"])
    state.aux.load_state_dict(p["aux_state"])
    if p["disc_state"] is not None:
        state.disc.load_state_dict(p["disc_state"])
    state.opt_student.load_state_dict(p["opt_student"])
    state.opt_aux.load_state_dict(p["opt_aux"])
    if p["opt_disc"] is not None and state.opt_disc is not None:
        state.opt_disc.load_state_dict(p["opt_disc"])
    state.ema = {k: v.clone() for k, v in p["ema"].items()}
    state.step = int(p["step"])
    state.rng = make_generator(0)
    state.rng.set_state(p["rng_state"])
    return state, world
