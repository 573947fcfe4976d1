"""Flat INI-style experiment configuration with typed, validated sections.

Every knob of the pipeline lives in one of ten fixed sections. Defaults
follow the distillation recipe this package implements (arccos schedules,
initial mask ratio 0.6, uniform [0, 0.95] adversarial masking, optimizer
betas (0.9, 0.999) generator-side and (0.0, 0.999) discriminator-side, EMA
ratio 0.9999, gradient clip 1, 100 warmup steps, guidance 1.5, adversarial
weight 100 and reward weight 2000 in their respective refinement modes);
sizes, rates and step counts are desk-scale choices. Unknown sections or
keys and untypeable values are rejected, and parse -> serialize -> parse is
the identity, which keeps sweep diffs trustworthy.
"""
from __future__ import annotations

import configparser
import functools
import io

from .adversarial import DiscriminatorSpec
from .distill import DistillConfig, DivergenceSpec, InitDistribution
from .maskdiff import MaskSchedule, TeacherTrainConfig
from .models import ModelConfig
from .rewards import RewardConfig
from .softembed import RelaxationConfig
from .toyworld import ToyWorldSpec

__all__ = ["ConfigError", "ExperimentConfig", "SCHEMA"]


class ConfigError(ValueError):
    """Malformed configuration: unknown key, bad type, or unreadable file."""


def _builder(fn):
    """Surface bad config values as ConfigError when building run objects."""
    @functools.wraps(fn)
    def inner(self, *args, **kwargs):
        try:
            return fn(self, *args, **kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
    return inner


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# section -> key -> (default string, parser)
SCHEMA: dict[str, dict[str, tuple[str, type]]] = {
    "toyworld": {
        "scale": ("micro", str),
        "seq_len": ("4", int),
        "vocab_size": ("4", int),
        "num_classes": ("2", int),
        "patterns_per_class": ("2", int),
        "eps": ("0.05", float),
        "seed": ("0", int),
        "decoder_dim": ("8", int),
        "signal_dim": ("3", int),
    },
    "model": {
        "d_model": ("64", int),
        "n_layers": ("2", int),
        "n_heads": ("4", int),
        "dropout": ("0.0", float),
    },
    "schedule": {
        "teacher": ("arccos", str),
        "generator": ("arccos", str),
        "auxiliary": ("arccos", str),
    },
    "init": {
        "r_init": ("0.6", float),
    },
    "divergence": {
        "family": ("fkl", str),
        "jeffreys_lambda": ("-0.2", float),
    },
    "loss_weights": {
        "distill": ("1.0", float),
        "gan": ("0.0", float),
        "reward": ("0.0", float),
    },
    "gan": {
        "weight": ("100.0", float),
        "mask_low": ("0.0", float),
        "mask_high": ("0.95", float),
        "taps": ("all", str),
        "head_width": ("32", int),
        "final_hidden": ("64", int),
        "onset_steps": ("1000", int),
        "relaxation": ("soft", str),
        "relax_temperature": ("1.0", float),
        "noise_scale": ("1.0", float),
        "feature_noise": ("0.0", float),
        "disc_lr": ("0.001", float),
    },
    "rewards": {
        "weight": ("2000.0", float),
        "target_affinity": ("0.0005", float),
        "smoothness": ("0.0001", float),
    },
    "tteo": {
        "lr": ("0.2", float),
        "iterations": ("4", int),
        "n_starts": ("4", int),
        "grad_clip": ("0.0", float),
        "temperature": ("1.0", float),
        "reward": ("target_affinity", str),
    },
    "train": {
        "teacher_steps": ("5000", int),
        "teacher_batch_size": ("256", int),
        "teacher_lr": ("0.001", float),
        "teacher_lr_decay": ("cosine", str),
        "steps": ("3000", int),
        "batch_size": ("64", int),
        "lr": ("0.0001", float),
        "aux_lr": ("0.0003", float),
        "lr_decay": ("none", str),
        "lr_min_ratio": ("0.1", float),
        "refine_steps": ("800", int),
        "warmup_steps": ("100", int),
        "grad_clip": ("1.0", float),
        "beta1": ("0.9", float),
        "beta2": ("0.999", float),
        "disc_beta1": ("0.0", float),
        "disc_beta2": ("0.999", float),
        "ema_ratio": ("0.9999", float),
        "cfg_w": ("1.5", float),
        "sample_temperature": ("1.0", float),
        "freeze_embedding": ("true", _bool),
        "class_dropout": ("0.1", float),
        "seed": ("0", int),
        "log_every": ("100", int),
        "eval_every": ("0", int),
    },
}


class ExperimentConfig:
    """All sections resolved against the schema; values stored as strings."""

    def __init__(self, data: dict[str, dict[str, str]] | None = None):
        self.data = {sec: {k: d for k, (d, _) in keys.items()}
                     for sec, keys in SCHEMA.items()}
        for sec, kv in (data or {}).items():
            for k, v in kv.items():
                self.set(sec, k, v)

    # -- raw access -------------------------------------------------------
    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        sval = str(value)
        _, parser = SCHEMA[section][key]
        try:
            parser(sval)
        except ValueError as e:
            raise ConfigError(f"bad value for [{section}] {key}: {e}") from e
        self.data[section][key] = sval

    def get(self, section: str, key: str):
        _, parser = SCHEMA[section][key]
        return parser(self.data[section][key])

    # -- serialization ----------------------------------------------------
    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"unparseable config: {e}") from e
        data = {sec: dict(parser.items(sec)) for sec in parser.sections()}
        return cls(data)

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                return cls.loads(fh.read())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e

    def dumps(self) -> str:
        buf = io.StringIO()
        for sec in SCHEMA:
            buf.write(f"[{sec}]\n")
            for key in SCHEMA[sec]:
                buf.write(f"{key} = {self.data[sec][key]}\n")
            buf.write("\n")
        return buf.getvalue()

    def dump(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    def copy(self) -> "ExperimentConfig":
        return ExperimentConfig({s: dict(kv) for s, kv in self.data.items()})

    # -- builders ---------------------------------------------------------
    @_builder
    def toyworld_spec(self) -> ToyWorldSpec:
        return ToyWorldSpec.from_config_section(self.data["toyworld"])

    @_builder
    def model_config(self) -> ModelConfig:
        tw = self.toyworld_spec()
        return ModelConfig(
            vocab_size=tw.vocab_size, seq_len=tw.seq_len,
            num_classes=tw.num_classes,
            d_model=self.get("model", "d_model"),
            n_layers=self.get("model", "n_layers"),
            n_heads=self.get("model", "n_heads"),
            dropout=self.get("model", "dropout"))

    @_builder
    def schedule(self, role: str) -> MaskSchedule:
        return MaskSchedule(self.get("schedule", role))

    @_builder
    def init_distribution(self) -> InitDistribution:
        tw = self.toyworld_spec()
        return InitDistribution(self.get("init", "r_init"),
                                tw.vocab_size, tw.seq_len)

    @_builder
    def divergence_spec(self) -> DivergenceSpec:
        return DivergenceSpec(self.get("divergence", "family"),
                              self.get("divergence", "jeffreys_lambda"))

    @_builder
    def loss_weights(self) -> dict:
        return {k: self.get("loss_weights", k) for k in SCHEMA["loss_weights"]}

    @_builder
    def reward_config(self) -> RewardConfig:
        items = tuple((name, self.get("rewards", name))
                      for name in ("target_affinity", "smoothness")
                      if self.get("rewards", name) != 0.0)
        return RewardConfig(items or (("target_affinity",
                                       self.get("rewards", "target_affinity")),))

    @_builder
    def relaxation(self) -> RelaxationConfig:
        return RelaxationConfig(self.get("gan", "relaxation"),
                                self.get("gan", "relax_temperature"),
                                self.get("gan", "noise_scale"))

    @_builder
    def disc_spec(self) -> DiscriminatorSpec:
        raw = self.get("gan", "taps")
        taps = None if raw == "all" else tuple(int(t) for t in raw.split(","))
        return DiscriminatorSpec(
            taps=taps,
            head_width=self.get("gan", "head_width"),
            final_hidden=self.get("gan", "final_hidden"),
            mask_range=(self.get("gan", "mask_low"), self.get("gan", "mask_high")),
            feature_noise=self.get("gan", "feature_noise"))

    @_builder
    def teacher_train_config(self) -> TeacherTrainConfig:
        return TeacherTrainConfig(
            steps=self.get("train", "teacher_steps"),
            batch_size=self.get("train", "teacher_batch_size"),
            lr=self.get("train", "teacher_lr"),
            lr_decay=self.get("train", "teacher_lr_decay"),
            warmup_steps=self.get("train", "warmup_steps"),
            grad_clip=self.get("train", "grad_clip"),
            betas=(self.get("train", "beta1"), self.get("train", "beta2")),
            class_dropout=self.get("train", "class_dropout"),
            schedule=self.schedule("teacher"),
            seed=self.get("train", "seed"),
            log_every=self.get("train", "log_every"))

    @_builder
    def distill_config(self) -> DistillConfig:
        return DistillConfig(
            steps=self.get("train", "steps"),
            batch_size=self.get("train", "batch_size"),
            lr=self.get("train", "lr"),
            aux_lr=self.get("train", "aux_lr"),
            lr_decay=self.get("train", "lr_decay"),
            lr_min_ratio=self.get("train", "lr_min_ratio"),
            disc_lr=self.get("gan", "disc_lr"),
            warmup_steps=self.get("train", "warmup_steps"),
            grad_clip=self.get("train", "grad_clip"),
            betas=(self.get("train", "beta1"), self.get("train", "beta2")),
            disc_betas=(self.get("train", "disc_beta1"),
                        self.get("train", "disc_beta2")),
            ema_ratio=self.get("train", "ema_ratio"),
            cfg_w=self.get("train", "cfg_w"),
            sample_temperature=self.get("train", "sample_temperature"),
            freeze_embedding=self.get("train", "freeze_embedding"),
            gan_onset_steps=self.get("gan", "onset_steps"),
            seed=self.get("train", "seed"),
            log_every=self.get("train", "log_every"))

    @_builder
    def tteo_config(self):
        from .tteo import TteoConfig
        names = [n.strip() for n in self.get("tteo", "reward").split(",") if n.strip()]
        return TteoConfig(
            lr=self.get("tteo", "lr"),
            iterations=self.get("tteo", "iterations"),
            n_starts=self.get("tteo", "n_starts"),
            grad_clip=self.get("tteo", "grad_clip"),
            temperature=self.get("tteo", "temperature"),
            rewards=RewardConfig(tuple((n, 1.0) for n in names)))
