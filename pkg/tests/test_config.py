"""Config schema, round-trip serialization, and typed builders."""
import pytest

import softdistill as sd
from softdistill.config import SCHEMA, ConfigError, ExperimentConfig


def test_every_schema_default_parses():
    for sec, keys in SCHEMA.items():
        for key, (default, parser) in keys.items():
            parser(default)  # must not raise


def test_defaults_round_trip_identity():
    cfg = ExperimentConfig()
    text = cfg.dumps()
    again = ExperimentConfig.loads(text)
    assert again.data == cfg.data
    assert again.dumps() == text


def test_modified_round_trip_identity():
    cfg = ExperimentConfig()
    cfg.set("train", "steps", 42)
    cfg.set("divergence", "family", "jeffreys")
    cfg.set("train", "freeze_embedding", "no")
    text = cfg.dumps()
    again = ExperimentConfig.loads(text)
    assert again.get("train", "steps") == 42
    assert again.get("divergence", "family") == "jeffreys"
    assert again.get("train", "freeze_embedding") is False
    assert again.dumps() == text


def test_unknown_section_and_key_rejected():
    cfg = ExperimentConfig()
    with pytest.raises(ConfigError):
        cfg.set("wormhole", "radius", 3)
    with pytest.raises(ConfigError):
        cfg.set("train", "warp_factor", 9)
    with pytest.raises(ConfigError):
        ExperimentConfig.loads("[wormhole]\nradius = 3\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.loads("[train]\nwarp_factor = 9\n")


def test_bad_values_rejected_at_set():
    cfg = ExperimentConfig()
    with pytest.raises(ConfigError):
        cfg.set("train", "steps", "many")
    with pytest.raises(ConfigError):
        cfg.set("train", "lr", "fast")
    with pytest.raises(ConfigError):
        cfg.set("train", "freeze_embedding", "maybe")


def test_bool_spellings():
    cfg = ExperimentConfig()
    for s, want in [("yes", True), ("on", True), ("1", True), ("TRUE", True),
                    ("no", False), ("off", False), ("0", False), ("False", False)]:
        cfg.set("train", "freeze_embedding", s)
        assert cfg.get("train", "freeze_embedding") is want


def test_unparseable_text_and_missing_file():
    with pytest.raises(ConfigError):
        ExperimentConfig.loads("this is not an ini file [")
    with pytest.raises(ConfigError):
        ExperimentConfig.load("/nonexistent/path.ini")


def test_dump_load_file_round_trip(tmp_path):
    cfg = ExperimentConfig()
    cfg.set("toyworld", "seed", 3)
    path = str(tmp_path / "run.ini")
    cfg.dump(path)
    again = ExperimentConfig.load(path)
    assert again.data == cfg.data


def test_copy_is_independent():
    cfg = ExperimentConfig()
    dup = cfg.copy()
    dup.set("train", "steps", 1)
    assert cfg.get("train", "steps") == 3000
    assert dup.get("train", "steps") == 1


# ---------------------------------------------------------------------------
# builders


def test_builders_mirror_dataclass_defaults():
    cfg = ExperimentConfig()
    assert cfg.distill_config() == sd.DistillConfig()
    assert cfg.divergence_spec() == sd.DivergenceSpec()
    assert cfg.toyworld_spec() == sd.ToyWorldSpec.micro()
    tc = cfg.teacher_train_config()
    want = sd.TeacherTrainConfig()
    for f in ("steps", "batch_size", "lr", "lr_decay", "warmup_steps",
              "grad_clip", "betas", "class_dropout", "seed"):
        assert getattr(tc, f) == getattr(want, f), f
    assert tc.schedule.kind == "arccos"


def test_model_config_inherits_world_shape():
    cfg = ExperimentConfig()
    cfg.set("toyworld", "vocab_size", 6)
    cfg.set("toyworld", "seq_len", 3)
    mc = cfg.model_config()
    assert mc.vocab_size == 6 and mc.seq_len == 3 and mc.num_classes == 2
    assert mc.d_model == 64


def test_init_distribution_builder():
    cfg = ExperimentConfig()
    init = cfg.init_distribution()
    assert init.r_init == 0.6 and init.vocab_size == 4 and init.seq_len == 4


def test_loss_weights_builder():
    cfg = ExperimentConfig()
    assert cfg.loss_weights() == {"distill": 1.0, "gan": 0.0, "reward": 0.0}


def test_reward_config_drops_zero_weights():
    cfg = ExperimentConfig()
    assert [n for n, _ in cfg.reward_config().items] == ["target_affinity",
                                                         "smoothness"]
    cfg.set("rewards", "smoothness", 0.0)
    assert [n for n, _ in cfg.reward_config().items] == ["target_affinity"]


def test_disc_spec_tap_parsing():
    cfg = ExperimentConfig()
    assert cfg.disc_spec().taps is None  # "all"
    cfg.set("gan", "taps", "0,1")
    assert cfg.disc_spec().taps == (0, 1)
    cfg.set("gan", "taps", "nope")
    with pytest.raises(ConfigError):
        cfg.disc_spec()


def test_builders_wrap_domain_errors_as_config_errors():
    cfg = ExperimentConfig()
    cfg.set("divergence", "family", "typo")
    with pytest.raises(ConfigError):
        cfg.divergence_spec()
    cfg = ExperimentConfig()
    cfg.set("schedule", "teacher", "typo")
    with pytest.raises(ConfigError):
        cfg.schedule("teacher")
    cfg = ExperimentConfig()
    cfg.set("gan", "mask_low", 0.9)
    cfg.set("gan", "mask_high", 0.1)
    with pytest.raises(ConfigError):
        cfg.disc_spec()


def test_tteo_builder_parses_reward_list():
    cfg = ExperimentConfig()
    tt = cfg.tteo_config()
    assert tt == sd.TteoConfig()
    cfg.set("tteo", "reward", "target_affinity, smoothness")
    items = cfg.tteo_config().rewards.items
    assert items == (("target_affinity", 1.0), ("smoothness", 1.0))


def test_relaxation_builder():
    cfg = ExperimentConfig()
    rc = cfg.relaxation()
    assert rc == sd.RelaxationConfig()
    cfg.set("gan", "relaxation", "gumbel_st")
    cfg.set("gan", "relax_temperature", 0.5)
    assert cfg.relaxation() == sd.RelaxationConfig("gumbel_st", 0.5, 1.0)
