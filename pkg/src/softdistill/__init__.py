"""One-step generators for masked discrete diffusion, verified exactly.

The package builds tiny discrete worlds whose data distribution is an
explicit table, trains a masked-diffusion denoiser on them, distills it
into a single-call generator by distribution matching, then refines the
generator adversarially and against differentiable rewards through a soft
embedding relaxation. Every statistical claim is checkable against brute
force enumeration at this scale.
"""

from .common import (DTYPE, TrainingDiverged, make_generator, module_checksum,
                     rand, randint, randn, spawn_generator, tensor_checksum)
from .toyworld import (DecoderSpec, GroundTruthDistribution, ToyWorldSpec,
                       build_toyworld, decode, sample_data, toy_reward)
from .models import (ModelConfig, SequenceModel, build_model, cfg_logits,
                     clone_model, guided_logits)
from .maskdiff import (MaskSchedule, TeacherTrainConfig, forward_mask,
                       get_schedule, masked_nll, mdm_loss, reverse_sample,
                       teacher_train)
from .softembed import (RelaxationConfig, fidelity_gap, gumbel_st_embed,
                        sample_tokens, soft_embed)
from .distill import (DistillConfig, DistillState, DivergenceSpec,
                      InitDistribution, attach_discriminator,
                      auxiliary_update, combined_generator_loss, divergence,
                      distill_step, draw_init, init_distill_state,
                      matching_surrogate_loss, run_distill)
from .adversarial import (AugmentedInput, Discriminator, DiscriminatorSpec,
                          build_discriminator, discriminate, gan_losses,
                          mask_embeddings, relax_embed)
from .rewards import DEFAULT_REWARD_BASE, RewardConfig, reward_loss
from .tteo import TteoConfig, tteo_optimize
from .evalsuite import (DistributionEstimate, empirical_distribution,
                        empirical_position_marginals, expected_reward_exact,
                        grad_check, kl_divergence,
                        position_marginal_kl, sampler_distribution_exact,
                        student_distribution, support_diversity, tv_distance)
from .config import ConfigError, ExperimentConfig
from .checkpoint import (load_checkpoint, load_distill, load_teacher,
                         save_checkpoint, save_distill, save_teacher)

__version__ = "0.1.0"

__all__ = [
    "DTYPE", "TrainingDiverged", "make_generator", "spawn_generator",
    "rand", "randint", "randn",
    "tensor_checksum", "module_checksum",
    "ToyWorldSpec", "GroundTruthDistribution", "DecoderSpec", "build_toyworld",
    "sample_data", "decode", "toy_reward",
    "ModelConfig", "SequenceModel", "build_model", "clone_model",
    "cfg_logits", "guided_logits",
    "MaskSchedule", "get_schedule", "forward_mask", "masked_nll", "mdm_loss",
    "reverse_sample", "TeacherTrainConfig", "teacher_train",
    "RelaxationConfig", "soft_embed", "gumbel_st_embed", "sample_tokens",
    "fidelity_gap",
    "InitDistribution", "draw_init", "DivergenceSpec", "divergence",
    "DistillConfig", "DistillState", "init_distill_state",
    "attach_discriminator", "matching_surrogate_loss", "auxiliary_update",
    "combined_generator_loss", "distill_step", "run_distill",
    "DiscriminatorSpec", "Discriminator", "AugmentedInput", "build_discriminator",
    "mask_embeddings", "discriminate", "gan_losses", "relax_embed",
    "DEFAULT_REWARD_BASE", "RewardConfig", "reward_loss",
    "TteoConfig", "tteo_optimize",
    "DistributionEstimate", "student_distribution",
    "sampler_distribution_exact", "empirical_distribution", "tv_distance",
    "kl_divergence", "support_diversity", "position_marginal_kl",
    "empirical_position_marginals",
    "expected_reward_exact", "grad_check",
    "ConfigError", "ExperimentConfig",
    "save_checkpoint", "load_checkpoint", "save_teacher", "load_teacher",
    "save_distill", "load_distill",
    "__version__",
]
