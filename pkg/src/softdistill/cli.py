"""Command-line entry point and experiment orchestration.

Subcommands: train-teacher, distill, refine, tteo, eval, sweep, plot. Each
run owns a directory holding a config snapshot, checkpoints under ckpt/,
line-delimited metric records in metrics.jsonl, and figures/. Exit codes are
stable: 0 success, 1 runtime failure (e.g. divergence), 2 usage error,
3 malformed config, 4 missing checkpoint.

Run directories default under ./runs or $SOFTDISTILL_RUN_ROOT; metric files
contain no timestamps, so identical config and seed reproduce them byte for
byte (wall-clock metadata lives in run.json instead).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import torch

from . import checkpoint as ckpt_io
from .common import TrainingDiverged, make_generator
from .config import ConfigError, ExperimentConfig
from .distill import attach_discriminator, init_distill_state, run_distill
from .evalsuite import (empirical_distribution, sampler_distribution_exact,
                        student_distribution, support_diversity, tv_distance)
from .maskdiff import reverse_sample, teacher_train
from .models import build_model
from .plots import emit_plots
from .rewards import RewardConfig
from .toyworld import build_toyworld, export_table
from .tteo import TteoConfig, tteo_optimize

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4

MASK_RANGE_ARMS = (("none", (0.0, 0.0)), ("half", (0.0, 0.5)), ("full", (0.0, 0.95)))


def _run_root() -> str:
    return os.environ.get("SOFTDISTILL_RUN_ROOT", "runs")


def _make_run_dir(args, cmd: str, cfg: ExperimentConfig | None) -> str:
    if getattr(args, "run_dir", None):
        path = args.run_dir
    else:
        salt = cfg.dumps() if cfg is not None else cmd
        tag = hashlib.sha256(salt.encode()).hexdigest()[:8]
        path = os.path.join(_run_root(), f"{cmd}-{tag}")
    os.makedirs(os.path.join(path, "ckpt"), exist_ok=True)
    return path


def _append_metrics(run_dir: str, records: list[dict]) -> None:
    with open(os.path.join(run_dir, "metrics.jsonl"), "a") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _write_run_meta(run_dir: str, argv) -> None:
    meta = {"argv": list(argv), "time": time.strftime("%Y-%m-%dT%H:%M:%S")}
    with open(os.path.join(run_dir, "run.json"), "w") as fh:
        json.dump(meta, fh, indent=1)


def _snapshot_config(run_dir: str, cfg: ExperimentConfig) -> None:
    cfg.dump(os.path.join(run_dir, "config.snapshot"))


def _tv_eval(state, model=None) -> dict:
    """Deterministic per-class TV to ground truth over the enumerated init space."""
    model = model if model is not None else state.student
    out = {}
    tvs = []
    for c in range(state.dist.spec.num_classes):
        est = student_distribution(model, c, state.init, mode="exact",
                                   enumerate_init_space=True)
        tv = tv_distance(est, state.dist.table(c))
        out[f"tv_data_c{c}"] = tv
        tvs.append(tv)
    out["tv_data_mean"] = sum(tvs) / len(tvs)
    return out


# ---------------------------------------------------------------------------
# subcommand implementations


def _cmd_train_teacher(args, argv) -> int:
    cfg = ExperimentConfig.load(args.config)
    run_dir = _make_run_dir(args, "train-teacher", cfg)
    _write_run_meta(run_dir, argv)
    _snapshot_config(run_dir, cfg)
    world = cfg.toyworld_spec()
    dist, _ = build_toyworld(world)
    model = build_model(cfg.model_config(), seed=cfg.get("train", "seed"))
    tcfg = cfg.teacher_train_config()
    eval_every = cfg.get("train", "eval_every")
    schedule = cfg.schedule("teacher")

    def callback(m, step):
        if eval_every <= 0 or step % eval_every != 0:
            return {}
        m.eval()
        out = {}
        for c in range(world.num_classes):
            est = sampler_distribution_exact(m, c, world.seq_len, schedule,
                                             order="random")
            out[f"tv_data_c{c}"] = tv_distance(est, dist.table(c))
        m.train()
        return out

    records, trainer_state = teacher_train(model, dist, tcfg, callback=callback)
    out_path = args.out or os.path.join(run_dir, "ckpt", "teacher.pt")
    ckpt_io.save_teacher(out_path, model, world, tcfg, trainer_state, records)
    _append_metrics(run_dir, records)
    if args.export_table:
        with open(os.path.join(run_dir, "ground_truth.tsv"), "w") as fh:
            fh.write(export_table(dist))
    print(f"teacher saved to {out_path}; final loss "
          f"{records[-1]['loss']:.4f}" if records else "no steps run")
    return EXIT_OK


def _cmd_distill(args, argv) -> int:
    cfg = ExperimentConfig.load(args.config)
    teacher, world, _, _, _ = ckpt_io.load_teacher(args.teacher)
    teacher.freeze()
    run_dir = _make_run_dir(args, "distill", cfg)
    _write_run_meta(run_dir, argv)
    _snapshot_config(run_dir, cfg)
    dist, dec = build_toyworld(world)
    weights = cfg.loss_weights()
    disc_spec = cfg.disc_spec() if weights.get("gan", 0.0) != 0.0 else None
    state = init_distill_state(
        teacher, dist, dec, cfg.distill_config(),
        schedule_gen=cfg.schedule("generator"),
        schedule_aux=cfg.schedule("auxiliary"),
        init=cfg.init_distribution(),
        div=cfg.divergence_spec(),
        weights=weights,
        rewards=cfg.reward_config(),
        relaxation=cfg.relaxation(),
        disc_spec=disc_spec)
    eval_every = cfg.get("train", "eval_every")

    def callback(st):
        if eval_every <= 0 or st.step % eval_every != 0:
            return {}
        return _tv_eval(st)

    records = run_distill(state, cfg.get("train", "steps"), callback=callback)
    out_path = args.out or os.path.join(run_dir, "ckpt", "student.pt")
    ckpt_io.save_distill(out_path, state, world)
    final = _tv_eval(state)
    final["step"] = state.step
    records.append(final)
    _append_metrics(run_dir, records)
    print(f"student saved to {out_path}; TV to data "
          f"{final['tv_data_mean']:.4f}")
    return EXIT_OK


def _cmd_refine(args, argv) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    state, world = ckpt_io.load_distill(args.inp)
    run_dir = _make_run_dir(args, f"refine-{args.mode}", cfg)
    _write_run_meta(run_dir, argv)
    _snapshot_config(run_dir, cfg)
    modes = args.mode.split("+")
    if "gan" in modes:
        w = args.gan_weight if args.gan_weight is not None else cfg.get("gan", "weight")
        state.weights["gan"] = w
        state.relaxation = cfg.relaxation()
        state.cfg.disc_lr = cfg.get("gan", "disc_lr")
        state.cfg.gan_onset_steps = cfg.get("gan", "onset_steps")
        attach_discriminator(state, cfg.disc_spec(), seed=args.seed)
    if "reward" in modes:
        w = args.reward_weight if args.reward_weight is not None \
            else cfg.get("rewards", "weight")
        state.weights["reward"] = w
        state.rewards = cfg.reward_config()
    if args.distill_weight is not None:
        state.weights["distill"] = args.distill_weight
    if args.seed is not None:
        state.rng = make_generator(args.seed)
    steps = args.steps if args.steps is not None else cfg.get("train", "refine_steps")
    eval_every = cfg.get("train", "eval_every")

    def callback(st):
        if eval_every <= 0 or st.step % eval_every != 0:
            return {}
        return _tv_eval(st)

    records = run_distill(state, steps, callback=callback)
    out_path = args.out or os.path.join(run_dir, "ckpt", "student.pt")
    ckpt_io.save_distill(out_path, state, world)
    final = _tv_eval(state)
    final["step"] = state.step
    records.append(final)
    _append_metrics(run_dir, records)
    print(f"refined ({args.mode}) saved to {out_path}; TV to data "
          f"{final['tv_data_mean']:.4f}")
    return EXIT_OK


def _load_eval_model(path: str, use: str):
    """Returns (model, kind, state-or-None, world)."""
    payload = ckpt_io.load_checkpoint(path)
    if payload["kind"] == "teacher":
        model, world, tcfg, _, _ = ckpt_io.load_teacher(path)
        model.freeze()
        return model, "teacher", None, world, tcfg
    state, world = ckpt_io.load_distill(path)
    model = state.ema_model() if use == "ema" else state.student
    model.freeze()
    return model, "distill", state, world, None


def _cmd_eval(args, argv) -> int:
    model, kind, state, world, tcfg = _load_eval_model(args.student, args.use)
    run_dir = _make_run_dir(args, "eval", None)
    _write_run_meta(run_dir, argv)
    dist, dec = build_toyworld(world)
    rng = make_generator(args.seed)
    records = []
    for c in range(world.num_classes):
        if kind == "teacher":
            est = sampler_distribution_exact(model, c, args.steps,
                                             tcfg.schedule, cfg_w=args.cfg_w,
                                             order=args.order)
            samples = reverse_sample(model, c, args.steps, tcfg.schedule, rng,
                                     n=args.diversity_samples,
                                     cfg_w=args.cfg_w, order=args.order)
        else:
            if args.mode == "exact":
                est = student_distribution(
                    model, c, state.init, mode="exact",
                    enumerate_init_space=args.enumerate_inits,
                    m_inits=args.m_inits, rng=rng)
            else:
                est = student_distribution(model, c, state.init, mode="mc",
                                           rng=rng, n_samples=args.mc_samples)
            from .distill import draw_init
            from .softembed import sample_tokens
            x_init = draw_init(state.init, args.diversity_samples, rng)
            with torch.no_grad():
                samples = sample_tokens(model.logits(x_init, c), 1.0, rng)
        if args.against == "data":
            ref = dist.table(c)
        else:
            if kind == "teacher":
                raise ValueError("--against teacher needs a distilled checkpoint")
            ref = sampler_distribution_exact(
                state.teacher, c, args.steps, state.schedule_gen,
                cfg_w=state.cfg.cfg_w, order=args.order).table
        distinct, entropy = support_diversity(samples)
        records.append({
            "class": c,
            "against": args.against,
            "tv": tv_distance(est, ref),
            "distinct": distinct,
            "entropy": entropy,
            "estimate_kind": est.kind,
            "n": est.n,
        })
    mean_tv = sum(r["tv"] for r in records) / len(records)
    records.append({"summary": True, "tv_mean": mean_tv,
                    "against": args.against, "use": args.use})
    _append_metrics(run_dir, records)
    for r in records:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


def _cmd_tteo(args, argv) -> int:
    state, world = ckpt_io.load_distill(args.student)
    model = state.ema_model() if args.use == "ema" else state.student
    model.freeze()
    _, dec = build_toyworld(world)
    run_dir = _make_run_dir(args, "tteo", None)
    _write_run_meta(run_dir, argv)
    rewards = RewardConfig(tuple((n.strip(), 1.0)
                                 for n in args.reward.split(",") if n.strip()))
    tcfg = TteoConfig(lr=args.lr, iterations=args.iters, n_starts=args.n,
                      grad_clip=args.grad_clip, temperature=args.temperature,
                      rewards=rewards)
    classes = ([args.cls] if args.cls is not None
               else list(range(world.num_classes)))
    records = []
    bests = []
    for c in classes:
        for prompt in range(args.prompts):
            seed = args.seed + 1000 * c + prompt
            tokens, best, trace = tteo_optimize(model, dec, c, tcfg,
                                                state.init, seed)
            bests.append(best)
            rec = {"class": c, "prompt": prompt, "best_reward": best,
                   "tokens": tokens.tolist()}
            if prompt == 0:
                for k, entry in enumerate(trace):
                    records.append({"class": c, "restart": k,
                                    "rewards_per_iteration": entry["rewards"]})
            records.append(rec)
    summary = {"summary": True, "mean_best_reward": sum(bests) / len(bests),
               "n_starts": args.n, "iterations": args.iters}
    records.append(summary)
    _append_metrics(run_dir, records)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _refine_arm(ckpt_path: str, arm_name: str, mask_range, gan_weight: float,
                steps: int, seed: int, run_dir: str) -> dict:
    """One sweep entry: GAN refinement with the given mask range and weight."""
    from .adversarial import DiscriminatorSpec
    state, world = ckpt_io.load_distill(ckpt_path)
    state.weights["gan"] = gan_weight
    state.rng = make_generator(seed)
    attach_discriminator(
        state, DiscriminatorSpec(mask_range=tuple(mask_range)), seed=seed)
    run_distill(state, steps)
    tv = _tv_eval(state)
    return {"arm": arm_name, "seed": seed, "final_tv": tv["tv_data_mean"],
            **{k: v for k, v in tv.items() if k.startswith("tv_data_c")}}


def _cmd_sweep(args, argv) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    run_dir = _make_run_dir(args, f"sweep-{args.ablation}", cfg)
    _write_run_meta(run_dir, argv)
    _snapshot_config(run_dir, cfg)
    seeds = [int(s) for s in args.seeds.split(",")]
    steps = args.steps if args.steps is not None else cfg.get("train", "refine_steps")
    jobs = []
    if args.ablation == "gan_mask_range":
        weight = cfg.get("gan", "weight")
        for arm, rng_pair in MASK_RANGE_ARMS:
            for seed in seeds:
                jobs.append((args.inp, arm, rng_pair, weight, steps, seed, run_dir))
    elif args.ablation == "gan_weight":
        values = [float(v) for v in args.values.split(",")]
        for w in values:
            for seed in seeds:
                jobs.append((args.inp, f"w={w:g}", (0.0, 0.95), w, steps, seed,
                             run_dir))
    else:
        raise ConfigError(f"unknown ablation {args.ablation!r}")
    if args.parallel:
        import concurrent.futures
        with concurrent.futures.ProcessPoolExecutor() as pool:
            results = list(pool.map(_refine_arm_star, jobs))
    else:
        results = [_refine_arm(*job) for job in jobs]
    _append_metrics(run_dir, results)
    by_arm: dict[str, list[float]] = {}
    for r in results:
        by_arm.setdefault(r["arm"], []).append(r["final_tv"])
    summary = []
    for arm, vals in by_arm.items():
        vals = sorted(vals)
        summary.append({"arm": arm, "final_tv": vals[len(vals) // 2],
                        "median_of": len(vals), "summary": True})
    _append_metrics(run_dir, summary)
    emit_plots(run_dir)
    for rec in summary:
        print(json.dumps(rec, sort_keys=True))
    return EXIT_OK


def _refine_arm_star(job):
    return _refine_arm(*job)


def _cmd_plot(args, argv) -> int:
    made = emit_plots(args.run_dir)
    for path in made:
        print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="softdistill",
        description="Train, distill, refine, and probe one-step generators "
                    "of masked discrete diffusion on enumerable toy worlds.")
    sub = p.add_subparsers(dest="cmd", required=True)

    tt = sub.add_parser("train-teacher", help="fit the multi-step denoiser")
    tt.add_argument("--config", required=True)
    tt.add_argument("--out", default=None, help="teacher checkpoint path")
    tt.add_argument("--run-dir", default=None)
    tt.add_argument("--export-table", action="store_true",
                    help="also write the exact data table as TSV")

    di = sub.add_parser("distill", help="one-step distillation from a teacher")
    di.add_argument("--teacher", required=True)
    di.add_argument("--config", required=True)
    di.add_argument("--out", default=None)
    di.add_argument("--run-dir", default=None)

    rf = sub.add_parser("refine", help="adversarial / reward fine-tuning")
    rf.add_argument("--mode", required=True,
                    choices=["gan", "reward", "gan+reward"])
    rf.add_argument("--in", dest="inp", required=True,
                    help="distilled student checkpoint")
    rf.add_argument("--config", "--data-config", dest="config", default=None)
    rf.add_argument("--steps", type=int, default=None)
    rf.add_argument("--out", default=None)
    rf.add_argument("--run-dir", default=None)
    rf.add_argument("--seed", type=int, default=None)
    rf.add_argument("--gan-weight", type=float, default=None)
    rf.add_argument("--reward-weight", type=float, default=None)
    rf.add_argument("--distill-weight", type=float, default=None)

    te = sub.add_parser("tteo", help="test-time embedding optimization")
    te.add_argument("--student", required=True)
    te.add_argument("--n", type=int, default=4)
    te.add_argument("--iters", type=int, default=4)
    te.add_argument("--lr", type=float, default=0.2)
    te.add_argument("--grad-clip", type=float, default=0.0)
    te.add_argument("--temperature", type=float, default=1.0)
    te.add_argument("--reward", default="target_affinity")
    te.add_argument("--class", dest="cls", type=int, default=None)
    te.add_argument("--prompts", type=int, default=8)
    te.add_argument("--seed", type=int, default=0)
    te.add_argument("--use", choices=["ema", "raw"], default="ema")
    te.add_argument("--run-dir", default=None)

    ev = sub.add_parser("eval", help="TV and diversity of a checkpoint")
    ev.add_argument("--student", required=True)
    ev.add_argument("--against", choices=["data", "teacher"], default="data")
    ev.add_argument("--mode", choices=["exact", "mc"], default="exact")
    ev.add_argument("--enumerate-inits", action="store_true")
    ev.add_argument("--m-inits", type=int, default=256)
    ev.add_argument("--mc-samples", type=int, default=100_000)
    ev.add_argument("--diversity-samples", type=int, default=1000)
    ev.add_argument("--steps", type=int, default=8,
                    help="reverse steps for teacher-side distributions")
    ev.add_argument("--order", choices=["random", "confidence"], default="random",
                    help="decode order for teacher-side distributions; random "
                         "is the unbiased ancestral read, confidence the "
                         "greedy decoder")
    ev.add_argument("--cfg-w", type=float, default=0.0)
    ev.add_argument("--use", choices=["ema", "raw"], default="ema")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--run-dir", default=None)

    sw = sub.add_parser("sweep", help="ablation grids over refinement knobs")
    sw.add_argument("--ablation", required=True,
                    choices=["gan_mask_range", "gan_weight"])
    sw.add_argument("--in", dest="inp", required=True)
    sw.add_argument("--config", default=None)
    sw.add_argument("--steps", type=int, default=None)
    sw.add_argument("--seeds", default="0,1,2")
    sw.add_argument("--values", default="10,100,1000",
                    help="weights for the gan_weight ablation")
    sw.add_argument("--parallel", action="store_true")
    sw.add_argument("--run-dir", default=None)

    pl = sub.add_parser("plot", help="emit figures from run metrics")
    pl.add_argument("--run-dir", required=True)
    return p


_DISPATCH = {
    "train-teacher": _cmd_train_teacher,
    "distill": _cmd_distill,
    "refine": _cmd_refine,
    "tteo": _cmd_tteo,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "plot": _cmd_plot,
}


def run_command(argv) -> int:
    """Parse and execute; returns the process exit code instead of exiting."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _DISPATCH[args.cmd](args, argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing checkpoint: {e}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
