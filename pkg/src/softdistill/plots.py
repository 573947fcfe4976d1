"""Figure emission from run-directory metric records."""
from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["read_metrics", "emit_plots"]


def read_metrics(run_dir: str) -> list[dict]:
    path = os.path.join(run_dir, "metrics.jsonl")
    if not os.path.exists(path):
        raise ValueError(f"no metrics found under {run_dir}")
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        raise ValueError(f"metrics file is empty: {path}")
    return records


def _save(fig, run_dir: str, name: str, made: list[str]) -> None:
    figdir = os.path.join(run_dir, "figures")
    os.makedirs(figdir, exist_ok=True)
    path = os.path.join(figdir, name)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    made.append(path)


def emit_plots(run_dir: str) -> list[str]:
    """Write loss curves, TV curves, reward traces, and ablation bars.

    Which figures appear depends on which fields the records carry; an empty
    or missing metrics file is an error and produces nothing.
    """
    records = read_metrics(run_dir)
    made: list[str] = []

    loss_keys = [k for k in ("loss", "total", "aux_loss", "d_loss")
                 if any(k in r for r in records)]
    step_recs = [r for r in records if "step" in r]
    if loss_keys and step_recs:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for key in loss_keys:
            pts = [(r["step"], r[key]) for r in step_recs if key in r]
            if pts:
                ax.plot(*zip(*pts), label=key)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(fontsize=8)
        _save(fig, run_dir, "loss.png", made)

    tv_keys = sorted({k for r in records for k in r if k.startswith("tv_")})
    if tv_keys and step_recs:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for key in tv_keys:
            pts = [(r["step"], r[key]) for r in step_recs if key in r]
            if pts:
                ax.plot(*zip(*pts), marker="o", ms=3, label=key)
        ax.set_xlabel("step")
        ax.set_ylabel("total variation")
        ax.legend(fontsize=8)
        _save(fig, run_dir, "tv_curve.png", made)

    traces = [r for r in records if "rewards_per_iteration" in r]
    if traces:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for r in traces:
            ax.plot(r["rewards_per_iteration"], alpha=0.7,
                    label=f"restart {r.get('restart', '?')}")
        ax.set_xlabel("iteration")
        ax.set_ylabel("reward")
        ax.legend(fontsize=8)
        _save(fig, run_dir, "reward_trace.png", made)

    arms = [r for r in records if "arm" in r and "final_tv" in r]
    if arms:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        names = [str(r["arm"]) for r in arms]
        vals = [r["final_tv"] for r in arms]
        ax.bar(range(len(arms)), vals)
        ax.set_xticks(range(len(arms)), names, rotation=20, fontsize=8)
        ax.set_ylabel("final TV to data")
        _save(fig, run_dir, "ablation.png", made)

    if not made:
        raise ValueError("records carry no plottable fields")
    return made
