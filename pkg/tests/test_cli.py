"""End-to-end command-line contract: exit codes, artifacts, reproducibility."""
import json
import os

import pytest

from softdistill.cli import (EXIT_CONFIG, EXIT_MISSING, EXIT_OK, EXIT_RUNTIME,
                             EXIT_USAGE, run_command)

TINY_CONFIG = """
[toyworld]
seed = 0

[model]
d_model = 32
n_layers = 1

[train]
teacher_steps = 60
teacher_batch_size = 32
steps = 20
batch_size = 8
refine_steps = 4
log_every = 10
eval_every = 10
"""


@pytest.fixture(scope="module")
def cli_env(tmp_path_factory):
    """A tiny trained teacher and distilled student shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = str(root / "tiny.ini")
    with open(cfg_path, "w") as fh:
        fh.write(TINY_CONFIG)
    teacher = str(root / "teacher.pt")
    rc = run_command(["train-teacher", "--config", cfg_path, "--out", teacher,
                      "--run-dir", str(root / "run-teacher"), "--export-table"])
    assert rc == EXIT_OK
    student = str(root / "student.pt")
    rc = run_command(["distill", "--teacher", teacher, "--config", cfg_path,
                      "--out", student, "--run-dir", str(root / "run-distill")])
    assert rc == EXIT_OK
    return {"root": root, "config": cfg_path, "teacher": teacher,
            "student": student}


# ---------------------------------------------------------------------------
# exit codes


def test_usage_error_exit_code():
    assert run_command([]) == EXIT_USAGE
    assert run_command(["no-such-command"]) == EXIT_USAGE
    assert run_command(["refine", "--mode", "polish", "--in", "x"]) == EXIT_USAGE


def test_missing_checkpoint_exit_code(cli_env, tmp_path):
    rc = run_command(["distill", "--teacher", str(tmp_path / "ghost.pt"),
                      "--config", cli_env["config"],
                      "--run-dir", str(tmp_path / "r")])
    assert rc == EXIT_MISSING


def test_malformed_config_exit_code(cli_env, tmp_path):
    bad = str(tmp_path / "bad.ini")
    with open(bad, "w") as fh:
        fh.write("[train]\nwarp_factor = 9\n")
    rc = run_command(["train-teacher", "--config", bad,
                      "--run-dir", str(tmp_path / "r")])
    assert rc == EXIT_CONFIG
    rc = run_command(["train-teacher", "--config", str(tmp_path / "ghost.ini"),
                      "--run-dir", str(tmp_path / "r2")])
    assert rc == EXIT_CONFIG


def test_runtime_error_exit_code(cli_env, tmp_path):
    # asking for a teacher-relative TV of a teacher checkpoint is meaningless
    rc = run_command(["eval", "--student", cli_env["teacher"],
                      "--against", "teacher",
                      "--run-dir", str(tmp_path / "r")])
    assert rc == EXIT_RUNTIME


def test_help_exits_zero():
    with pytest.raises(SystemExit):
        pass  # argparse help goes through run_command's SystemExit catch
    assert run_command(["--help"]) == EXIT_OK


# ---------------------------------------------------------------------------
# artifacts


def test_teacher_run_artifacts(cli_env):
    run_dir = cli_env["root"] / "run-teacher"
    assert (run_dir / "config.snapshot").exists()
    assert (run_dir / "run.json").exists()
    assert (run_dir / "metrics.jsonl").exists()
    assert (run_dir / "ground_truth.tsv").exists()
    assert os.path.exists(cli_env["teacher"])
    records = [json.loads(l) for l in open(run_dir / "metrics.jsonl")]
    assert all("loss" in r and "step" in r for r in records)
    # the eval_every callback contributed exact TV readings
    assert any("tv_data_c0" in r for r in records)
    table = open(run_dir / "ground_truth.tsv").read().splitlines()
    assert table[0] == "sequence_id\tclass\tprobability"
    assert len(table) == 1 + 2 * 256


def test_distill_run_artifacts(cli_env):
    run_dir = cli_env["root"] / "run-distill"
    snapshot = (run_dir / "config.snapshot").read_text()
    assert "[divergence]" in snapshot
    records = [json.loads(l) for l in open(run_dir / "metrics.jsonl")]
    assert records[-1]["step"] == 20
    assert "tv_data_mean" in records[-1]
    assert any("total" in r for r in records)


def test_plot_from_distill_run(cli_env, capsys):
    run_dir = str(cli_env["root"] / "run-distill")
    assert run_command(["plot", "--run-dir", run_dir]) == EXIT_OK
    printed = capsys.readouterr().out.splitlines()
    assert printed, "plot should report the figures it wrote"
    for path in printed:
        assert os.path.exists(path)
    names = {os.path.basename(p) for p in printed}
    assert "loss.png" in names


def test_plot_without_metrics_fails(tmp_path):
    os.makedirs(tmp_path / "empty-run", exist_ok=True)
    assert run_command(["plot", "--run-dir",
                        str(tmp_path / "empty-run")]) == EXIT_RUNTIME


def test_default_run_root_env(cli_env, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SOFTDISTILL_RUN_ROOT", str(tmp_path / "roots"))
    rc = run_command(["eval", "--student", cli_env["teacher"], "--steps", "2",
                      "--diversity-samples", "50"])
    assert rc == EXIT_OK
    capsys.readouterr()
    made = os.listdir(tmp_path / "roots")
    assert len(made) == 1 and made[0].startswith("eval-")


# ---------------------------------------------------------------------------
# eval behavior


def _run_eval(args, capsys):
    rc = run_command(args)
    out = capsys.readouterr().out
    assert rc == EXIT_OK
    return [json.loads(l) for l in out.splitlines()]


def test_eval_teacher_against_data(cli_env, tmp_path, capsys):
    recs = _run_eval(["eval", "--student", cli_env["teacher"], "--steps", "4",
                      "--diversity-samples", "200",
                      "--run-dir", str(tmp_path / "r")], capsys)
    per_class = [r for r in recs if "class" in r]
    assert len(per_class) == 2
    for r in per_class:
        assert 0.0 <= r["tv"] <= 1.0
        assert r["estimate_kind"] == "exact_enumeration"
        assert 1 <= r["distinct"] <= 200
    assert recs[-1]["summary"] is True


def test_eval_student_against_teacher_and_data(cli_env, tmp_path, capsys):
    for against in ("data", "teacher"):
        recs = _run_eval(["eval", "--student", cli_env["student"],
                          "--against", against, "--use", "raw",
                          "--enumerate-inits", "--diversity-samples", "200",
                          "--run-dir", str(tmp_path / f"r-{against}")], capsys)
        assert all(r["against"] == against for r in recs if "class" in r)


def test_eval_metrics_byte_identical_across_runs(cli_env, tmp_path, capsys):
    args = ["eval", "--student", cli_env["student"], "--use", "raw",
            "--mode", "mc", "--mc-samples", "2000",
            "--diversity-samples", "100", "--seed", "7"]
    run_command(args + ["--run-dir", str(tmp_path / "a")])
    run_command(args + ["--run-dir", str(tmp_path / "b")])
    capsys.readouterr()
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert a == b and a


def test_eval_order_flag(cli_env, tmp_path, capsys):
    conf = _run_eval(["eval", "--student", cli_env["teacher"], "--steps", "4",
                      "--order", "confidence", "--diversity-samples", "100",
                      "--run-dir", str(tmp_path / "c")], capsys)
    rand = _run_eval(["eval", "--student", cli_env["teacher"], "--steps", "4",
                      "--order", "random", "--diversity-samples", "100",
                      "--run-dir", str(tmp_path / "d")], capsys)
    tv_c = [r["tv"] for r in conf if "class" in r]
    tv_r = [r["tv"] for r in rand if "class" in r]
    assert tv_c != tv_r  # the decode order genuinely changes the read


# ---------------------------------------------------------------------------
# refinement, tteo, sweep


def test_refine_modes_run(cli_env, tmp_path):
    for mode in ("gan", "reward", "gan+reward"):
        out = str(tmp_path / f"{mode}.pt")
        rc = run_command(["refine", "--mode", mode, "--in", cli_env["student"],
                          "--steps", "3", "--seed", "1", "--out", out,
                          "--run-dir", str(tmp_path / f"run-{mode}")])
        assert rc == EXIT_OK
        assert os.path.exists(out)
        records = [json.loads(l)
                   for l in open(tmp_path / f"run-{mode}" / "metrics.jsonl")]
        assert records[-1]["step"] == 23  # 20 distill steps + 3 refine steps


def test_tteo_command(cli_env, tmp_path, capsys):
    rc = run_command(["tteo", "--student", cli_env["student"], "--n", "2",
                      "--iters", "1", "--prompts", "2", "--use", "raw",
                      "--run-dir", str(tmp_path / "tteo")])
    out = capsys.readouterr().out
    assert rc == EXIT_OK
    summary = json.loads(out.strip().splitlines()[-1])
    assert summary["summary"] and "mean_best_reward" in summary
    records = [json.loads(l)
               for l in open(tmp_path / "tteo" / "metrics.jsonl")]
    assert any("rewards_per_iteration" in r for r in records)
    assert any("tokens" in r for r in records)


def test_sweep_mask_range(cli_env, tmp_path, capsys):
    rc = run_command(["sweep", "--ablation", "gan_mask_range",
                      "--in", cli_env["student"], "--steps", "2",
                      "--seeds", "0", "--run-dir", str(tmp_path / "sweep")])
    out = capsys.readouterr().out
    assert rc == EXIT_OK
    summaries = [json.loads(l) for l in out.splitlines()]
    assert {s["arm"] for s in summaries} == {"none", "half", "full"}
    assert all(s["median_of"] == 1 for s in summaries)
    figures = os.listdir(tmp_path / "sweep" / "figures")
    assert figures


def test_sweep_gan_weight(cli_env, tmp_path, capsys):
    rc = run_command(["sweep", "--ablation", "gan_weight",
                      "--in", cli_env["student"], "--steps", "2",
                      "--seeds", "0", "--values", "10,100",
                      "--run-dir", str(tmp_path / "sweepw")])
    out = capsys.readouterr().out
    assert rc == EXIT_OK
    arms = {json.loads(l)["arm"] for l in out.splitlines()}
    assert arms == {"w=10", "w=100"}
