import dataclasses
import json

import pytest

from groupdpo import bench as B
from groupdpo import cli
from groupdpo import data as D
from groupdpo import engine
from groupdpo.config import OptimizerConfig, RunConfig, TrainConfig, dump_config
from groupdpo.model import ModelConfig
from groupdpo.objectives import ObjectiveSpec, coefficients

SMALL_MODEL = ModelConfig(vocab_size=16, embed_dim=8, context=24, blocks=1, seed=3)


def write_config(path, **overrides):
    run = RunConfig(
        model=SMALL_MODEL,
        objective=ObjectiveSpec(kind="MPO"),
        optimizer=OptimizerConfig(lr=1e-2),
        train=TrainConfig(steps=6, eval_interval=3, batch_groups=4, eval_prompts=8, eval_groups=4),
        offline=D.OfflineGenConfig(prompts=16, candidates=8, k=2, max_len=6),
        output_dir=str(path.parent / "runs"),
    )
    run = dataclasses.replace(run, **overrides)
    dump_config(run, path)
    return path


@pytest.fixture
def cfg(tmp_path):
    return write_config(tmp_path / "config.json")


def test_usage_errors_exit_1(capsys):
    assert cli.main([]) == cli.EXIT_INVALID
    assert cli.main(["frobnicate"]) == cli.EXIT_INVALID
    assert cli.main(["grad-check", "--seeds", "0"]) == cli.EXIT_INVALID
    assert cli.main(["grad-check", "--seeds", "many"]) == cli.EXIT_INVALID
    assert "error" in capsys.readouterr().err


def test_bad_config_exits_1(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"train": {"stepz": 3}}))
    assert cli.main(["gen-data", "--config", str(p)]) == cli.EXIT_INVALID
    p.write_text("{not json")
    assert cli.main(["gen-data", "--config", str(p)]) == cli.EXIT_INVALID


def test_missing_config_file_exits_2(tmp_path):
    assert cli.main(["gen-data", "--config", str(tmp_path / "nope.json")]) == cli.EXIT_RUNTIME


def test_gen_data_and_train(cfg, tmp_path, capsys):
    ds = tmp_path / "ds.jsonl"
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(ds)]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "groups=" in out and "discarded=" in out
    assert D.load(ds).header.regime == "offline"
    run_dir = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--dataset", str(ds), "--out", str(run_dir)]) == cli.EXIT_OK
    for name in ("metrics.jsonl", "best.ckpt", "last.ckpt", "config.json"):
        assert (run_dir / name).exists()
    assert len((run_dir / "metrics.jsonl").read_text().splitlines()) == 6
    out = capsys.readouterr().out
    assert "best step" in out and "last step" in out
    assert cli.main(["evaluate", "--config", str(cfg), "--checkpoint", str(run_dir / "last.ckpt")]) == cli.EXIT_OK
    assert "teacher_reward" in capsys.readouterr().out


def test_train_rerun_identical(cfg, tmp_path):
    ds = tmp_path / "ds.jsonl"
    cli.main(["gen-data", "--config", str(cfg), "--out", str(ds)])
    for d in ("a", "b"):
        cli.main(["train", "--config", str(cfg), "--dataset", str(ds), "--out", str(tmp_path / d)])
    for name in ("metrics.jsonl", "best.ckpt", "last.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_without_dataset_fails(cfg, tmp_path):
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == cli.EXIT_INVALID
    assert cli.main(["train", "--config", str(cfg), "--dataset", str(tmp_path / "none.jsonl")]) == cli.EXIT_INVALID


def test_train_rejects_foreign_dataset(cfg, tmp_path):
    other = write_config(tmp_path / "other.json", model=dataclasses.replace(SMALL_MODEL, seed=9))
    ds = tmp_path / "ds.jsonl"
    cli.main(["gen-data", "--config", str(other), "--out", str(ds)])
    assert cli.main(["train", "--config", str(cfg), "--dataset", str(ds)]) == cli.EXIT_INVALID


def test_output_env_override(cfg, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "envout"))
    assert cli.main(["gen-data", "--config", str(cfg)]) == cli.EXIT_OK
    assert (tmp_path / "envout" / "dataset.jsonl").exists()


def test_gen_data_reports_tie_discards(tmp_path, capsys):
    # one-token responses over four tokens: boundary ties are common
    p = write_config(tmp_path / "ties.json", model=dataclasses.replace(SMALL_MODEL, vocab_size=4),
                     offline=D.OfflineGenConfig(prompts=20, candidates=8, k=2, min_len=1, max_len=1))
    assert cli.main(["gen-data", "--config", str(p), "--out", str(tmp_path / "d.jsonl")]) == cli.EXIT_OK
    line = capsys.readouterr().out.splitlines()[-1]
    fields = dict(kv.split("=") for kv in line.split())
    assert int(fields["discarded"]) > 0
    assert int(fields["groups"]) + int(fields["discarded"]) == 20


def test_gen_data_online(tmp_path, capsys):
    p = write_config(tmp_path / "on.json", train=TrainConfig(regime="online", online_prompts=12),
                     online=D.OnlineTaskConfig(answers=4))
    assert cli.main(["gen-data", "--config", str(p), "--out", str(tmp_path / "on.jsonl")]) == cli.EXIT_OK
    assert D.load(tmp_path / "on.jsonl").header.regime == "online"


def test_unwritable_output_exits_2(cfg, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(blocker / "sub" / "d.jsonl")]) == cli.EXIT_RUNTIME


def test_grad_check_passes(cfg, tmp_path, capsys):
    report = tmp_path / "gc.txt"
    assert cli.main(["grad-check", "--config", str(cfg), "--seeds", "3", "--out", str(report)]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "grad-check passed" in out
    assert report.read_text() == out


def test_grad_check_catches_sign_bug(cfg, monkeypatch, capsys):
    def flipped(spec, score_groups):
        cv = coefficients(spec, score_groups)
        return dataclasses.replace(cv, values=-cv.values)

    monkeypatch.setattr(engine, "coefficients", flipped)
    rc = cli.main(["grad-check", "--config", str(cfg), "--seeds", "2", "--kinds", "MPO"])
    assert rc == cli.EXIT_CHECK
    assert "FAILED" in capsys.readouterr().out


def test_bench_small_grid(cfg, tmp_path, capsys):
    out = tmp_path / "bench.csv"
    plot = tmp_path / "plot.json"
    rc = cli.main(["bench", "--config", str(cfg), "--grid", "G=2,4,6,8;T=12", "--out", str(out),
                   "--plot-data", str(plot), "--budget", "0"])
    assert rc == cli.EXIT_OK
    rows = B.read_csv(str(out))
    assert len(rows) == 12
    assert plot.exists()
    assert "passes =" in capsys.readouterr().out


def test_bench_bad_grid(cfg):
    assert cli.main(["bench", "--config", str(cfg), "--grid", "G=a,b"]) == cli.EXIT_INVALID
    assert cli.main(["bench", "--config", str(cfg), "--grid", "H=2"]) == cli.EXIT_INVALID


@pytest.mark.slow
def test_bench_canonical_grid(tmp_path):
    out = tmp_path / "bench.csv"
    assert cli.main(["bench", "--out", str(out), "--no-timing"]) == cli.EXIT_OK
    text = out.read_text()
    assert text.splitlines()[0] == ",".join(B.CSV_HEADER)
    rows = B.read_csv(str(out))
    assert len(rows) == 45
    oom = [(r["executor"], r["G"], r["T"]) for r in rows if r["status"] == "oom"]
    assert oom == [("vanilla", "32", "64")]
