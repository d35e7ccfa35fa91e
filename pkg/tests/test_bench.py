from fractions import Fraction

import pytest

from groupdpo import bench as B
from groupdpo.config import BenchConfig
from groupdpo.model import ModelConfig

SMALL_MODEL = ModelConfig(vocab_size=16, embed_dim=8, context=24, blocks=1, seed=3)


@pytest.fixture(scope="module")
def small_sweep():
    cfg = BenchConfig(group_sizes=(2, 4, 6, 8), seq_lens=(12,), warmup_steps=1, measure_steps=2,
                      activation_budget=None)
    return B.run_sweep(cfg, SMALL_MODEL)


def test_sweep_order_and_header(small_sweep):
    assert [(p.executor, p.G) for p in small_sweep[:4]] == [("vanilla", g) for g in (2, 4, 6, 8)]
    text = B.to_csv(small_sweep)
    assert text.splitlines()[0] == ",".join(B.CSV_HEADER)
    rows = B.read_csv(text)
    assert len(rows) == 12
    assert all(r["status"] == "ok" for r in rows)


def test_header_mismatch_rejected():
    with pytest.raises(B.BenchError):
        B.read_csv("executor,G\nvanilla,2\n")


def test_pass_counts_by_executor(small_sweep):
    for p in small_sweep:
        if p.executor == "vanilla":
            assert (p.grad_fwd_samples, p.nograd_fwd_samples, p.bwd_calls) == (p.G, 0, 1)
        elif p.executor == "surrogate":
            assert (p.grad_fwd_samples, p.nograd_fwd_samples, p.bwd_calls) == (p.G, p.G, p.G)
        else:
            assert p.pair_passes == p.G * p.G // 4
            assert p.grad_fwd_samples == 2 * p.pair_passes


def test_fit_complexity_exact(small_sweep):
    fits = {f.executor: f for f in B.fit_complexity(small_sweep)}
    assert (fits["vanilla"].a, fits["vanilla"].b, fits["vanilla"].c) == (1, 1, 0)
    assert (fits["surrogate"].a, fits["surrogate"].b, fits["surrogate"].c) == (0, 3, 0)
    assert (fits["flatten"].a, fits["flatten"].b, fits["flatten"].c) == (0, 0, Fraction(3, 4))
    assert B.check_complexity(fits.values()) == []
    assert "G^2" in fits["flatten"].describe()


def test_fit_needs_four_group_sizes(small_sweep):
    with pytest.raises(B.BenchError):
        B.fit_complexity([p for p in small_sweep if p.G != 8])
    with pytest.raises(B.BenchError):
        B.fit_complexity([])


def test_fit_from_csv_rows(small_sweep):
    a = B.fit_complexity(small_sweep)
    b = B.fit_complexity(B.read_csv(B.to_csv(small_sweep)))
    assert [(f.a, f.b, f.c) for f in a] == [(f.a, f.b, f.c) for f in b]


def test_oom_rows_are_marked_and_sweep_continues():
    cfg = BenchConfig(group_sizes=(2, 4, 8), seq_lens=(12,), executors=("vanilla", "surrogate"),
                      warmup_steps=0, measure_steps=1, activation_budget=None)
    peaks = {(p.executor, p.G): p.peak_live_scalars for p in B.run_sweep(cfg, SMALL_MODEL)}
    budget = peaks[("vanilla", 4)]
    pts = B.run_sweep(BenchConfig(**{**cfg.__dict__, "activation_budget": budget}), SMALL_MODEL)
    status = {(p.executor, p.G): p.status for p in pts}
    assert status[("vanilla", 8)] == "oom"
    assert status[("vanilla", 4)] == "ok"
    assert all(status[("surrogate", g)] == "ok" for g in (2, 4, 8))
    row = B.read_csv(B.to_csv(pts))[2]
    assert row["status"] == "oom" and row["peak_live_scalars"] == "" and row["wall_mean_s"] == ""
    assert "oom" in B.summarize(pts)


def test_count_columns_repeat(small_sweep):
    cfg = BenchConfig(group_sizes=(2, 4, 6, 8), seq_lens=(12,), warmup_steps=1, measure_steps=2,
                      activation_budget=None)
    again = B.run_sweep(cfg, SMALL_MODEL)
    assert B.count_columns(B.read_csv(B.to_csv(small_sweep))) == B.count_columns(B.read_csv(B.to_csv(again)))
    assert B.to_csv(small_sweep, timing=False) == B.to_csv(again, timing=False)


def test_plot_data(small_sweep, tmp_path):
    pd = B.plot_data(small_sweep)
    assert pd["surrogate"]["12"]["x"] == [2, 4, 6, 8]
    assert len(set(pd["surrogate"]["12"]["y"])) == 1
    B.dump_plot_data(small_sweep, tmp_path / "plot.json")
    assert (tmp_path / "plot.json").read_text().startswith("{")


def test_bench_group_validation():
    with pytest.raises(B.BenchError):
        B.bench_group(3, 16, 16, 0)
    g = B.bench_group(4, 16, 16, 0)
    assert len(g.prompt) == 4 and all(len(s.tokens) == 12 for s in g.samples)
