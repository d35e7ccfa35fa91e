"""Efficiency sweep over executors, group sizes and sequence lengths.

Each point is one balanced All-Pairs group of size G (G/2 positives, G/2
negatives) whose samples all have total length T, with a prompt of T // 4
tokens.  Three full warmup steps are discarded, then five steps are measured.
Every step includes the SGD update on a private copy of the policy, so wall
time covers the optimizer too.  There is no allocator here, so wall time is
indicative only.

Pass counts and peak live scalars are deterministic integers.  Wall-clock
columns are reported as measured and never compared.

A point whose tape would exceed ``activation_budget`` live scalars is written
with status ``oom`` and empty measurement columns; the sweep carries on.
"""

import csv
import dataclasses
import io
import json
import statistics
from fractions import Fraction

from .autodiff import ActivationBudgetExceeded
from .data import PromptGroup, ResponseSample
from .engine import prepare_batch, run_step
from .model import PolicyModel, freeze_reference
from .objectives import ObjectiveSpec
from .optim import SGD
from .rng import stream

CSV_HEADER = (
    "executor", "G", "n_pos", "n_neg", "T", "micro_batch", "status",
    "peak_live_scalars", "grad_fwd_samples", "nograd_fwd_samples", "bwd_calls",
    "pair_passes", "model_passes", "wall_mean_s", "wall_std_s",
)
WALL_COLUMNS = ("wall_mean_s", "wall_std_s")
COUNT_COLUMNS = tuple(c for c in CSV_HEADER if c not in WALL_COLUMNS)


class BenchError(ValueError):
    pass


@dataclasses.dataclass
class BenchPoint:
    executor: str
    G: int
    n_pos: int
    n_neg: int
    T: int
    micro_batch: int
    status: str = "ok"
    peak_live_scalars: object = None
    grad_fwd_samples: object = None
    nograd_fwd_samples: object = None
    bwd_calls: object = None
    pair_passes: object = None
    model_passes: object = None
    wall_mean_s: object = None
    wall_std_s: object = None

    def row(self):
        out = []
        for name in CSV_HEADER:
            v = getattr(self, name)
            out.append("" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v)))
        return out


def bench_group(G, T, vocab_size, seed):
    """One balanced group of G responses, each prompt + response = T tokens."""
    if G < 2 or G % 2:
        raise BenchError(f"group size must be even and >= 2, got {G}")
    plen = max(1, T // 4)
    rlen = T - plen
    if rlen < 1:
        raise BenchError(f"sequence length {T} too short")
    rng = stream(seed, "bench-group", G, T)
    prompt = [int(t) for t in rng.integers(0, vocab_size, plen)]

    def resp(role):
        return ResponseSample([int(t) for t in rng.integers(0, vocab_size, rlen)], role)

    half = G // 2
    return PromptGroup(0, prompt, [resp("positive") for _ in range(half)],
                       [resp("negative") for _ in range(half)])


def measure_point(policy, reference, spec, executor, G, T, micro_batch=1, budget=None,
                  warmup=3, measure=5, lr=1e-3, seed=17):
    group = bench_group(G, T, policy.config.vocab_size, seed)
    batch = prepare_batch([group], spec, reference, seed, 0)
    model = policy.copy()
    opt = SGD(lr)
    point = BenchPoint(executor, G, len(group.positives), len(group.negatives), T,
                       micro_batch if executor == "surrogate" else 1)
    stats, walls = [], []
    try:
        for i in range(warmup + measure):
            res = run_step(executor, model, batch, spec, micro_batch, budget)
            opt.step(model.params, res.grads)
            if i >= warmup:
                stats.append(res.stats)
                walls.append(res.stats.wall_time)
    except ActivationBudgetExceeded:
        point.status = "oom"
        return point
    last = stats[-1]
    point.peak_live_scalars = max(s.peak_live_scalars for s in stats)
    point.grad_fwd_samples = last.grad_fwd_samples
    point.nograd_fwd_samples = last.nograd_fwd_samples
    point.bwd_calls = last.bwd_calls
    point.pair_passes = last.pair_passes
    point.model_passes = last.model_passes
    point.wall_mean_s = float(statistics.fmean(walls))
    point.wall_std_s = float(statistics.stdev(walls)) if len(walls) > 1 else 0.0
    return point


def run_sweep(bench_cfg, model_config, objective=None, progress=None):
    """Run the grid in serial order (executor, T, G); returns a list of BenchPoint.

    The objective defaults to All-Pairs; its kind must be one the flatten
    executor supports if flatten is in the grid.
    """
    spec = objective or ObjectiveSpec(kind="AllPairs")
    policy = PolicyModel(model_config)
    reference = freeze_reference(policy)
    points = []
    for executor in bench_cfg.executors:
        for T in bench_cfg.seq_lens:
            for G in bench_cfg.group_sizes:
                p = measure_point(policy, reference, spec, executor, G, T, bench_cfg.micro_batch,
                                  bench_cfg.activation_budget, bench_cfg.warmup_steps,
                                  bench_cfg.measure_steps, seed=bench_cfg.seed)
                points.append(p)
                if progress is not None:
                    progress(p)
    return points


def to_csv(points, path=None, timing=True):
    """CSV text with the documented header.  ``timing=False`` blanks the wall-clock columns."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for p in points:
        row = p.row()
        if not timing:
            row = ["" if c in WALL_COLUMNS else v for c, v in zip(CSV_HEADER, row)]
        w.writerow(row)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def read_csv(path_or_text):
    if "\n" in path_or_text:
        text = path_or_text
    else:
        with open(path_or_text, encoding="utf-8") as fh:
            text = fh.read()
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != CSV_HEADER:
        raise BenchError("CSV header does not match the bench schema")
    return rows


def count_columns(rows):
    """The deterministic part of each row, for rerun comparisons."""
    return [tuple(r[c] for c in COUNT_COLUMNS) for r in rows]


def plot_data(points, metric="peak_live_scalars"):
    """{executor: {T: {"x": [G...], "y": [...]}}} over rows that completed."""
    out = {}
    for p in points:
        if p.status != "ok":
            continue
        s = out.setdefault(p.executor, {}).setdefault(str(p.T), {"x": [], "y": []})
        s["x"].append(p.G)
        s["y"].append(getattr(p, metric))
    return out


def dump_plot_data(points, path):
    data = {m: plot_data(points, m) for m in ("peak_live_scalars", "model_passes", "wall_mean_s")}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- complexity fit

@dataclasses.dataclass
class ComplexityFit:
    executor: str
    T: int
    a: Fraction
    b: Fraction
    c: Fraction
    n_points: int

    def describe(self):
        return f"{self.executor:<10} T={self.T:<3} passes = {float(self.a):g} + {float(self.b):g} G + {float(self.c):g} G^2"


def _exact_quadratic_fit(xs, ys):
    """Least-squares a + b x + c x^2 in exact rational arithmetic."""
    rows = [[Fraction(1), Fraction(x), Fraction(x) ** 2] for x in xs]
    ata = [[sum(r[i] * r[j] for r in rows) for j in range(3)] for i in range(3)]
    aty = [sum(r[i] * Fraction(y) for r, y in zip(rows, ys)) for i in range(3)]
    # Gauss-Jordan on the 3x3 normal equations
    m = [ata[i] + [aty[i]] for i in range(3)]
    for col in range(3):
        piv = next(r for r in range(col, 3) if m[r][col] != 0)
        m[col], m[piv] = m[piv], m[col]
        m[col] = [v / m[col][col] for v in m[col]]
        for r in range(3):
            if r != col and m[r][col] != 0:
                f = m[r][col]
                m[r] = [vr - f * vc for vr, vc in zip(m[r], m[col])]
    return m[0][3], m[1][3], m[2][3]


def fit_complexity(rows, min_points=4):
    """Fit model passes against G per (executor, T).  ``rows`` are BenchPoints or CSV dicts."""
    series = {}
    for r in rows:
        r = dataclasses.asdict(r) if dataclasses.is_dataclass(r) else r
        if r["status"] != "ok":
            continue
        series.setdefault((r["executor"], int(r["T"])), []).append((int(r["G"]), int(r["model_passes"])))
    if not series:
        raise BenchError("no completed bench rows to fit")
    fits = []
    for (ex, T), pts in sorted(series.items()):
        gs = sorted(set(g for g, _ in pts))
        if len(gs) < min_points:
            raise BenchError(f"{ex} at T={T}: need >= {min_points} group sizes, have {len(gs)}")
        a, b, c = _exact_quadratic_fit([g for g, _ in pts], [y for _, y in pts])
        fits.append(ComplexityFit(ex, T, a, b, c, len(pts)))
    return fits


def check_complexity(fits):
    """Problems with the expected pass-count shapes; an empty list means all good."""
    problems = []
    for f in fits:
        if f.executor == "flatten":
            if f.c <= 0 or f.b != 0:
                problems.append(f"flatten T={f.T}: expected pure G^2 growth, got b={f.b}, c={f.c}")
        elif f.c != 0:
            problems.append(f"{f.executor} T={f.T}: G^2 model-pass term {f.c} is not zero")
    return problems


def calibrate_budget(model_config, objective=None, trip=("vanilla", 32, 64), seq_lens=(16, 32, 64),
                     group_sizes=(2, 4, 8, 16, 32), executors=("vanilla", "flatten", "surrogate"), seed=17):
    """Smallest budget window in which only the ``trip`` point overflows.

    Returns (lo, hi): any budget b with lo <= b < hi trips exactly that point.
    """
    spec = objective or ObjectiveSpec(kind="AllPairs")
    policy = PolicyModel(model_config)
    reference = freeze_reference(policy)
    peaks = {}
    for ex in executors:
        for T in seq_lens:
            for G in group_sizes:
                p = measure_point(policy, reference, spec, ex, G, T, warmup=0, measure=1, seed=seed)
                peaks[(ex, G, T)] = p.peak_live_scalars
    target = peaks.pop(tuple(trip))
    lo = max(peaks.values())
    if lo >= target:
        raise BenchError("no budget separates the trip point from the rest of the grid")
    return lo, target


def summarize(points):
    lines = [f"{'executor':<10}{'G':>4}{'T':>4}  {'status':<6}{'peak':>10}{'passes':>8}{'pairs':>7}{'wall_ms':>10}"]
    for p in points:
        if p.status != "ok":
            lines.append(f"{p.executor:<10}{p.G:>4}{p.T:>4}  {p.status:<6}")
            continue
        lines.append(f"{p.executor:<10}{p.G:>4}{p.T:>4}  {p.status:<6}{p.peak_live_scalars:>10}"
                     f"{p.model_passes:>8}{p.pair_passes:>7}{1000 * p.wall_mean_s:>10.2f}")
    return "\n".join(lines)

