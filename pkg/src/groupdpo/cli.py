"""groupdpo command line.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure,
3 gradient check failed.  ``GROUPDPO_OUT`` overrides the config's output
directory when no explicit ``--out`` is given.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys

from . import bench as B
from . import data as D
from .config import ConfigError, RunConfig, dump_config, load_config
from .engine import equivalence_report
from .model import freeze_reference, load_checkpoint
from .objectives import KINDS, ObjectiveError
from .trainer import TrainAbort, build_eval_set, evaluate, initial_policy, train

OUT_ENV = "GROUPDPO_OUT"

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

VALIDATION_ERRORS = (ConfigError, D.DataConfigError, D.DatasetParseError, D.DatasetValidationError,
                     ObjectiveError, TrainAbort, B.BenchError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config(args):
    return load_config(args.config) if args.config else RunConfig()


def _out_dir(args, cfg):
    return args.out or os.environ.get(OUT_ENV) or cfg.output_dir


def _open_for_write(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    return path


def cmd_gen_data(args):
    cfg = _config(args)
    reference = freeze_reference(initial_policy(cfg))
    if cfg.train.regime == "offline":
        ds = D.generate_offline(cfg.offline, cfg.model, reference)
    else:
        cfg.online.validate(cfg.model.vocab_size)
        prompts = D.online_prompts(cfg.online, cfg.model.vocab_size, cfg.train.online_prompts, "train")
        eos = D.online_layout(cfg.model.vocab_size, cfg.online.answers)[3]
        groups = D.generate_online(reference.model, prompts, cfg.online.responses_per_prompt,
                                   D.CorrectnessRule(eos), cfg.online.seed, 0, cfg.online.temperature,
                                   cfg.online.max_response_len)
        D.attach_reference_logprobs([g for g in groups if g.samples], reference)
        header = D.DatasetHeader(regime="online", group_size=cfg.online.responses_per_prompt,
                                 balance="unbalanced", seed=cfg.online.seed,
                                 reference_fingerprint=reference.fingerprint())
        ds = D.Dataset(header, groups)
    path = args.out or cfg.dataset or os.path.join(_out_dir(args, cfg), "dataset.jsonl")
    D.save(ds, _open_for_write(path))
    degenerate = sum(g.degenerate for g in ds.groups)
    print(f"wrote {path}")
    print(f"groups={len(ds.groups)} discarded={ds.header.discarded} degenerate={degenerate}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    if args.dataset:
        cfg = dataclasses.replace(cfg, dataset=args.dataset)
    out = _out_dir(args, cfg)
    dataset = None
    if cfg.train.regime == "offline":
        if not cfg.dataset or not os.path.exists(cfg.dataset):
            raise TrainAbort(f"dataset file not found: {cfg.dataset!r}")
        reference = freeze_reference(initial_policy(cfg))
        dataset = D.load(cfg.dataset, reference_fingerprint=reference.fingerprint())
    os.makedirs(out, exist_ok=True)
    dump_config(cfg, os.path.join(out, "config.json"))

    def progress(rec):
        if rec.eval is not None:
            logging.info("step %d loss=%s eval=%s", rec.step, rec.loss, json.dumps(rec.eval, sort_keys=True))

    res = train(cfg, dataset=dataset, out_dir=out, progress=progress)
    last = next(r.eval for r in reversed(res.records) if r.eval is not None)
    print(f"wrote {out}/metrics.jsonl ({len(res.records)} records), best.ckpt, last.ckpt")
    print(f"best step {res.best_step}: {json.dumps(res.best_eval, sort_keys=True)}")
    print(f"last step {res.records[-1].step}: {json.dumps(last, sort_keys=True)}")
    return EXIT_OK


def cmd_grad_check(args):
    if args.seeds < 1:
        raise UsageError("grad-check: --seeds must be >= 1")
    cfg = _config(args)
    kinds = args.kinds or [k for k in KINDS]
    lines, ok = [], True
    for kind in kinds:
        spec = dataclasses.replace(cfg.objective, kind=kind)
        rep = equivalence_report(spec, range(args.seeds), cfg.model, tol=args.tol)
        worst = max(rep.rows, key=lambda r: r.rel_l2)
        n_pass = sum(r.passed for r in rep.rows)
        lines.append(f"{'PASS' if rep.passed else 'FAIL'} {kind:<8} {n_pass}/{len(rep.rows)} "
                     f"worst_rel_l2={worst.rel_l2:.3e} (seed {worst.seed})")
        if args.verbose:
            lines.append(rep.summary())
        ok = ok and rep.passed
    lines.append(f"grad-check {'passed' if ok else 'FAILED'} at rel_l2 <= {args.tol:g}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        with open(_open_for_write(args.out), "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK if ok else EXIT_CHECK


def _parse_grid(spec, cfg):
    if spec in (None, "canonical"):
        return cfg
    updates = {}
    for part in spec.split(";"):
        key, _, vals = part.partition("=")
        key = key.strip()
        try:
            if key == "G":
                updates["group_sizes"] = tuple(int(v) for v in vals.split(","))
            elif key == "T":
                updates["seq_lens"] = tuple(int(v) for v in vals.split(","))
            elif key == "executors":
                updates["executors"] = tuple(v.strip() for v in vals.split(","))
            else:
                raise UsageError(f"bench: unknown grid key {key!r}")
        except ValueError:
            raise UsageError(f"bench: bad grid values in {part!r}") from None
    return dataclasses.replace(cfg, **updates)


def cmd_bench(args):
    cfg = _config(args)
    grid = _parse_grid(args.grid, cfg.bench)
    if args.budget is not None:
        grid = dataclasses.replace(grid, activation_budget=args.budget or None)
    out = args.out or os.path.join(_out_dir(args, cfg), "bench.csv")

    def progress(p):
        logging.info("%s G=%d T=%d %s", p.executor, p.G, p.T, p.status)

    points = B.run_sweep(grid, cfg.model, progress=progress)
    B.to_csv(points, _open_for_write(out), timing=not args.no_timing)
    if args.plot_data:
        B.dump_plot_data(points, _open_for_write(args.plot_data))
    print(B.summarize(points))
    print(f"wrote {out}")
    try:
        fits = B.fit_complexity(points)
    except B.BenchError as exc:
        print(f"complexity fit skipped: {exc}")
        return EXIT_OK
    for f in fits:
        print(f.describe())
    for problem in B.check_complexity(fits):
        print(f"warning: {problem}")
    return EXIT_OK


def cmd_evaluate(args):
    cfg = _config(args)
    model = load_checkpoint(args.checkpoint)
    if model.config != cfg.model:
        raise ConfigError("checkpoint model config differs from the run config")
    reference = freeze_reference(initial_policy(cfg))
    metrics = evaluate(model, build_eval_set(cfg, reference))
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def build_parser():
    p = _Parser(prog="groupdpo", description="Group preference optimization on a toy language model.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a grouped preference dataset")
    g.add_argument("--config")
    g.add_argument("--out", help="dataset path (default: <output dir>/dataset.jsonl)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a policy; writes metrics and checkpoints")
    t.add_argument("--config")
    t.add_argument("--dataset", help="overrides the config's dataset path")
    t.add_argument("--out", help="output directory")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("grad-check", help="surrogate vs vanilla gradients on random batches")
    c.add_argument("--config")
    c.add_argument("--seeds", type=int, default=50)
    c.add_argument("--tol", type=float, default=1e-6)
    c.add_argument("--kinds", nargs="+", choices=KINDS)
    c.add_argument("--out", help="also write the report here")
    c.add_argument("-v", "--verbose", action="store_true")
    c.set_defaults(func=cmd_grad_check)

    b = sub.add_parser("bench", help="memory and pass-count sweep")
    b.add_argument("--config")
    b.add_argument("--grid", default="canonical",
                   help='"canonical" or e.g. "G=2,4,8,16;T=32;executors=vanilla,surrogate"')
    b.add_argument("--out", help="CSV path (default: <output dir>/bench.csv)")
    b.add_argument("--plot-data", help="write per-executor x/y series as JSON")
    b.add_argument("--budget", type=int, help="activation budget override; 0 disables")
    b.add_argument("--no-timing", action="store_true", help="leave wall-clock columns empty")
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on the held-out set")
    e.add_argument("--config")
    e.add_argument("--checkpoint", required=True)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
