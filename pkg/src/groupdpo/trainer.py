"""Seeded training loop, evaluation, and the positive log-prob collapse probe."""

import dataclasses
import json
import logging
import math
import os

import numpy as np

from . import autodiff as ad
from . import data as D
from .engine import prepare_batch, run_step
from .model import PolicyModel, freeze_reference, sample, save_checkpoint, sequence_logprobs
from .objectives import EmptyBatchError, compute_scores
from .optim import make_optimizer
from .rng import stream

log = logging.getLogger(__name__)


class TrainAbort(RuntimeError):
    pass


@dataclasses.dataclass
class MetricsRecord:
    step: int
    loss: object
    pos_logprob: object
    neg_logprob: object
    margin: object
    groups: int
    peak_live_scalars: int
    grad_fwd_samples: int
    nograd_fwd_samples: int
    bwd_calls: int
    eval: object = None

    def to_json(self):
        return json.dumps(_clean(dataclasses.asdict(self)), sort_keys=True)


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, (np.floating,)):
        return _clean(float(obj))
    return obj


# ---------------------------------------------------------------- evaluation

@dataclasses.dataclass
class EvalSet:
    regime: str
    prompts: list
    groups: list = dataclasses.field(default_factory=list)
    teacher: object = None
    baseline_reward: float = 0.0
    response_len: int = 0
    rule: object = None
    probe: list = dataclasses.field(default_factory=list)
    beta: float = 2.0


def build_eval_set(run, reference):
    """Held-out prompts drawn from streams disjoint from training data."""
    mcfg, tcfg = run.model, run.train
    if tcfg.regime == "offline":
        ocfg = run.offline
        teacher = D.make_teacher(mcfg, ocfg)
        prompts = [D.offline_prompt(mcfg, ocfg, i, "eval") for i in range(tcfg.eval_prompts)]
        held = D.generate_offline(ocfg, mcfg, reference, split="eval", n_prompts=tcfg.eval_groups)
        es = EvalSet("offline", prompts, held.groups, teacher, response_len=ocfg.max_len,
                     beta=run.objective.beta)
        es.baseline_reward = _greedy_teacher_reward(reference.model, es)
        es.probe = [(g.prompt, s.tokens) for g in held.groups for s in g.positives]
        return es
    task = run.online
    prompts = D.online_prompts(task, mcfg.vocab_size, tcfg.eval_prompts, split="eval")
    eos = D.online_layout(mcfg.vocab_size, task.answers)[3]
    probe = [(list(p.tokens), [p.answer, eos]) for p in prompts]
    return EvalSet("online", prompts, response_len=task.max_response_len,
                   rule=D.CorrectnessRule(eos), probe=probe, beta=run.objective.beta)


def _greedy_teacher_reward(model, es):
    decodes = sample(model, np.asarray(es.prompts), es.response_len, np.random.default_rng(0),
                     temperature=0.0)
    rewards = [D.teacher_reward(es.teacher, p, [r])[0] for p, r in zip(es.prompts, decodes)]
    return float(np.mean(rewards))


def evaluate(model, es):
    """Scalar metrics on a held-out set.  Does not modify the model."""
    if not es.prompts:
        raise ValueError("evaluation set is empty")
    out = {}
    with ad.no_grad():
        if es.probe:
            out["probe_pos_logprob"] = float(np.mean(sequence_logprobs(model, es.probe, "mean").value))
        if es.regime == "offline":
            reward = _greedy_teacher_reward(model, es)
            out["teacher_reward"] = reward
            out["teacher_reward_margin"] = reward - es.baseline_reward
            if es.groups:
                margins = []
                spec_like = _ScoreSpec(es.beta)
                for g in es.groups:
                    sv = compute_scores(model, g, spec_like)
                    margins.append(sv.uP.mean() - sv.uN.mean())
                out["score_margin"] = float(np.mean(margins))
        else:
            decodes = sample(model, np.asarray([p.tokens for p in es.prompts]), es.response_len,
                             np.random.default_rng(0), temperature=0.0, eos=es.rule.eos)
            out["accuracy"] = float(np.mean([es.rule(r, p.answer) for r, p in zip(decodes, es.prompts)]))
    return out


@dataclasses.dataclass(frozen=True)
class _ScoreSpec:
    beta: float
    length_normalized: bool = True

    @property
    def aggregate(self):
        return "mean"


def primary_metric(regime):
    return "teacher_reward" if regime == "offline" else "accuracy"


# ---------------------------------------------------------------- training

@dataclasses.dataclass
class TrainResult:
    model: PolicyModel
    best_model: PolicyModel
    records: list
    best_eval: dict
    best_step: int
    reference_fingerprint: str


def initial_policy(run):
    """The starting policy; frozen, it is also the reference."""
    return PolicyModel(run.model)


def _offline_batches(n_groups, batch_groups, seed):
    epoch = 0
    while True:
        order = stream(seed, "order", epoch).permutation(n_groups)
        for s in range(0, n_groups - batch_groups + 1, batch_groups):
            yield order[s:s + batch_groups]
        epoch += 1


def train(run, dataset=None, out_dir=None, progress=None):
    """Run the configured training loop.

    Offline runs read ``dataset`` (a :class:`Dataset`) or ``run.dataset``;
    online runs sample groups from the policy each step.  When ``out_dir`` is
    given, ``metrics.jsonl``, ``best.ckpt`` and ``last.ckpt`` are written there.
    """
    tcfg, spec = run.train, run.objective
    policy = initial_policy(run)
    reference = freeze_reference(policy)

    if tcfg.regime == "offline":
        if dataset is None:
            if not run.dataset or not os.path.exists(run.dataset):
                raise TrainAbort(f"dataset file not found: {run.dataset!r}")
            dataset = D.load(run.dataset)
        if dataset.header.reference_fingerprint != reference.fingerprint():
            raise TrainAbort("dataset reference fingerprint does not match the reference model")
        if len(dataset.groups) < tcfg.batch_groups:
            raise TrainAbort("dataset has fewer groups than one batch")
        batches = _offline_batches(len(dataset.groups), tcfg.batch_groups, tcfg.seed)
    else:
        pool = D.online_prompts(run.online, run.model.vocab_size, tcfg.online_prompts, "train")
        rule = D.CorrectnessRule(D.online_layout(run.model.vocab_size, run.online.answers)[3])

    es = build_eval_set(run, reference)
    opt = make_optimizer(run.optimizer)
    key = primary_metric(tcfg.regime)
    records = []
    best_eval, best_step, best_model = None, 0, policy.copy()
    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8")
    try:
        for step in range(1, tcfg.steps + 1):
            if tcfg.regime == "offline":
                groups = [dataset.groups[i] for i in next(batches)]
            else:
                pick = stream(tcfg.seed, "online-batch", step).choice(len(pool), tcfg.batch_groups, replace=False)
                groups = D.generate_online(policy, [pool[i] for i in sorted(pick)],
                                           run.online.responses_per_prompt, rule, tcfg.seed, step,
                                           run.online.temperature, run.online.max_response_len)
                D.attach_reference_logprobs([g for g in groups if g.samples], reference)
            try:
                batch = prepare_batch(groups, spec, reference, tcfg.seed, step)
            except EmptyBatchError:
                batch = None
            if batch is None:
                rec = MetricsRecord(step, None, None, None, None, 0, 0, 0, 0, 0)
            else:
                res = run_step(tcfg.executor, policy, batch, spec, tcfg.micro_batch)
                opt.step(policy.params, res.grads)
                st = res.stats
                rec = MetricsRecord(step, res.loss, res.pos_logprob, res.neg_logprob, res.margin,
                                    len(batch.groups), st.peak_live_scalars, st.grad_fwd_samples,
                                    st.nograd_fwd_samples, st.bwd_calls)
            if step == 1 or step % tcfg.eval_interval == 0 or step == tcfg.steps:
                rec.eval = evaluate(policy, es)
                if best_eval is None or rec.eval[key] > best_eval[key]:
                    best_eval, best_step, best_model = rec.eval, step, policy.copy()
            records.append(rec)
            if metrics_fh is not None:
                metrics_fh.write(rec.to_json() + "\n")
            if progress is not None:
                progress(rec)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out_dir is not None:
        save_checkpoint(best_model, os.path.join(out_dir, "best.ckpt"),
                        extra={"step": best_step, "eval": best_eval})
        save_checkpoint(policy, os.path.join(out_dir, "last.ckpt"),
                        extra={"step": tcfg.steps, "eval": records[-1].eval})
    return TrainResult(policy, best_model, records, best_eval, best_step, reference.fingerprint())


# ---------------------------------------------------------------- stability

@dataclasses.dataclass
class StabilityVerdict:
    collapsed: bool
    initial: float
    minimum: float
    first_flag_step: object
    series: list


def stability_probe(records, key=None, tau=1.0, window=3, min_records=100):
    """Flag collapse when the positive log-prob stays below ``initial - tau`` for ``window`` evals.

    Records are MetricsRecord objects or their dict form.  The series is the
    batch ``pos_logprob`` (mean positive mean-token log-prob) at every
    evaluated step, or the eval field ``key`` when one is given.  Steps with
    no value (all groups degenerate) are skipped.
    """
    if len(records) < min_records:
        raise ValueError(f"stability probe needs at least {min_records} records, got {len(records)}")
    series = []
    for r in records:
        r = dataclasses.asdict(r) if dataclasses.is_dataclass(r) else r
        ev = r.get("eval")
        if ev is None:
            continue
        v = r.get("pos_logprob") if key is None else ev.get(key)
        if v is not None:
            series.append((r["step"], float(v)))
    if not series:
        raise ValueError("no evaluated records in stream")
    initial = series[0][1]
    run, flagged_at = 0, None
    for step, v in series:
        run = run + 1 if v < initial - tau else 0
        if run >= window and flagged_at is None:
            flagged_at = step
    return StabilityVerdict(flagged_at is not None, initial, min(v for _, v in series), flagged_at, series)


def stability_table(verdicts):
    """Text table of named verdicts, e.g. {"MPO a=0": verdict, ...}."""
    lines = [f"{'run':<22}{'initial':>10}{'minimum':>10}  collapsed"]
    for name, v in verdicts.items():
        lines.append(f"{name:<22}{v.initial:>10.3f}{v.minimum:>10.3f}  "
                     f"{'yes (step %d)' % v.first_flag_step if v.collapsed else 'no'}")
    return "\n".join(lines)
