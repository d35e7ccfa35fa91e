"""Three executors for one training step of a group objective.

* vanilla   -- one grad-enabled forward over every sample, the group losses
  built on the tape, a single backward.  All activations are live at once.
* flatten   -- pairwise objectives only: each (positive, negative) pair gets
  its own forward/backward, gradients accumulated with pair weights.
* surrogate -- a no-grad pass gives detached scores, per-sample coefficients
  c_i = (1/G) d phi_g / d u_i are frozen, then sum_i c_i u_i (plus the NLL
  term) is backpropagated in micro-batches of m samples.

All three return the same loss value and, to rounding error, the same
parameter gradient.
"""

import dataclasses
import math
import time

import numpy as np

from . import autodiff as ad
from .data import PromptGroup, ResponseSample, attach_reference_logprobs, select_pair
from .model import ModelConfig, PolicyModel, freeze_reference, pack, token_logprobs
from .objectives import (
    EmptyBatchError, ObjectiveError, ObjectiveSpec, coefficients, phi, phi_tensor,
    reference_logprobs,
)
from .rng import stream

EXECUTORS = ("vanilla", "flatten", "surrogate")
FLATTEN_KINDS = ("AllPairs", "DPO")


@dataclasses.dataclass
class PassStats:
    grad_fwd_samples: int = 0
    nograd_fwd_samples: int = 0
    grad_fwd_calls: int = 0
    bwd_calls: int = 0
    pair_passes: int = 0
    pair_interactions: int = 0
    peak_live_scalars: int = 0
    wall_time: float = 0.0

    @property
    def model_passes(self):
        """Sample-level forwards (grad and no-grad) plus backward calls."""
        return self.grad_fwd_samples + self.nograd_fwd_samples + self.bwd_calls


@dataclasses.dataclass
class StepResult:
    loss: float
    grads: ad.GradStore
    stats: PassStats
    pos_logprob: float
    neg_logprob: float
    margin: float


@dataclasses.dataclass
class PreparedBatch:
    """Groups reduced to what the objective consumes.

    ``pref`` lists groups entering the preference term (both sides present);
    ``nll`` lists groups whose positives enter the NLL term.  Samples are laid
    out flat, per group positives first.
    """

    groups: list
    pref: list
    nll: list
    pairs: list
    ref: np.ndarray
    spans: list

    @property
    def n_samples(self):
        return len(self.pairs)

    def positions(self, g):
        start, P, N = self.spans[g]
        return np.arange(start, start + P), np.arange(start + P, start + P + N)


def prepare_batch(groups, spec, reference=None, seed=0, step=0):
    """Filter degenerate groups, select DPO pairs, and lay samples out flat.

    DPO pairs are drawn from ``stream(seed, "pair", step, group_id)`` so every
    executor sees the same pair.
    """
    kept = []
    for g in groups:
        if spec.kind == "RFT":
            if g.positives:
                kept.append(PromptGroup(g.group_id, g.prompt, list(g.positives), []))
            continue
        if g.degenerate:
            if spec.nll_on_degenerate and g.positives and spec.alpha > 0:
                kept.append(PromptGroup(g.group_id, g.prompt, list(g.positives), []))
            continue
        if spec.kind == "DPO":
            rng = stream(seed, "pair", step, g.group_id) if spec.pair_policy == "random" else None
            p, n = select_pair(g, spec.pair_policy, rng)
            g = PromptGroup(g.group_id, g.prompt, [p], [n])
        kept.append(g)
    pref = [i for i, g in enumerate(kept) if g.positives and g.negatives and spec.has_preference_term]
    nll = [i for i, g in enumerate(kept) if g.positives and spec.alpha > 0]
    if not pref and not nll:
        raise EmptyBatchError("batch has no contributing groups")
    pairs, refs, spans = [], [], []
    for g in kept:
        spans.append((len(pairs), len(g.positives), len(g.negatives)))
        pairs.extend((g.prompt, s.tokens) for s in g.samples)
        if spec.has_preference_term:
            refs.extend(reference_logprobs(g, spec, reference))
        else:
            refs.extend([0.0] * g.size)
    return PreparedBatch(kept, pref, nll, pairs, np.asarray(refs, dtype=float), spans)


def _agg_weights(mask, aggregate):
    return mask / mask.sum(axis=1, keepdims=True) if aggregate == "mean" else mask


def _diagnostics(batch, lp_mean, scores):
    pos = [i for g in range(len(batch.groups)) for i in batch.positions(g)[0]]
    neg = [i for g in range(len(batch.groups)) for i in batch.positions(g)[1]]
    margins = []
    for g in batch.pref:
        ip, ineg = batch.positions(g)
        margins.append(scores[ip].mean() - scores[ineg].mean())
    return (float(np.mean(lp_mean[pos])) if pos else float("nan"),
            float(np.mean(lp_mean[neg])) if neg else float("nan"),
            float(np.mean(margins)) if margins else float("nan"))


def _reference_loss(batch, spec, scores, lp_mean):
    """Batch objective value from per-sample numpy scores and mean-token log-probs."""
    loss = 0.0
    for g in batch.pref:
        ip, ineg = batch.positions(g)
        loss += phi(spec.kind, scores[ip], scores[ineg]) / len(batch.pref)
    for g in batch.nll:
        ip, _ = batch.positions(g)
        loss += -spec.alpha * lp_mean[ip].mean() / len(batch.nll)
    return loss


def step_vanilla(policy, batch, spec, budget=None):
    stats = PassStats()
    tape = ad.Tape(budget)
    t0 = time.perf_counter()
    with ad.use_tape(tape):
        inputs, targets, mask = pack(batch.pairs, context=policy.config.context)
        lp_tok = token_logprobs(policy, inputs, targets)
        stats.grad_fwd_samples += batch.n_samples
        stats.grad_fwd_calls += 1
        dt = lp_tok.dtype
        mean_w = _agg_weights(mask, "mean").astype(dt)
        lp_mean = ad.sum(ad.mul(lp_tok, mean_w), axis=1)
        lp_agg = lp_mean if spec.aggregate == "mean" else ad.sum(ad.mul(lp_tok, mask.astype(dt)), axis=1)
        u = ad.scale(lp_agg - batch.ref.astype(dt), spec.beta)
        terms = []
        for g in batch.pref:
            ip, ineg = batch.positions(g)
            terms.append(ad.scale(phi_tensor(spec.kind, ad.index(u, ip), ad.index(u, ineg)),
                                  1.0 / len(batch.pref)))
            stats.pair_interactions += len(ip) * len(ineg)
        for g in batch.nll:
            ip, _ = batch.positions(g)
            terms.append(ad.scale(ad.mean(ad.index(lp_mean, ip)), -spec.alpha / len(batch.nll)))
        loss = terms[0]
        for t in terms[1:]:
            loss = loss + t
        loss_value = float(loss.value)
        scores, lpm = u.value.astype(float), lp_mean.value.astype(float)
        grads = ad.backward(loss)
        stats.bwd_calls += 1
    stats.peak_live_scalars = tape.peak_live_scalars
    stats.wall_time = time.perf_counter() - t0
    return StepResult(loss_value, grads, stats, *_diagnostics(batch, lpm, scores))


def step_surrogate(policy, batch, spec, micro_batch=1, budget=None, coeff_fn=None):
    """Coefficient pass without grad, then micro-batched backprop of sum_i c_i u_i + NLL.

    ``coeff_fn`` overrides the coefficient computation (used by tests to
    inject faults); it receives ``(spec, score_groups)``.
    """
    if micro_batch < 1:
        raise ValueError("micro_batch must be >= 1")
    stats = PassStats()
    tape = ad.Tape(budget)
    t0 = time.perf_counter()
    S = batch.n_samples
    with ad.use_tape(tape):
        inputs, targets, mask = pack(batch.pairs, context=policy.config.context)
        with ad.no_grad():
            lp_tok = token_logprobs(policy, inputs, targets).value.astype(float)
        stats.nograd_fwd_samples += S
        lens = mask.sum(axis=1)
        lp_sum = (lp_tok * mask).sum(axis=1)
        lp_mean = (lp_tok * _agg_weights(mask, "mean")).sum(axis=1)
        lp_agg = lp_mean if spec.aggregate == "mean" else lp_sum
        scores = spec.beta * (lp_agg - batch.ref)

        # per-sample weights on the aggregated log-prob and on the mean log-prob
        coef = np.zeros(S)
        if batch.pref:
            score_groups = [tuple(scores[ix] for ix in batch.positions(g)) if g in batch.pref else None
                            for g in range(len(batch.groups))]
            cv = (coeff_fn or coefficients)(spec, score_groups)
            coef = cv.values
            for g in batch.pref:
                ip, ineg = batch.positions(g)
                stats.pair_interactions += len(ip) * len(ineg)
        nll_w = np.zeros(S)
        for g in batch.nll:
            ip, _ = batch.positions(g)
            nll_w[ip] = spec.alpha / (len(batch.nll) * len(ip))
        per_token = coef * spec.beta * (1.0 / lens if spec.aggregate == "mean" else 1.0) - nll_w / lens
        const = -np.sum(coef * spec.beta * batch.ref)

        loss_value = _reference_loss(batch, spec, scores, lp_mean)
        grads = ad.GradStore()
        for start in range(0, S, micro_batch):
            idx = list(range(start, min(S, start + micro_batch)))
            mb_pairs = [batch.pairs[i] for i in idx]
            mi, mt, mm = pack(mb_pairs, context=policy.config.context)
            lp = token_logprobs(policy, mi, mt)
            stats.grad_fwd_samples += len(idx)
            stats.grad_fwd_calls += 1
            w = (mm * per_token[idx][:, None]).astype(lp.dtype)
            # the reference part of u_i is constant; kept so the term reads as sum c_i u_i
            term = ad.sum(ad.mul(lp, w)) + const * len(idx) / S
            g = ad.backward(term)
            stats.bwd_calls += 1
            for name in sorted(g):
                grads[name] = g[name] if name not in grads else grads[name] + g[name]
    stats.peak_live_scalars = tape.peak_live_scalars
    stats.wall_time = time.perf_counter() - t0
    return StepResult(loss_value, grads, stats, *_diagnostics(batch, lp_mean, scores))


def step_flatten(policy, batch, spec, budget=None):
    if spec.kind not in FLATTEN_KINDS:
        raise ObjectiveError(f"flatten executor supports {FLATTEN_KINDS}, not {spec.kind}")
    stats = PassStats()
    tape = ad.Tape(budget)
    t0 = time.perf_counter()
    S = batch.n_samples
    lp_mean_seen = np.full(S, np.nan)
    scores_seen = np.full(S, np.nan)
    grads = ad.GradStore()
    loss_value = 0.0
    G = len(batch.pref)
    nll_groups = set(batch.nll)

    def accumulate(g):
        for name in sorted(g):
            grads[name] = g[name] if name not in grads else grads[name] + g[name]

    def run(idx, build):
        nonlocal loss_value
        pairs = [batch.pairs[i] for i in idx]
        mi, mt, mm = pack(pairs, context=policy.config.context)
        lp_tok = token_logprobs(policy, mi, mt)
        stats.grad_fwd_samples += len(idx)
        stats.grad_fwd_calls += 1
        dt = lp_tok.dtype
        lp_mean = ad.sum(ad.mul(lp_tok, _agg_weights(mm, "mean").astype(dt)), axis=1)
        lp_agg = lp_mean if spec.aggregate == "mean" else ad.sum(ad.mul(lp_tok, mm.astype(dt)), axis=1)
        u = ad.scale(lp_agg - batch.ref[idx].astype(dt), spec.beta)
        lp_mean_seen[idx] = lp_mean.value
        scores_seen[idx] = u.value
        loss = build(u, lp_mean)
        loss_value += float(loss.value)
        accumulate(ad.backward(loss))
        stats.bwd_calls += 1

    with ad.use_tape(tape):
        for gi, group in enumerate(batch.groups):
            ip, ineg = batch.positions(gi)
            P, N = len(ip), len(ineg)
            if gi in batch.pref:
                for a, i in enumerate(ip):
                    for j in ineg:
                        with_nll = gi in nll_groups and j == ineg[0]

                        def build(u, lp_mean, P=P, N=N, with_nll=with_nll):
                            d = ad.index(u, [0]) - ad.index(u, [1])
                            loss = ad.scale(ad.sum(ad.log_sigmoid(d)), -1.0 / (G * P * N))
                            if with_nll:
                                nll = ad.scale(ad.sum(ad.index(lp_mean, [0])),
                                               -spec.alpha / (len(batch.nll) * P))
                                loss = loss + nll
                            return loss

                        run([i, j], build)
                        stats.pair_passes += 1
                        stats.pair_interactions += 1
            elif gi in nll_groups:
                for i in ip:
                    run([i], lambda u, lp_mean, P=P: ad.scale(ad.sum(lp_mean), -spec.alpha / (len(batch.nll) * P)))
    stats.peak_live_scalars = tape.peak_live_scalars
    stats.wall_time = time.perf_counter() - t0
    return StepResult(loss_value, grads, stats, *_diagnostics(batch, lp_mean_seen, scores_seen))


def run_step(executor, policy, batch, spec, micro_batch=1, budget=None):
    if executor == "vanilla":
        return step_vanilla(policy, batch, spec, budget)
    if executor == "surrogate":
        return step_surrogate(policy, batch, spec, micro_batch, budget)
    if executor == "flatten":
        return step_flatten(policy, batch, spec, budget)
    raise ValueError(f"unknown executor {executor!r}; expected one of {EXECUTORS}")


# ---------------------------------------------------------------- equivalence oracle

def flat_grad(grads, names):
    return np.concatenate([np.asarray(grads[n], dtype=float).ravel() if n in grads
                           else np.zeros(0) for n in names])


def grad_deviation(ga, gb, names):
    """(max abs deviation, relative L2 of gb against ga) over the named parameters."""
    parts_a, parts_b = [], []
    for n in names:
        a = ga.get(n)
        b = gb.get(n)
        if a is None and b is None:
            continue
        ref = a if a is not None else b
        parts_a.append(np.zeros(ref.size) if a is None else np.asarray(a, float).ravel())
        parts_b.append(np.zeros(ref.size) if b is None else np.asarray(b, float).ravel())
    if not parts_a:
        return 0.0, 0.0
    va, vb = np.concatenate(parts_a), np.concatenate(parts_b)
    diff = vb - va
    denom = np.linalg.norm(va)
    rel = float(np.linalg.norm(diff) / denom) if denom > 0 else float(np.linalg.norm(diff))
    return float(np.max(np.abs(diff))) if diff.size else 0.0, rel


def perturbed_policy(model, seed, noise=0.1):
    """Copy of ``model`` with seeded Gaussian noise on every parameter."""
    rng = stream(seed, "perturb")
    out = model.copy()
    for name in out.param_names:
        arr = out.params[name]
        out.params[name] = arr + rng.normal(0.0, noise, arr.shape).astype(arr.dtype)
    return out


def random_groups(seed, kind, vocab_size, group_counts=(1, 2, 4), side=(1, 4), max_len=12,
                  prompt_len=(1, 6)):
    """Seeded random groups for gradient checks."""
    rng = stream(seed, "random-batch")
    G = int(rng.choice(group_counts))
    groups = []
    for g in range(G):
        P, N = (1, 1) if kind == "DPO" else tuple(int(x) for x in rng.integers(side[0], side[1] + 1, 2))
        prompt = [int(t) for t in rng.integers(0, vocab_size, int(rng.integers(prompt_len[0], prompt_len[1] + 1)))]

        def resp(role):
            n = int(rng.integers(1, max_len + 1))
            return ResponseSample([int(t) for t in rng.integers(0, vocab_size, n)], role,
                                  gen_reward=float(rng.random()))

        groups.append(PromptGroup(g, prompt, [resp("positive") for _ in range(P)],
                                  [resp("negative") for _ in range(N)]))
    return groups


@dataclasses.dataclass
class EquivalenceRow:
    seed: int
    kind: str
    n_groups: int
    n_samples: int
    max_abs: float
    rel_l2: float
    passed: bool
    loss_vanilla: float
    loss_surrogate: float
    post_step_gap: float


@dataclasses.dataclass
class EquivalenceReport:
    rows: list
    tol: float

    @property
    def passed(self):
        return all(r.passed for r in self.rows)

    def summary(self):
        lines = []
        for r in self.rows:
            lines.append(
                f"{'PASS' if r.passed else 'FAIL'} kind={r.kind:<8} seed={r.seed:<4} G={r.n_groups} "
                f"S={r.n_samples:<3} rel_l2={r.rel_l2:.3e} max_abs={r.max_abs:.3e} "
                f"post_step_gap={r.post_step_gap:.3e}")
        ok = sum(r.passed for r in self.rows)
        lines.append(f"{ok}/{len(self.rows)} passed at rel_l2 <= {self.tol:g}")
        return "\n".join(lines)


def _loss_only(policy, batch, spec):
    with ad.no_grad():
        inputs, targets, mask = pack(batch.pairs, context=policy.config.context)
        lp_tok = token_logprobs(policy, inputs, targets).value.astype(float)
    lp_mean = (lp_tok * _agg_weights(mask, "mean")).sum(axis=1)
    lp_agg = lp_mean if spec.aggregate == "mean" else (lp_tok * mask).sum(axis=1)
    scores = spec.beta * (lp_agg - batch.ref)
    return scores, lp_mean


def equivalence_report(spec, seeds, model_config=None, tol=1e-6, micro_batch=1, step_size=1.0,
                       coeff_fn=None, noise=0.1):
    """Vanilla vs surrogate gradients on seeded random batches.

    Also records the second-order gap: after one gradient step, the change of
    the true objective minus the change predicted by the linear surrogate.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("equivalence_report needs at least one seed")
    model_config = model_config or ModelConfig()
    base = PolicyModel(model_config)
    reference = freeze_reference(base)
    names = base.param_names
    rows = []
    for seed in seeds:
        policy = perturbed_policy(base, seed, noise) if noise else base.copy()
        groups = random_groups(seed, spec.kind, model_config.vocab_size)
        attach_reference_logprobs(groups, reference)
        batch = prepare_batch(groups, spec, seed=seed)
        van = step_vanilla(policy, batch, spec)
        sur = step_surrogate(policy, batch, spec, micro_batch, coeff_fn=coeff_fn)
        max_abs, rel = grad_deviation(van.grads, sur.grads, names)

        # second-order structure: true change vs the surrogate's linear prediction
        scores0, lpm0 = _loss_only(policy, batch, spec)
        stepped = policy.copy()
        for n in names:
            if n in van.grads:
                stepped.params[n] = stepped.params[n] - step_size * van.grads[n]
        scores1, lpm1 = _loss_only(stepped, batch, spec)
        true_change = _reference_loss(batch, spec, scores1, lpm1) - _reference_loss(batch, spec, scores0, lpm0)
        pred = 0.0
        if batch.pref:
            cv = coefficients(spec, [tuple(scores0[ix] for ix in batch.positions(g)) if g in batch.pref
                                     else None for g in range(len(batch.groups))])
            pred = float(np.dot(cv.values, scores1 - scores0))
        for g in batch.nll:
            ip, _ = batch.positions(g)
            pred += -spec.alpha * (lpm1[ip].mean() - lpm0[ip].mean()) / len(batch.nll)
        rows.append(EquivalenceRow(seed, spec.kind, len(batch.groups), batch.n_samples, max_abs, rel,
                                   bool(rel <= tol), van.loss, sur.loss, float(abs(true_change - pred))))
    return EquivalenceReport(rows, tol)
