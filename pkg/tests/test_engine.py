import dataclasses

import numpy as np
import pytest

from groupdpo import autodiff as ad
from groupdpo import engine as E
from groupdpo.data import PromptGroup, ResponseSample, attach_reference_logprobs
from groupdpo.model import ModelConfig, PolicyModel, freeze_reference
from groupdpo.objectives import GROUP_KINDS, EmptyBatchError, ObjectiveError, ObjectiveSpec, coefficients


def _batch(config, kind, seed, alpha=1.0, noise=0.1):
    base = PolicyModel(config)
    ref = freeze_reference(base)
    policy = E.perturbed_policy(base, seed, noise) if noise else base.copy()
    spec = ObjectiveSpec(kind=kind, nll_coeff=alpha)
    groups = E.random_groups(seed, kind, config.vocab_size)
    attach_reference_logprobs(groups, ref)
    return policy, E.prepare_batch(groups, spec, seed=seed), spec


def _balanced(G, T, V, seed=0):
    from groupdpo.bench import bench_group
    return bench_group(G, T, V, seed)


@pytest.mark.parametrize("kind", GROUP_KINDS + ("DPO", "RFT"))
def test_surrogate_matches_vanilla(small_config, kind):
    for seed in range(6):
        policy, batch, spec = _batch(small_config, kind, seed)
        van = E.step_vanilla(policy, batch, spec)
        sur = E.step_surrogate(policy, batch, spec)
        _, rel = E.grad_deviation(van.grads, sur.grads, policy.param_names)
        assert rel <= 1e-9
        assert sur.loss == pytest.approx(van.loss, abs=1e-9)


@pytest.mark.parametrize("kind", GROUP_KINDS)
def test_micro_batch_invariance(small_config, kind):
    policy, batch, spec = _batch(small_config, kind, 11)
    S = batch.n_samples
    runs = [E.step_surrogate(policy, batch, spec, m) for m in (1, 2, S)]
    for other in runs[1:]:
        max_abs, _ = E.grad_deviation(runs[0].grads, other.grads, policy.param_names)
        assert max_abs <= 1e-12


@pytest.mark.parametrize("kind", ["AllPairs", "DPO"])
def test_flatten_matches_vanilla(small_config, kind):
    for seed in range(4):
        policy, batch, spec = _batch(small_config, kind, seed)
        van = E.step_vanilla(policy, batch, spec)
        flat = E.step_flatten(policy, batch, spec)
        _, rel = E.grad_deviation(van.grads, flat.grads, policy.param_names)
        assert rel <= 1e-9
        assert flat.loss == pytest.approx(van.loss, abs=1e-9)


def test_flatten_rejects_listwise_kinds(small_config):
    for kind in ("MPO", "Margin", "Softmax"):
        policy, batch, spec = _batch(small_config, kind, 0)
        with pytest.raises(ObjectiveError):
            E.step_flatten(policy, batch, spec)


def test_pass_counts(small_config):
    policy, batch, spec = _batch(small_config, "MPO", 5)
    S = batch.n_samples
    van = E.step_vanilla(policy, batch, spec).stats
    assert (van.grad_fwd_samples, van.nograd_fwd_samples, van.bwd_calls) == (S, 0, 1)
    for m in (1, 3, S):
        st = E.step_surrogate(policy, batch, spec, m).stats
        assert st.nograd_fwd_samples == S
        assert st.grad_fwd_samples == S
        assert st.bwd_calls == st.grad_fwd_calls == -(-S // m)


def test_flatten_pair_passes_quadratic(small_config):
    policy = PolicyModel(small_config)
    ref = freeze_reference(policy)
    spec = ObjectiveSpec(kind="AllPairs", nll_coeff=0.0)
    for G in (2, 4, 8):
        g = _balanced(G, 12, small_config.vocab_size)
        batch = E.prepare_batch([g], spec, ref)
        st = E.step_flatten(policy, batch, spec).stats
        assert st.pair_passes == G * G // 4
        assert st.bwd_calls == G * G // 4


def test_peak_scaling(small_config):
    policy = PolicyModel(small_config)
    ref = freeze_reference(policy)
    spec = ObjectiveSpec(kind="AllPairs")
    van, sur = [], []
    for G in (2, 4, 8):
        batch = E.prepare_batch([_balanced(G, 16, small_config.vocab_size)], spec, ref)
        van.append(E.step_vanilla(policy, batch, spec).stats.peak_live_scalars)
        sur.append(E.step_surrogate(policy, batch, spec, 1).stats.peak_live_scalars)
    assert van[0] < van[1] < van[2]
    assert len(set(sur)) == 1
    assert sur[0] < van[0]


def test_budget_raises_for_vanilla_only(small_config):
    policy = PolicyModel(small_config)
    ref = freeze_reference(policy)
    spec = ObjectiveSpec(kind="AllPairs")
    batch = E.prepare_batch([_balanced(8, 16, small_config.vocab_size)], spec, ref)
    sur_peak = E.step_surrogate(policy, batch, spec, 1).stats.peak_live_scalars
    with pytest.raises(ad.ActivationBudgetExceeded):
        E.step_vanilla(policy, batch, spec, budget=sur_peak)
    E.step_surrogate(policy, batch, spec, 1, budget=sur_peak)


def test_steps_leave_no_grad_state(small_config):
    policy, batch, spec = _batch(small_config, "Softmax", 2)
    before = {k: v.copy() for k, v in policy.params.items()}
    for ex in ("vanilla", "surrogate"):
        E.run_step(ex, policy, batch, spec)
    for k, v in policy.params.items():
        assert np.array_equal(v, before[k])
    assert ad.get_tape().grad_enabled


def test_loss_value_independent_of_executor(small_config):
    policy, batch, spec = _batch(small_config, "AllPairs", 9)
    losses = [E.run_step(ex, policy, batch, spec, 2).loss for ex in E.EXECUTORS]
    assert max(losses) - min(losses) <= 1e-9


def test_identical_policy_batch(small_config):
    # policy == reference: all scores zero, gradient still nonzero and equal
    policy, batch, spec = _batch(small_config, "MPO", 4, noise=0.0)
    van = E.step_vanilla(policy, batch, spec)
    sur = E.step_surrogate(policy, batch, spec)
    _, rel = E.grad_deviation(van.grads, sur.grads, policy.param_names)
    assert rel <= 1e-9


def test_sign_bug_is_caught(small_config):
    def flipped(spec, score_groups):
        cv = coefficients(spec, score_groups)
        return dataclasses.replace(cv, values=-cv.values)

    rep = E.equivalence_report(ObjectiveSpec(kind="MPO", nll_coeff=0.0), range(3), small_config,
                               coeff_fn=flipped)
    assert not rep.passed
    assert all(r.rel_l2 > 1.0 for r in rep.rows)


def test_equivalence_report_passes(small_config):
    rep = E.equivalence_report(ObjectiveSpec(kind="Margin"), range(5), small_config)
    assert rep.passed
    assert "5/5 passed" in rep.summary()
    # only first-order exact: the post-step gap shrinks quadratically with the step
    spec = ObjectiveSpec(kind="Margin")
    big = E.equivalence_report(spec, [1], small_config, step_size=1e-2).rows[0].post_step_gap
    small = E.equivalence_report(spec, [1], small_config, step_size=1e-3).rows[0].post_step_gap
    assert big > 0 and 50 < big / small < 200


def test_empty_batch_rejected(small_config):
    g = PromptGroup(0, [1, 2], [ResponseSample([3], "positive")], [])
    with pytest.raises(EmptyBatchError):
        E.prepare_batch([g], ObjectiveSpec(kind="MPO", nll_coeff=0.0), freeze_reference(PolicyModel(small_config)))


def test_degenerate_nll_opt_in(small_config):
    ref = freeze_reference(PolicyModel(small_config))
    g = PromptGroup(0, [1, 2], [ResponseSample([3, 4], "positive")], [])
    spec = ObjectiveSpec(kind="MPO", nll_on_degenerate=True)
    batch = E.prepare_batch([g], spec, ref)
    assert batch.pref == [] and batch.nll == [0]


def test_unknown_executor(small_config):
    policy, batch, spec = _batch(small_config, "MPO", 0)
    with pytest.raises(ValueError):
        E.run_step("joint", policy, batch, spec)
    with pytest.raises(ValueError):
        E.step_surrogate(policy, batch, spec, 0)


def test_dpo_pair_draw_is_shared_across_executors(small_config):
    ref = freeze_reference(PolicyModel(small_config))
    groups = E.random_groups(3, "MPO", small_config.vocab_size)
    attach_reference_logprobs(groups, ref)
    spec = ObjectiveSpec(kind="DPO")
    a = E.prepare_batch(groups, spec, seed=5, step=2)
    b = E.prepare_batch(groups, spec, seed=5, step=2)
    assert a.pairs == b.pairs
    assert all(len(g.positives) == len(g.negatives) == 1 for g in a.groups)


def test_float64_canonical_equivalence():
    cfg = ModelConfig()
    rep = E.equivalence_report(ObjectiveSpec(kind="AllPairs"), range(3), cfg)
    assert max(r.rel_l2 for r in rep.rows) <= 1e-6
