"""Grouped preference data: containers, line-delimited JSON IO, and generators.

Two synthetic regimes are provided:

* offline -- candidates are sampled from noisy variants of a hidden teacher,
  scored by mean teacher log-likelihood, and split top-k / bottom-k.
* online -- responses are sampled from the current policy and partitioned by
  whether they emit the prompt's hidden answer token before end-of-sequence.
"""

import dataclasses
import json
import logging
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, PolicyModel, init_params, sample, sequence_logprobs
from .rng import GENERATOR_NAME, stream

log = logging.getLogger(__name__)

FORMAT_VERSION = "groupdpo-data/1"


class DataConfigError(ValueError):
    pass


class DatasetParseError(ValueError):
    def __init__(self, path, line_no, reason):
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {reason}")


class DatasetValidationError(ValueError):
    pass


@dataclasses.dataclass
class ResponseSample:
    tokens: List[int]
    role: str
    ref_logprob_sum: Optional[float] = None
    ref_logprob_mean: Optional[float] = None
    gen_reward: Optional[float] = None

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise ValueError("response tokens must be non-empty")
        if self.role not in ("positive", "negative"):
            raise ValueError(f"role must be positive or negative, got {self.role!r}")


@dataclasses.dataclass
class PromptGroup:
    group_id: int
    prompt: List[int]
    positives: List[ResponseSample]
    negatives: List[ResponseSample]

    @property
    def degenerate(self):
        return not self.positives or not self.negatives

    @property
    def samples(self):
        return self.positives + self.negatives

    @property
    def size(self):
        return len(self.positives) + len(self.negatives)


@dataclasses.dataclass
class DatasetHeader:
    regime: str
    group_size: int
    balance: str
    seed: int
    reference_fingerprint: str
    version: str = FORMAT_VERSION
    rng: str = GENERATOR_NAME
    discarded: int = 0

    def __post_init__(self):
        if self.regime not in ("offline", "online"):
            raise DatasetValidationError(f"unknown regime {self.regime!r}")
        if self.balance not in ("balanced", "unbalanced"):
            raise DatasetValidationError(f"unknown balance {self.balance!r}")
        if self.regime == "offline" and self.balance != "balanced":
            raise DatasetValidationError("offline datasets are balanced")


@dataclasses.dataclass
class Dataset:
    header: DatasetHeader
    groups: List[PromptGroup]

    def __len__(self):
        return len(self.groups)


# ---------------------------------------------------------------- reference cache

def attach_reference_logprobs(groups, reference):
    """Fill the cached reference log-probs on every sample of ``groups``."""
    pairs, samples = [], []
    for g in groups:
        for s in g.samples:
            pairs.append((g.prompt, s.tokens))
            samples.append(s)
    if not pairs:
        return groups
    sums, means = reference.logprobs(pairs)
    for s, a, b in zip(samples, sums, means):
        s.ref_logprob_sum = float(a)
        s.ref_logprob_mean = float(b)
    return groups


# ---------------------------------------------------------------- offline regime

@dataclasses.dataclass
class OfflineGenConfig:
    prompts: int = 256
    candidates: int = 16
    k: int = 4
    teacher_seed: int = 1234
    teacher_scale: float = 3.0
    noise: float = 0.5
    prompt_len: int = 4
    min_len: int = 4
    max_len: int = 8
    length_penalty: float = 0.0
    seed: int = 17

    def validate(self):
        if self.k < 1:
            raise DataConfigError("k must be >= 1")
        if self.candidates < 2 * self.k:
            raise DataConfigError(f"candidates ({self.candidates}) must be >= 2k ({2 * self.k})")
        if not 1 <= self.min_len <= self.max_len:
            raise DataConfigError("need 1 <= min_len <= max_len")
        if self.prompt_len < 1:
            raise DataConfigError("prompt_len must be >= 1")


def make_teacher(model_config, cfg):
    tcfg = dataclasses.replace(model_config, seed=cfg.teacher_seed, dtype="float64")
    return PolicyModel(tcfg, init_params(tcfg, output_scale=cfg.teacher_scale))


def teacher_reward(teacher, prompt, responses, length_penalty=0.0):
    """Mean teacher log-likelihood per response minus ``length_penalty * |y|``."""
    with ad.no_grad():
        lp = sequence_logprobs(teacher, [(prompt, r) for r in responses], "mean").value
    return lp - length_penalty * np.array([len(r) for r in responses], dtype=float)


def partition_candidates(rewards, k):
    """Top-k / bottom-k indices by (reward desc, index asc), or None on boundary overlap.

    Ties at the boundary count as overlap: the split needs
    min(top-k rewards) > max(bottom-k rewards).
    """
    rewards = np.asarray(rewards, dtype=float)
    order = sorted(range(rewards.size), key=lambda i: (-rewards[i], i))
    top, bottom = order[:k], order[-k:]
    if rewards[top].min() <= rewards[bottom].max():
        return None
    return top, bottom


def offline_prompt(model_config, cfg, index, split="train"):
    rng = stream(cfg.seed, f"offline-{split}-prompt", index)
    return [int(t) for t in rng.integers(0, model_config.vocab_size, cfg.prompt_len)]


def generate_offline(cfg, model_config, reference=None, split="train", n_prompts=None):
    """Offline grouped dataset.  Returns a :class:`Dataset`; discards are counted in the header."""
    cfg.validate()
    if cfg.prompt_len + cfg.max_len > model_config.context:
        raise DataConfigError("prompt_len + max_len exceeds the model context")
    teacher = make_teacher(model_config, cfg)
    M = cfg.candidates
    groups = []
    discarded = 0
    for i in range(cfg.prompts if n_prompts is None else n_prompts):
        prompt = offline_prompt(model_config, cfg, i, split)
        rng = stream(cfg.seed, f"offline-{split}-candidates", i)
        temps = 1.0 + 2.0 * cfg.noise * rng.random(M)
        mix = cfg.noise * rng.random(M)
        lengths = rng.integers(cfg.min_len, cfg.max_len + 1, M)
        drafts = sample(teacher, np.tile(prompt, (M, 1)), cfg.max_len, rng, temps, mix)
        responses = [d[:n] for d, n in zip(drafts, lengths)]
        rewards = teacher_reward(teacher, prompt, responses, cfg.length_penalty)
        split_idx = partition_candidates(rewards, cfg.k)
        if split_idx is None:
            discarded += 1
            continue
        top, bottom = split_idx
        groups.append(PromptGroup(
            group_id=i,
            prompt=prompt,
            positives=[ResponseSample(responses[j], "positive", gen_reward=float(rewards[j])) for j in top],
            negatives=[ResponseSample(responses[j], "negative", gen_reward=float(rewards[j])) for j in bottom],
        ))
    if reference is not None:
        attach_reference_logprobs(groups, reference)
    header = DatasetHeader(
        regime="offline", group_size=2 * cfg.k, balance="balanced", seed=cfg.seed,
        reference_fingerprint=reference.fingerprint() if reference is not None else "",
        discarded=discarded,
    )
    if discarded:
        log.info("offline generation discarded %d of %d prompts (boundary overlap)",
                 discarded, discarded + len(groups))
    return Dataset(header, groups)


# ---------------------------------------------------------------- online regime

@dataclasses.dataclass
class OnlineTaskConfig:
    """Hidden-answer task: the prompt ends in a query token whose answer is fixed."""

    answers: int = 8
    prompt_len: int = 4
    max_response_len: int = 4
    responses_per_prompt: int = 8
    temperature: float = 1.0
    task_seed: int = 99
    seed: int = 17

    def validate(self, vocab_size):
        if self.responses_per_prompt < 2:
            raise DataConfigError("need at least 2 responses per prompt")
        if 2 * self.answers + 2 > vocab_size:
            raise DataConfigError("vocabulary too small for the answer/query layout")
        if self.prompt_len < 1 or self.max_response_len < 1:
            raise DataConfigError("prompt_len and max_response_len must be >= 1")


@dataclasses.dataclass(frozen=True)
class CorrectnessRule:
    """Correct iff the answer token occurs before the first end-of-sequence token."""

    eos: int

    def __call__(self, response, answer):
        body = response
        if self.eos in response:
            body = response[:response.index(self.eos)]
        return answer in body


@dataclasses.dataclass(frozen=True)
class OnlinePrompt:
    prompt_id: int
    tokens: tuple
    answer: int


def online_layout(vocab_size, answers):
    """(answer ids, query ids, filler ids, eos id) for the online task."""
    eos = vocab_size - 1
    return (np.arange(answers), np.arange(answers, 2 * answers),
            np.arange(2 * answers, eos), eos)


def online_prompts(task, vocab_size, n, split="train"):
    task.validate(vocab_size)
    ans, qry, fill, _ = online_layout(vocab_size, task.answers)
    perm = stream(task.task_seed, "answer-map").permutation(task.answers)
    out = []
    for i in range(n):
        rng = stream(task.seed, f"online-{split}-prompt", i)
        q = int(rng.integers(task.answers))
        filler = [int(t) for t in rng.choice(fill, task.prompt_len - 1)] if task.prompt_len > 1 else []
        out.append(OnlinePrompt(i, tuple(filler + [int(qry[q])]), int(ans[perm[q]])))
    return out


def generate_online(policy, prompts, n, rule, seed, step=0, temperature=1.0, max_len=4):
    """One group per prompt: n policy samples split by ``rule``.  Degenerate groups are kept."""
    if n < 2:
        raise DataConfigError("need at least 2 responses per prompt")
    groups = []
    for p in prompts:
        rng = stream(seed, "rollout", step, p.prompt_id)
        responses = sample(policy, np.tile(np.asarray(p.tokens), (n, 1)), max_len, rng,
                           temperature=temperature, eos=rule.eos)
        pos, neg = [], []
        for r in responses:
            if rule(r, p.answer):
                pos.append(ResponseSample(r, "positive"))
            else:
                neg.append(ResponseSample(r, "negative"))
        groups.append(PromptGroup(p.prompt_id, list(p.tokens), pos, neg))
    return groups


# ---------------------------------------------------------------- pair selection

def select_pair(group, policy, rng=None):
    """One (positive, negative) pair: uniform over P x N, or the edge pair by reward."""
    if group.degenerate:
        raise DataConfigError("cannot select a pair from a degenerate group")
    if policy == "random":
        P, N = len(group.positives), len(group.negatives)
        k = int(rng.integers(P * N))
        return group.positives[k // N], group.negatives[k % N]
    if policy == "edge":
        if any(s.gen_reward is None for s in group.samples):
            raise DataConfigError("edge pair selection needs gen_reward on every sample")
        i = int(np.argmax([s.gen_reward for s in group.positives]))
        j = int(np.argmin([s.gen_reward for s in group.negatives]))
        return group.positives[i], group.negatives[j]
    raise DataConfigError(f"unknown pair policy {policy!r}")


# ---------------------------------------------------------------- IO

_SAMPLE_FIELDS = ("tokens", "ref_logprob_sum", "ref_logprob_mean", "gen_reward")


def _sample_record(s):
    return {f: getattr(s, f) for f in _SAMPLE_FIELDS}


def save(dataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(dataclasses.asdict(dataset.header), sort_keys=True) + "\n")
        for g in dataset.groups:
            rec = {
                "regime": dataset.header.regime,
                "group_id": g.group_id,
                "prompt": g.prompt,
                "positives": [_sample_record(s) for s in g.positives],
                "negatives": [_sample_record(s) for s in g.negatives],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _parse_sample(rec, role):
    unknown = set(rec) - set(_SAMPLE_FIELDS)
    if unknown:
        raise ValueError(f"unknown sample fields {sorted(unknown)}")
    return ResponseSample(tokens=[int(t) for t in rec["tokens"]], role=role,
                          ref_logprob_sum=rec.get("ref_logprob_sum"),
                          ref_logprob_mean=rec.get("ref_logprob_mean"),
                          gen_reward=rec.get("gen_reward"))


def load(path, reference_fingerprint=None):
    """Read a dataset file.  Optionally require a matching reference fingerprint."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetParseError(path, 1, "empty file")
    try:
        header = DatasetHeader(**json.loads(lines[0]))
    except (json.JSONDecodeError, TypeError) as exc:
        raise DatasetParseError(path, 1, f"bad header: {exc}") from None
    if header.version != FORMAT_VERSION:
        raise DatasetValidationError(f"unsupported dataset version {header.version!r}")
    groups = []
    for no, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            regime = rec["regime"]
            g = PromptGroup(
                group_id=int(rec["group_id"]),
                prompt=[int(t) for t in rec["prompt"]],
                positives=[_parse_sample(s, "positive") for s in rec["positives"]],
                negatives=[_parse_sample(s, "negative") for s in rec["negatives"]],
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetParseError(path, no, f"malformed record: {exc}") from None
        if regime != header.regime:
            raise DatasetValidationError(
                f"{path}:{no}: record regime {regime!r} does not match header {header.regime!r}")
        if header.regime == "offline":
            if len(g.positives) != len(g.negatives):
                raise DatasetValidationError(f"{path}:{no}: offline group is unbalanced")
        groups.append(g)
    if reference_fingerprint is not None and header.reference_fingerprint != reference_fingerprint:
        raise DatasetValidationError(
            f"dataset reference fingerprint {header.reference_fingerprint!r} does not match "
            f"active reference {reference_fingerprint!r}")
    return Dataset(header, groups)
