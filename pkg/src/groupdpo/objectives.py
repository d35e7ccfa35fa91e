"""Group preference objectives, their score gradients, and per-sample coefficients.

Scores are implicit preference scores u = beta * (log pi - log pi_ref), with
the log-probs averaged over response tokens when length normalisation is on.
Every group loss phi(uP, uN) here is invariant to adding a constant to all
scores of a group, so the score gradient of each group sums to zero.
"""

import dataclasses
import warnings

import numpy as np

from . import autodiff as ad
from ._kernels import kernels
from .model import sequence_logprobs

KINDS = ("RFT", "DPO", "Margin", "MPO", "AllPairs", "Softmax")
GROUP_KINDS = ("Margin", "MPO", "AllPairs", "Softmax")
PREFERENCE_KINDS = ("DPO",) + GROUP_KINDS


class ObjectiveError(ValueError):
    pass


class EmptyBatchError(ObjectiveError):
    pass


class MissingReferenceError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "MPO"
    beta: float = 2.0
    nll_coeff: float = 1.0
    length_normalized: bool = True
    pair_policy: str = "random"
    nll_on_degenerate: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ObjectiveError(f"unknown objective kind {self.kind!r}; expected one of {KINDS}")
        if not self.beta > 0:
            raise ObjectiveError("beta must be positive")
        if self.nll_coeff < 0:
            raise ObjectiveError("nll_coeff must be non-negative")
        if self.pair_policy not in ("random", "edge"):
            raise ObjectiveError(f"unknown pair policy {self.pair_policy!r}")

    @property
    def aggregate(self):
        return "mean" if self.length_normalized else "sum"

    @property
    def has_preference_term(self):
        return self.kind != "RFT"

    @property
    def alpha(self):
        """Weight of the positive-response NLL term (RFT is NLL only, weight 1)."""
        return 1.0 if self.kind == "RFT" else self.nll_coeff


# ---------------------------------------------------------------- scalar helpers

def sigmoid(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def q(z):
    """sigma(z) - 1, evaluated as -sigma(-z) to keep precision for large z."""
    return -sigmoid(-np.asarray(z, dtype=float))


def neg_log_sigmoid(z):
    """-log sigma(z) == softplus(-z)."""
    return np.logaddexp(0.0, -np.asarray(z, dtype=float))


def logsumexp(x):
    x = np.asarray(x, dtype=float)
    m = x.max()
    return m + np.log(np.sum(np.exp(x - m)))


def softmax(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(x - x.max())
    return e / e.sum()


def _check_sides(kind, uP, uN):
    uP = np.atleast_1d(np.asarray(uP, dtype=float))
    uN = np.atleast_1d(np.asarray(uN, dtype=float))
    if uP.size == 0 or uN.size == 0:
        raise ObjectiveError(f"{kind}: both positive and negative scores are required")
    if kind == "DPO" and (uP.size != 1 or uN.size != 1):
        raise ObjectiveError("DPO takes exactly one selected (positive, negative) pair")
    if kind not in PREFERENCE_KINDS:
        raise ObjectiveError(f"{kind} has no preference loss")
    return uP, uN


# ---------------------------------------------------------------- group losses

def phi(kind, uP, uN):
    """Per-group loss value."""
    uP, uN = _check_sides(kind, uP, uN)
    if kind == "DPO":
        return float(neg_log_sigmoid(uP[0] - uN[0]))
    if kind == "Margin":
        return float(neg_log_sigmoid(uP.mean() - uN.mean()))
    if kind == "MPO":
        return float(logsumexp(np.concatenate([uP, uN])) - logsumexp(uP))
    if kind == "Softmax":
        return float(np.mean(neg_log_sigmoid(uP - logsumexp(uN))))
    return float(kernels.allpairs_loss_grad(uP, uN)[0])


def grad_phi(kind, uP, uN):
    """(d phi / d uP, d phi / d uN).

    Positive-side entries follow the closed forms, with q(z) = sigma(z) - 1:
    DPO q(up - un); Margin q(mean uP - mean uN) / |P|; MPO s_i - s_i / rho
    with s = softmax over P and N and rho the positive mass; Softmax
    q(z_i) / |P| with z_i = up_i - logsumexp(uN); AllPairs the mean of
    q(up_i - un_j) over j, divided by |P|.
    """
    uP, uN = _check_sides(kind, uP, uN)
    P, N = uP.size, uN.size
    if kind == "DPO":
        g = float(q(uP[0] - uN[0]))
        return np.array([g]), np.array([-g])
    if kind == "Margin":
        g = float(q(uP.mean() - uN.mean()))
        return np.full(P, g / P), np.full(N, -g / N)
    if kind == "MPO":
        s = softmax(np.concatenate([uP, uN]))
        # s_i / rho is the softmax over P alone; computing it directly avoids 0/0
        return s[:P] - softmax(uP), s[P:].copy()
    if kind == "Softmax":
        z = uP - logsumexp(uN)
        qz = q(z)
        w = softmax(uN)
        return qz / P, -qz.sum() / P * w
    _, gP, gN = kernels.allpairs_loss_grad(uP, uN)
    return np.asarray(gP), np.asarray(gN)


def phi_tensor(kind, uP, uN):
    """The same losses built from tape ops, so autodiff can differentiate them."""
    if uP.size == 0 or uN.size == 0:
        raise ObjectiveError(f"{kind}: both positive and negative scores are required")
    if kind == "DPO":
        if uP.size != 1 or uN.size != 1:
            raise ObjectiveError("DPO takes exactly one selected (positive, negative) pair")
        return -ad.sum(ad.log_sigmoid(uP - uN))
    if kind == "Margin":
        return -ad.log_sigmoid(ad.mean(uP) - ad.mean(uN))
    if kind == "MPO":
        return ad.logsumexp(ad.concat([uP, uN])) - ad.logsumexp(uP)
    if kind == "Softmax":
        return -ad.mean(ad.log_sigmoid(uP - ad.logsumexp(uN)))
    if kind == "AllPairs":
        d = ad.reshape(uP, (uP.size, 1)) - ad.reshape(uN, (1, uN.size))
        return -ad.mean(ad.log_sigmoid(d))
    raise ObjectiveError(f"{kind} has no preference loss")


# ---------------------------------------------------------------- scores

@dataclasses.dataclass
class PreferenceScoreVector:
    """Scores of one group, positives first.  ``values`` is a Tensor when grad-enabled."""

    values: object
    n_pos: int
    beta: float
    length_normalized: bool
    detached: bool

    @property
    def uP(self):
        v = self.values.value if isinstance(self.values, ad.Tensor) else self.values
        return v[:self.n_pos]

    @property
    def uN(self):
        v = self.values.value if isinstance(self.values, ad.Tensor) else self.values
        return v[self.n_pos:]


def reference_logprobs(group, spec, reference=None):
    """Reference log-probs for a group's samples (positives first), from cache or model."""
    samples = group.samples
    attr = "ref_logprob_mean" if spec.length_normalized else "ref_logprob_sum"
    cached = [getattr(s, attr) for s in samples]
    if all(c is not None for c in cached):
        return np.array(cached, dtype=float)
    if reference is None:
        raise MissingReferenceError("reference log-probs are not cached and no reference model was given")
    sums, means = reference.logprobs([(group.prompt, s.tokens) for s in samples])
    return means if spec.length_normalized else sums


def compute_scores(policy, group, spec, reference=None, grad=False):
    ref = reference_logprobs(group, spec, reference)
    pairs = [(group.prompt, s.tokens) for s in group.samples]
    if grad:
        lp = sequence_logprobs(policy, pairs, spec.aggregate)
        values = ad.scale(lp - ref.astype(lp.dtype), spec.beta)
    else:
        with ad.no_grad():
            lp = sequence_logprobs(policy, pairs, spec.aggregate).value
        values = spec.beta * (lp - ref)
    return PreferenceScoreVector(values, len(group.positives), spec.beta,
                                 spec.length_normalized, detached=not grad)


# ---------------------------------------------------------------- coefficients

@dataclasses.dataclass
class CoefficientVector:
    """Frozen per-sample coefficients c_i = (1/G) d phi_g / d u_i.

    ``values`` is flat over groups, positives before negatives; ``spans``
    records each group's (start, n_pos, n_neg) in that layout.
    """

    values: np.ndarray
    spans: list
    n_groups: int

    def group(self, g):
        start, P, N = self.spans[g]
        return self.values[start:start + P], self.values[start + P:start + P + N]


def coefficients(spec, score_groups):
    """Coefficients for a batch given detached (uP, uN) per group.

    Groups passed as ``None`` or with an empty side are skipped and get zero
    coefficients; G counts only the contributing groups.
    """
    spans, start = [], 0
    contributing = 0
    for sg in score_groups:
        P = 0 if sg is None else len(sg[0])
        N = 0 if sg is None else len(sg[1])
        spans.append((start, P, N))
        start += P + N
        if P and N:
            contributing += 1
    if contributing == 0:
        raise EmptyBatchError("no contributing groups in batch")
    values = np.zeros(start)
    if spec.has_preference_term:
        for sg, (s0, P, N) in zip(score_groups, spans):
            if not (P and N):
                continue
            gP, gN = grad_phi(spec.kind, sg[0], sg[1])
            values[s0:s0 + P] = gP / contributing
            values[s0 + P:s0 + P + N] = gN / contributing
    return CoefficientVector(values, spans, contributing)


# ---------------------------------------------------------------- NLL / RFT

def nll_term(policy, group, alpha):
    """alpha * mean over positives of the token-averaged negative log-likelihood."""
    if alpha == 0 or not group.positives:
        return ad.Tensor(0.0)
    lp = sequence_logprobs(policy, [(group.prompt, s.tokens) for s in group.positives], "mean")
    return ad.scale(ad.mean(lp), -float(alpha))


def rft_loss(policy, group):
    if not group.positives:
        warnings.warn(f"group {group.group_id} has no positives; skipped", stacklevel=2)
        return ad.Tensor(0.0)
    return nll_term(policy, group, 1.0)
