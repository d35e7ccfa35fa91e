"""A small causal token scorer used as policy, reference, and hidden teacher.

Each block replaces attention with a causal prefix mean followed by a
pointwise two-layer MLP and a residual connection.  The output projection is
zero-initialised, so a fresh model predicts the uniform distribution.
"""

import dataclasses
import hashlib
import io
import json

import numpy as np

from . import autodiff as ad
from .rng import stream

CHECKPOINT_MAGIC = b"GROUPDPO-CKPT 1\n"


class ModelInputError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 32
    embed_dim: int = 32
    context: int = 64
    blocks: int = 2
    seed: int = 17
    dtype: str = "float64"

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.context < 2:
            raise ValueError("context must be >= 2")
        if self.embed_dim < 1 or self.blocks < 0:
            raise ValueError("embed_dim must be >= 1 and blocks >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def hidden_dim(self):
        return 2 * self.embed_dim


def init_params(config, output_scale=0.0):
    """Seeded parameters.  ``output_scale`` > 0 gives a non-uniform model."""
    rng = stream(config.seed, "model-init")
    V, d, h = config.vocab_size, config.embed_dim, config.hidden_dim
    dt = np.dtype(config.dtype)
    params = {
        "tok_emb": rng.normal(0.0, 1.0, (V, d)),
        "pos_emb": rng.normal(0.0, 0.1, (config.context, d)),
    }
    for l in range(config.blocks):
        params[f"blocks.{l}.w1"] = rng.normal(0.0, d ** -0.5, (d, h))
        params[f"blocks.{l}.b1"] = np.zeros(h)
        params[f"blocks.{l}.w2"] = rng.normal(0.0, 0.5 * h ** -0.5, (h, d))
        params[f"blocks.{l}.b2"] = np.zeros(d)
    if output_scale > 0.0:
        params["out"] = rng.normal(0.0, output_scale * d ** -0.5, (d, V))
    else:
        params["out"] = np.zeros((d, V))
    return {k: v.astype(dt) for k, v in params.items()}


class PolicyModel:
    def __init__(self, config, params=None):
        self.config = config
        self.params = init_params(config) if params is None else params

    def copy(self):
        return PolicyModel(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def param_names(self):
        return list(self.params)

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(json.dumps(dataclasses.asdict(self.config), sort_keys=True).encode())
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name])
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()[:16]

    def _check(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] < 1:
            raise ModelInputError(f"expected a (batch, time) token array, got {tokens.shape}")
        if tokens.shape[1] > self.config.context:
            raise ModelInputError(
                f"sequence length {tokens.shape[1]} exceeds context {self.config.context}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ModelInputError("token id out of range")
        return tokens

    def forward_batch(self, tokens):
        """Logits of shape (B, T, V); row t sees tokens 0..t only."""
        tokens = self._check(tokens)
        T = tokens.shape[1]
        p = {k: ad.Tensor.param(k, v) for k, v in self.params.items()}
        h = ad.take_rows(p["tok_emb"], tokens) + ad.take_rows(p["pos_emb"], np.arange(T))
        for l in range(self.config.blocks):
            a = ad.causal_mean(h)
            z = ad.tanh(a @ p[f"blocks.{l}.w1"] + p[f"blocks.{l}.b1"])
            h = h + (z @ p[f"blocks.{l}.w2"] + p[f"blocks.{l}.b2"])
        return h @ p["out"]

    def forward_logits(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1:
            raise ModelInputError("forward_logits takes a single token sequence")
        return ad.reshape(self.forward_batch(tokens[None, :]), (tokens.size, self.config.vocab_size))

    def next_token_logprobs(self, tokens):
        """Numpy log-probs of the token after each full row of ``tokens`` (no grad)."""
        with ad.no_grad():
            logits = self.forward_batch(tokens).value[:, -1, :]
        z = logits - logits.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class ReferenceModel:
    """Frozen copy of a policy.  All evaluation runs without recording."""

    def __init__(self, model):
        self._model = model.copy()
        for arr in self._model.params.values():
            arr.setflags(write=False)
        self.config = self._model.config
        self._fingerprint = self._model.fingerprint()
        self._cache = {}

    def fingerprint(self):
        return self._fingerprint

    @property
    def model(self):
        return self._model

    def logprobs(self, pairs):
        """(sum, mean) reference log-probs for (prompt, response) pairs, cached."""
        todo = [pr for pr in pairs if _key(pr) not in self._cache]
        if todo:
            # same arithmetic as sequence_logprobs, so scores are exactly 0 at the start
            inputs, targets, mask = pack(todo, context=self.config.context)
            with ad.no_grad():
                lp = token_logprobs(self._model, inputs, targets).value
            s = np.sum(lp * mask.astype(lp.dtype), axis=1)
            m = np.sum(lp * (mask / mask.sum(axis=1, keepdims=True)).astype(lp.dtype), axis=1)
            for pr, sv, mv in zip(todo, s, m):
                self._cache[_key(pr)] = (float(sv), float(mv))
        out = [self._cache[_key(pr)] for pr in pairs]
        return np.array([o[0] for o in out]), np.array([o[1] for o in out])


def freeze_reference(model):
    return ReferenceModel(model)


def _key(pair):
    return (tuple(pair[0]), tuple(pair[1]))


def pack(pairs, vocab_size=None, context=None):
    """Right-padded inputs, targets, and a response mask for (prompt, response) pairs.

    For a concatenated sequence s = prompt + response the model is fed
    s[:-1] and scored against s[1:]; only targets that are response tokens
    are unmasked.
    """
    if not pairs:
        raise ModelInputError("empty batch")
    lengths = []
    for prompt, response in pairs:
        if len(response) < 1:
            raise ModelInputError("response must contain at least one token")
        if len(prompt) < 1:
            raise ModelInputError("prompt must contain at least one token")
        lengths.append(len(prompt) + len(response))
    if context is not None and max(lengths) > context:
        raise ModelInputError(f"prompt+response length {max(lengths)} exceeds context {context}")
    T = max(lengths) - 1
    B = len(pairs)
    inputs = np.zeros((B, T), dtype=np.int64)
    targets = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T))
    for b, (prompt, response) in enumerate(pairs):
        s = np.concatenate([np.asarray(prompt, dtype=np.int64), np.asarray(response, dtype=np.int64)])
        n = s.size - 1
        inputs[b, :n] = s[:-1]
        targets[b, :n] = s[1:]
        mask[b, len(prompt) - 1:n] = 1.0
    return inputs, targets, mask


def token_logprobs(model, inputs, targets):
    """Tensor (B, T) of log pi(target_t | inputs_<=t)."""
    logits = model.forward_batch(inputs)
    return ad.gather(ad.log_softmax(logits), targets)


def sequence_logprobs(model, pairs, aggregate="sum"):
    """Tensor (B,) of response log-probs: summed, or averaged over response tokens."""
    if aggregate not in ("sum", "mean"):
        raise ValueError(f"aggregate must be 'sum' or 'mean', got {aggregate!r}")
    inputs, targets, mask = pack(pairs, context=model.config.context)
    if aggregate == "mean":
        mask = mask / mask.sum(axis=1, keepdims=True)
    lp = token_logprobs(model, inputs, targets)
    return ad.sum(ad.mul(lp, mask.astype(lp.dtype)), axis=1)


def weighted_logprob_sum(model, pairs, token_weights):
    """Scalar Tensor sum_b sum_t w[b,t] * log pi(target) for given per-token weights."""
    inputs, targets, _ = pack(pairs, context=model.config.context)
    lp = token_logprobs(model, inputs, targets)
    return ad.sum(ad.mul(lp, token_weights.astype(lp.dtype)))


def response_logprob(model, prompt, response, aggregate="sum"):
    """Scalar Tensor log pi(response | prompt), summed or token-averaged."""
    return ad.reshape(sequence_logprobs(model, [(prompt, response)], aggregate), ())


def sample(model, prompts, length, rng, temperature=1.0, uniform_mix=0.0, eos=None):
    """Autoregressively extend equal-length prompts.

    ``temperature`` and ``uniform_mix`` may be scalars or per-row arrays; a
    temperature of 0 means greedy (ties go to the lowest token id).  Rows stop
    after emitting ``eos`` (which is kept).  Returns a list of token lists.
    """
    prompts = np.asarray(prompts, dtype=np.int64)
    B = prompts.shape[0]
    V = model.config.vocab_size
    temp = np.broadcast_to(np.asarray(temperature, dtype=float), (B,))
    mix = np.broadcast_to(np.asarray(uniform_mix, dtype=float), (B,))
    seq = prompts
    out = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for _ in range(length):
        lp = model.next_token_logprobs(seq)
        u = rng.random(B)
        greedy = temp == 0.0
        z = lp / np.where(greedy, 1.0, temp)[:, None]
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        p = (1.0 - mix)[:, None] * p + (mix / V)[:, None]
        c = np.cumsum(p, axis=1)
        tok = np.minimum((c <= (u * c[:, -1])[:, None]).sum(axis=1), V - 1)
        tok = np.where(greedy, np.argmax(lp, axis=1), tok)
        for b in range(B):
            if not done[b]:
                out[b].append(int(tok[b]))
                if eos is not None and tok[b] == eos:
                    done[b] = True
        if done.all():
            break
        seq = np.concatenate([seq, tok[:, None]], axis=1)
    return out


def save_checkpoint(model, path, extra=None):
    """Deterministic binary dump: magic line, JSON header line, raw little-endian arrays."""
    arrays = []
    offset = 0
    blobs = []
    for name in model.params:
        arr = np.ascontiguousarray(model.params[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        arrays.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>|="),
                       "offset": offset, "nbytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    header = {"config": dataclasses.asdict(model.config), "arrays": arrays}
    if extra:
        header["extra"] = extra
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    buf = io.BytesIO(data[len(CHECKPOINT_MAGIC):])
    header = json.loads(buf.readline())
    body = buf.read()
    params = {}
    for a in header["arrays"]:
        chunk = body[a["offset"]:a["offset"] + a["nbytes"]]
        arr = np.frombuffer(chunk, dtype=np.dtype("<" + a["dtype"])).reshape(a["shape"])
        params[a["name"]] = arr.astype(np.dtype(a["dtype"])).copy()
    return PolicyModel(ModelConfig(**header["config"]), params)
