import numpy as np


class SGD:
    def __init__(self, lr, weight_decay=0.0):
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, params, grads):
        for name in sorted(grads):
            p = params[name]
            if self.weight_decay:
                p = p - self.lr * self.weight_decay * p
            params[name] = p - (self.lr * grads[name]).astype(p.dtype)


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            p = params[name]
            if self.weight_decay:
                p = p - self.lr * self.weight_decay * p
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name] = p - update.astype(p.dtype)


def make_optimizer(cfg):
    if cfg.name == "sgd":
        return SGD(cfg.lr, cfg.weight_decay)
    if cfg.name == "adamw":
        return AdamW(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    raise ValueError(f"unknown optimizer {cfg.name!r}")
