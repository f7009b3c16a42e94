"""SGD with momentum / weight decay and Adam, updating parameter tensors in place.

Parameters whose ``grad`` is ``None`` are skipped entirely (no decay, no
momentum update), so a head that took no part in a step stays bit-identical.
"""

from __future__ import annotations

import numpy as np

from mtuda.errors import DimensionError

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def _check(p, g):
    if g.shape != p.data.shape:
        raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")


class SGD:
    """``v <- momentum * v + (g + wd * p);  p <- p - lr * v``."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=1e-4):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        sgd_step(self.params, [p.grad for p in self.params], self.velocity, self.lr, self.momentum, self.weight_decay)

    def buffers(self):
        return {f"v.{i}": v for i, v in enumerate(self.velocity)}

    def load_buffers(self, bufs):
        self.velocity = [np.array(bufs[f"v.{i}"]) for i in range(len(self.params))]


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    for p, g, v in zip(params, grads, velocity):
        if g is None:
            continue
        _check(p, g)
        d = g + weight_decay * p.data if weight_decay else g
        v *= momentum
        v += d
        p.data -= lr * v


class Adam:
    def __init__(self, params, lr, betas=ADAM_BETAS, eps=ADAM_EPS):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        adam_step(self.params, [p.grad for p in self.params], self.m, self.v, self.t, self.lr, self.betas, self.eps)

    def buffers(self):
        out = {"t": np.array(float(self.t))}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"], out[f"v.{i}"] = m, v
        return out

    def load_buffers(self, bufs):
        self.t = int(bufs["t"])
        self.m = [np.array(bufs[f"m.{i}"]) for i in range(len(self.params))]
        self.v = [np.array(bufs[f"v.{i}"]) for i in range(len(self.params))]


def adam_step(params, grads, m_bufs, v_bufs, t, lr, betas=ADAM_BETAS, eps=ADAM_EPS):
    b1, b2 = betas
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for p, g, m, v in zip(params, grads, m_bufs, v_bufs):
        if g is None:
            continue
        _check(p, g)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
