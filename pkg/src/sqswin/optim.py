"""SGD and Adam over named parameter groups, updating tensors in place.

Parameters whose ``grad`` is None (frozen, or unused in the last backward)
are skipped, so a frozen group is left bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ParamGroup:
    name: str
    params: dict
    lr: float


class Optimizer:
    """``clip_norm`` rescales all gradients together when their global L2 norm exceeds it."""

    def __init__(self, groups, clip_norm=None):
        self.groups = list(groups)
        self.state = {}
        self.clip_norm = clip_norm

    @classmethod
    def single(cls, params, lr, **kwargs):
        return cls([ParamGroup("base", dict(params), lr)], **kwargs)

    def parameters(self):
        out = {}
        for g in self.groups:
            out.update(g.params)
        return out

    def set_lr(self, name, lr):
        for g in self.groups:
            if g.name == name:
                g.lr = lr

    def lr(self, name):
        for g in self.groups:
            if g.name == name:
                return g.lr
        raise KeyError(name)

    def zero_grad(self):
        for g in self.groups:
            for t in g.params.values():
                t.grad = None

    def reset(self):
        self.state = {}

    def grad_norm(self):
        return float(np.sqrt(sum(float(np.sum(np.square(t.grad, dtype=np.float64)))
                                 for g in self.groups for t in g.params.values() if t.grad is not None)))

    def step(self):
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                factor = self.clip_norm / norm
                for g in self.groups:
                    for t in g.params.values():
                        if t.grad is not None:
                            t.grad = t.grad * t.grad.dtype.type(factor)
        for g in self.groups:
            for name, t in g.params.items():
                if t.grad is not None:
                    self._update(name, t, g.lr)

    def _update(self, name, tensor, lr):
        raise NotImplementedError


class SGD(Optimizer):
    def _update(self, name, tensor, lr):
        tensor.data -= tensor.data.dtype.type(lr) * tensor.grad


class Adam(Optimizer):
    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, clip_norm=None):
        super().__init__(groups, clip_norm)
        self.betas, self.eps = betas, eps

    def _update(self, name, tensor, lr):
        dt = tensor.data.dtype.type
        b1, b2 = self.betas
        st = self.state.get(name)
        if st is None:
            st = self.state[name] = {"t": 0, "m": np.zeros_like(tensor.data), "v": np.zeros_like(tensor.data)}
        st["t"] += 1
        g = tensor.grad
        st["m"] = dt(b1) * st["m"] + dt(1 - b1) * g
        st["v"] = dt(b2) * st["v"] + dt(1 - b2) * (g * g)
        m_hat = st["m"] / dt(1 - b1 ** st["t"])
        v_hat = st["v"] / dt(1 - b2 ** st["t"])
        tensor.data -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(self.eps))


OPTIMIZERS = {"sgd": SGD, "adam": Adam}
