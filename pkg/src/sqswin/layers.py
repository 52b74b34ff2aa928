"""Parameter containers: a tiny Module base plus linear and normalization layers."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError


def trunc_normal(rng, shape, std=0.02, bound=2.0):
    """Normal(0, std) truncated to +-bound*std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


class Module:
    """Walks its attributes to find parameters (leaf tensors) and child modules.

    Subclasses list the attribute names of quadratic parameters in
    ``_quadratic_names`` so that parameter groups can be split generically.
    """

    _quadratic_names = ()

    def children(self):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + key, value
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def named_parameters_grouped(self, prefix=""):
        """Yield ``(name, tensor, is_quadratic)`` triples."""
        for key, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + key, value, key in self._quadratic_names
        for key, child in self.children():
            yield from child.named_parameters_grouped(f"{prefix}{key}.")

    def parameters(self):
        return dict(self.named_parameters())

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {value.shape}")
            np.copyto(p.data, value)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True, std=0.02):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.W = Tensor(trunc_normal(rng, (in_dim, out_dim), std), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x):
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"Linear expects last dim {self.in_dim}, got shape {x.shape}")
        y = ad.matmul(x, self.W)
        return y if self.b is None else ad.add(y, self.b)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.eps = eps
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Two linear maps with a GELU in between."""

    def __init__(self, dim, hidden, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))
