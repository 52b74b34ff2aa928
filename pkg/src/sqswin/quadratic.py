"""Quadratic neurons, their Relinear initialization, and the two-track lr schedule.

A quadratic layer maps ``x`` to::

    (x W_r + b_r) * (x W_g + b_g) + (x * x) W_b + b_b

with ``*`` element-wise.  No activation is applied here; callers add one if
they want it.  Under Relinear initialization (``W_g = 0, b_g = 1, W_b = 0,
b_b = 0``) the layer is exactly the linear map ``x W_r + b_r``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .layers import Module, trunc_normal

BASE_NAMES = ("W_r", "b_r")
QUADRATIC_NAMES = ("W_g", "b_g", "W_b", "b_b")


class QuadraticLinear(Module):
    _quadratic_names = QUADRATIC_NAMES

    def __init__(self, in_dim, out_dim, rng=None, std=0.02):
        if in_dim <= 0 or out_dim <= 0:
            raise ConfigError(f"QuadraticLinear dims must be positive, got {in_dim}x{out_dim}")
        self.in_dim, self.out_dim = in_dim, out_dim
        self.W_r = Tensor(np.zeros((in_dim, out_dim)), requires_grad=True)
        self.b_r = Tensor(np.zeros(out_dim), requires_grad=True)
        self.W_g = Tensor(np.zeros((in_dim, out_dim)), requires_grad=True)
        self.b_g = Tensor(np.ones(out_dim), requires_grad=True)
        self.W_b = Tensor(np.zeros((in_dim, out_dim)), requires_grad=True)
        self.b_b = Tensor(np.zeros(out_dim), requires_grad=True)
        self._quadratic_trainable = True
        if rng is not None:
            apply_relinear_init(self, rng, std)

    @property
    def quadratic_trainable(self):
        return self._quadratic_trainable

    @quadratic_trainable.setter
    def quadratic_trainable(self, flag):
        self._quadratic_trainable = bool(flag)
        for name in QUADRATIC_NAMES:
            getattr(self, name).requires_grad = self._quadratic_trainable

    def __call__(self, x):
        return quadratic_forward(self, x)


def quadratic_forward(layer, x):
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"quadratic layer expects last dim {layer.in_dim}, got shape {x.shape}")
    x = ad.as_tensor(x)
    r = ad.add(ad.matmul(x, layer.W_r), layer.b_r)
    g = ad.add(ad.matmul(x, layer.W_g), layer.b_g)
    sq = ad.add(ad.matmul(ad.hadamard(x, x), layer.W_b), layer.b_b)
    return ad.add(ad.hadamard(r, g), sq)


def qmlp_project(q_layer, k_layer, v_layer, tokens):
    """Quadratic Q/K/V projections of a ``[b, n, d]`` token array."""
    d = tokens.shape[-1]
    for layer in (q_layer, k_layer, v_layer):
        if layer.in_dim != d or layer.out_dim != d:
            raise ShapeError(f"QMLP layers must be {d}x{d}, got {layer.in_dim}x{layer.out_dim}")
    return q_layer(tokens), k_layer(tokens), v_layer(tokens)


def apply_relinear_init(layer, rng, std=0.02):
    """Draw the linear term from a truncated normal; pin the quadratic terms.

    Leaves ``quadratic_trainable`` False, so the quadratic terms stay frozen
    until a trainer unfreezes them.
    """
    layer.W_r.data[...] = trunc_normal(rng, layer.W_r.shape, std)
    layer.b_r.data[...] = 0.0
    layer.W_g.data[...] = 0.0
    layer.b_g.data[...] = 1.0
    layer.W_b.data[...] = 0.0
    layer.b_b.data[...] = 0.0
    layer.quadratic_trainable = False


def param_groups(module):
    """Split parameters of any module into ``(base, quadratic)`` name->tensor dicts."""
    base, quad = {}, {}
    for name, tensor, is_quad in module.named_parameters_grouped():
        (quad if is_quad else base)[name] = tensor
    return base, quad


def set_quadratic_trainable(module, flag):
    for m in module.modules():
        if isinstance(m, QuadraticLinear):
            m.quadratic_trainable = flag


def lr_at(stages, epoch):
    """Piecewise-constant learning rate from ``[(start_epoch, lr), ...]``."""
    current = stages[0][1]
    for start, lr in stages:
        if epoch >= start:
            current = lr
        else:
            break
    return current


def _check_stages(stages, label):
    if not stages:
        raise ConfigError(f"{label}: at least one stage required")
    epochs = [e for e, _ in stages]
    if epochs[0] != 0:
        raise ConfigError(f"{label}: first stage must start at epoch 0")
    if any(b <= a for a, b in zip(epochs, epochs[1:])):
        raise ConfigError(f"{label}: stage epochs must be strictly increasing, got {epochs}")
    if any(lr < 0 for _, lr in stages):
        raise ConfigError(f"{label}: learning rates must be non-negative")


@dataclass
class RelinearSchedule:
    """Frozen-then-shrunk learning-rate track for quadratic terms."""

    unfreeze_epoch: int = 50
    quad_lr_stages: tuple = ((0, 1e-6), (100, 2e-7), (150, 4e-8))
    base_lr_stages: tuple = ((0, 1e-4), (100, 2e-5), (150, 4e-6))

    def __post_init__(self):
        self.quad_lr_stages = tuple((int(e), float(lr)) for e, lr in self.quad_lr_stages)
        self.base_lr_stages = tuple((int(e), float(lr)) for e, lr in self.base_lr_stages)
        _check_stages(self.quad_lr_stages, "quad_lr_stages")
        _check_stages(self.base_lr_stages, "base_lr_stages")
        change_points = sorted({e for e, _ in self.quad_lr_stages} | {e for e, _ in self.base_lr_stages})
        for e in change_points:
            if not self.quad_lr(e) < self.base_lr(e):
                raise ConfigError(
                    f"quadratic lr {self.quad_lr(e)} must be below base lr {self.base_lr(e)} at epoch {e}"
                )

    def base_lr(self, epoch):
        return lr_at(self.base_lr_stages, epoch)

    def quad_lr(self, epoch):
        return lr_at(self.quad_lr_stages, epoch)

    def quadratic_trainable(self, epoch):
        return epoch >= self.unfreeze_epoch
