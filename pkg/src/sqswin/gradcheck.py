"""Central finite-difference gradient checking against the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass
class GradCheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self):
        return relative_error(self.analytic, self.numeric)


@dataclass
class GradCheckResult:
    entries: list = field(default_factory=list)

    @property
    def max_rel_error(self):
        return max((e.rel_error for e in self.entries), default=0.0)

    def passed(self, tol):
        return self.max_rel_error <= tol


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def numerical_grad(loss_fn, tensor, index, h=1e-3):
    """d loss / d tensor[index] by central differences; ``loss_fn`` re-runs the forward."""
    old = tensor.data[index]
    try:
        tensor.data[index] = old + h
        with ad.no_grad():
            up = float(loss_fn().item())
        tensor.data[index] = old - h
        with ad.no_grad():
            down = float(loss_fn().item())
    finally:
        tensor.data[index] = old
    return (up - down) / (2 * h)


def check_gradients(loss_fn, params, n_samples=20, h=1e-3, seed=0):
    """Compare autodiff and finite-difference gradients on randomly chosen scalars.

    ``params`` maps names to leaf tensors.  Scalars are drawn uniformly over the
    union of all parameter entries (without replacement when possible).
    """
    for t in params.values():
        t.zero_grad()
    loss = loss_fn()
    ad.backward(loss)

    names = list(params)
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    result = GradCheckResult()
    for flat in sorted(int(p) for p in picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        t = params[names[k]]
        index = np.unravel_index(flat - offsets[k], t.shape)
        analytic = 0.0 if t.grad is None else float(t.grad[index])
        numeric = numerical_grad(loss_fn, t, index, h)
        result.entries.append(GradCheckEntry(names[k], tuple(int(i) for i in index), analytic, numeric))
    return result


# ------------------------------------------------------------ standard suite

def _perturb(params, rng, scale=0.3):
    """Move every parameter off its init so quadratic terms are exercised."""
    for t in params.values():
        t.data += rng.normal(0.0, scale, t.shape).astype(t.data.dtype)
        t.requires_grad = True


def neuron_check(seed=0, n_samples=20, h=1e-3):
    from .quadratic import QuadraticLinear

    rng = np.random.default_rng(seed)
    layer = QuadraticLinear(6, 4, rng)
    params = layer.parameters()
    _perturb(params, rng)
    x = ad.Tensor(rng.normal(size=(5, 6)))
    r = ad.Tensor(rng.normal(size=(5, 4)))
    return check_gradients(lambda: ad.sum(ad.hadamard(layer(x), r)), params, n_samples, h, seed)


def block_check(seed=0, n_samples=20, h=1e-3):
    from .model import QSwinBlock, QSwinConfig

    rng = np.random.default_rng(seed)
    cfg = QSwinConfig.tiny()
    block = QSwinBlock(8, 2, 4, 2, 1, cfg, rng)
    params = block.parameters()
    _perturb(params, rng, 0.1)
    x = ad.Tensor(rng.normal(size=(2, 16, 8)))
    r = ad.Tensor(rng.normal(size=(2, 16, 8)))
    return check_gradients(lambda: ad.sum(ad.hadamard(block(x, shifted=True), r)), params, n_samples, h, seed)


def model_check(seed=0, n_samples=20, h=1e-3):
    from .model import QSwinConfig, QSwinModel
    from .siamese import pair_batch_loss

    rng = np.random.default_rng(seed)
    model = QSwinModel(QSwinConfig.tiny(), seed=seed)
    params = model.parameters()
    _perturb(params, rng, 0.05)
    res = model.cfg.input_resolution
    x0, x1 = rng.uniform(size=(2, 2, res, res, 3))
    y0, y1 = rng.uniform(0, 3, size=(2, 2))
    return check_gradients(lambda: pair_batch_loss(model, x0, y0, x1, y1)[0], params, n_samples, h, seed)


SUITE = (("quadratic neuron", neuron_check, 1e-3),
         ("quadratic block", block_check, 1e-3),
         ("tiny model", model_check, 1e-2))


def run_suite(seed=0, n_samples=20, h=1e-3):
    """Run the three standard checks in float64; yields ``(name, result, tol)``."""
    out = []
    with ad.precision(np.float64):
        for name, fn, tol in SUITE:
            out.append((name, fn(seed, n_samples, h), tol))
    return out
