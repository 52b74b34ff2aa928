"""Sample pairing and the prediction / siamese / total losses.

Both branches of the twin are the same model object: ``siamese_forward`` calls
``model.forward`` twice, so the weights are shared structurally and gradients
from both branches accumulate into one parameter store.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, ShapeError, ValidationError

LABEL_MIN, LABEL_MAX = 0.0, 3.0


@dataclass
class SiamesePair:
    x0: np.ndarray
    x1: np.ndarray
    y0: float
    y1: float

    def __post_init__(self):
        for y in (self.y0, self.y1):
            if not LABEL_MIN <= y <= LABEL_MAX:
                raise ValidationError(f"label {y} outside [{LABEL_MIN}, {LABEL_MAX}]")


@dataclass
class LossBundle:
    prediction_loss: float
    siamese_loss: float
    total: float
    alpha: float


def pair_indices(n, rng):
    """Shuffle ``0..n-1`` and pair neighbours; an odd leftover joins a random partner."""
    if n < 2:
        raise ContractError(f"pairing needs at least 2 samples, got {n}")
    order = rng.permutation(n)
    pairs = [(int(order[i]), int(order[i + 1])) for i in range(0, n - 1, 2)]
    if n % 2:
        last = int(order[-1])
        partner = int(order[rng.integers(n - 1)])
        pairs.append((last, partner))
    return pairs


def make_pairs(batch, seed):
    """Randomly pair a batch of ``(image, label)`` samples without self-pairs."""
    rng = np.random.default_rng(seed)
    return [
        SiamesePair(batch[i][0], batch[j][0], float(batch[i][1]), float(batch[j][1]))
        for i, j in pair_indices(len(batch), rng)
    ]


def prediction_loss(y0, y0_hat, y1, y1_hat):
    return (y0 - y0_hat) ** 2 + (y1 - y1_hat) ** 2


def siamese_loss(f0, f1, y0, y1):
    """``| ||f0 - f1||^2 - (y0 - y1)^2 |`` for one pair."""
    f0, f1 = np.asarray(f0, dtype=np.float64), np.asarray(f1, dtype=np.float64)
    if f0.shape != f1.shape:
        raise ShapeError(f"feature shapes differ: {f0.shape} vs {f1.shape}")
    d = f0 - f1
    return abs(float(d @ d) - (y0 - y1) ** 2)


def total_loss(lp, ls, alpha=1.0):
    if alpha < 0:
        raise ContractError(f"alpha must be non-negative, got {alpha}")
    return LossBundle(float(lp), float(ls), float(lp + alpha * ls), float(alpha))


# ---------------------------------------------------------- tensor (batched)

def prediction_loss_tensor(y0, s0, y1, s1):
    """Mean over pairs of the per-pair prediction loss; ``s*`` are score tensors ``[P]``."""
    e0 = ad.subtract(s0, y0)
    e1 = ad.subtract(s1, y1)
    return ad.mean(ad.add(ad.hadamard(e0, e0), ad.hadamard(e1, e1)))


def siamese_loss_tensor(f0, f1, y0, y1):
    """Mean over pairs of ``| ||f0 - f1||^2 - (y0 - y1)^2 |``; ``f*`` are ``[P, F]``."""
    if f0.shape != f1.shape:
        raise ShapeError(f"feature shapes differ: {f0.shape} vs {f1.shape}")
    d = ad.subtract(f0, f1)
    dist = ad.sum(ad.hadamard(d, d), axis=-1)
    target = (np.asarray(y0) - np.asarray(y1)) ** 2
    return ad.mean(ad.abs(ad.subtract(dist, target)))


def siamese_forward(model, pair):
    """Run both branches through the one shared model; returns ``(f0, y0_hat, f1, y1_hat)``."""
    res = model.cfg.input_resolution
    for x in (pair.x0, pair.x1):
        if np.shape(x)[:2] != (res, res):
            raise ConfigError(f"pair image shape {np.shape(x)} does not match model resolution {res}")
    f0, s0 = model.forward(np.asarray(pair.x0)[None])
    f1, s1 = model.forward(np.asarray(pair.x1)[None])
    return f0.data[0], float(s0.data[0]), f1.data[0], float(s1.data[0])


def pair_batch_loss(model, x0, y0, x1, y1, alpha=1.0, siamese=True):
    """Loss tensor plus its LossBundle for a batch of pairs.

    With ``siamese=False`` the siamese branch is skipped entirely and only the
    prediction loss is optimized.
    """
    if alpha < 0:
        raise ContractError(f"alpha must be non-negative, got {alpha}")
    dtype = ad.get_dtype()
    y0 = np.asarray(y0, dtype=dtype)
    y1 = np.asarray(y1, dtype=dtype)
    f0, s0 = model.forward(x0)
    f1, s1 = model.forward(x1)
    lp = prediction_loss_tensor(y0, s0, y1, s1)
    if not siamese:
        return lp, LossBundle(lp.item(), 0.0, lp.item(), 0.0)
    ls = siamese_loss_tensor(f0, f1, y0, y1)
    loss = ad.add(lp, ad.scale(ls, alpha))
    return loss, LossBundle(lp.item(), ls.item(), loss.item(), float(alpha))
