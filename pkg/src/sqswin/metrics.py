"""Regression metrics: absolute and squared error plus Pearson correlation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, UndefinedCorrelationError


@dataclass
class MetricsResult:
    mae: float
    mse: float
    pcc: float
    n: int


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.size == 0:
        raise ContractError("metrics need at least one sample")
    if y.shape != y_hat.shape:
        raise ContractError(f"length mismatch: {y.size} labels vs {y_hat.size} predictions")
    return y, y_hat


def mae(y, y_hat):
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def mse(y, y_hat):
    y, y_hat = _pair(y, y_hat)
    return float(np.mean((y - y_hat) ** 2))


def pcc(y, y_hat):
    """Pearson correlation; raises instead of returning NaN for constant input."""
    y, y_hat = _pair(y, y_hat)
    dy, dp = y - y.mean(), y_hat - y_hat.mean()
    sy, sp = np.sqrt(np.mean(dy * dy)), np.sqrt(np.mean(dp * dp))
    if sy == 0 or sp == 0:
        raise UndefinedCorrelationError("correlation undefined: a vector has zero variance")
    r = float(np.mean(dy * dp) / (sy * sp))
    return min(1.0, max(-1.0, r))


def evaluate_metrics(y, y_hat):
    """All three metrics; pcc is NaN (not an error) when undefined."""
    try:
        r = pcc(y, y_hat)
    except UndefinedCorrelationError:
        r = float("nan")
    return MetricsResult(mae(y, y_hat), mse(y, y_hat), r, int(np.size(y)))
