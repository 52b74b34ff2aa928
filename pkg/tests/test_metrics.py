import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sqswin.errors import ContractError, UndefinedCorrelationError
from sqswin.metrics import evaluate_metrics, mae, mse, pcc

vectors = st.lists(st.floats(-3, 3, allow_nan=False), min_size=2, max_size=30)


def test_perfect_prediction():
    y = [0.5, 1.0, 2.5]
    assert mae(y, y) == 0 and mse(y, y) == 0 and pcc(y, y) == pytest.approx(1.0, abs=1e-12)


def test_small_examples():
    assert mae([0, 2], [1, 1]) == 1.0
    assert mse([0, 2], [1, 1]) == 1.0


def test_outlier_weighs_more_in_mse():
    y, p = [0, 0, 0, 0], [2, 0, 0, 0]
    assert mse(y, p) == 1.0 and mae(y, p) == 0.5


def test_pcc_affine_and_negation():
    y = np.array([0.1, 0.7, 1.9, 2.4, 3.0])
    assert pcc(y, 2.5 * y + 1.0) == pytest.approx(1.0, abs=1e-12)
    assert pcc(y, -y) == pytest.approx(-1.0, abs=1e-12)


def test_pcc_zero_variance_raises():
    with pytest.raises(UndefinedCorrelationError):
        pcc([1, 1, 1], [0, 1, 2])
    assert np.isnan(evaluate_metrics([1, 1, 1], [0, 1, 2]).pcc)


def test_empty_and_mismatch():
    with pytest.raises(ContractError):
        mae([], [])
    with pytest.raises(ContractError):
        mse([1, 2], [1])


@settings(max_examples=60, deadline=None)
@given(vectors, st.integers(0, 1000))
def test_properties(y, seed):
    rng = np.random.default_rng(seed)
    y = np.array(y)
    p = y + rng.normal(size=y.size)
    perm = rng.permutation(y.size)
    assert mae(y, p) == pytest.approx(mae(y[perm], p[perm]), abs=1e-12)
    assert mae(y, p) ** 2 <= mse(y, p) + 1e-12
    if np.std(y) > 1e-9:
        r = pcc(y, p)
        assert abs(r) <= 1 + 1e-9
        assert abs(r - pcc(p, y)) <= 1e-12


def test_result_fields():
    res = evaluate_metrics([0, 1, 2, 3], [0.1, 1.1, 1.9, 3.2])
    assert res.n == 4 and res.mse >= 0 and res.mae >= 0
