import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from stochformer.errors import ContractError, NumericError
from stochformer.metrics import ccc, evaluate, rmse

vec = hnp.arrays(np.float64, st.integers(2, 30), elements=st.floats(-100, 100, allow_nan=False))


def test_rmse_equal():
    assert rmse([1, 2, 3], [1, 2, 3]) == 0.0


def test_rmse_hand_value():
    # sqrt((0 + 0 + 16) / 3)
    assert rmse([1, 2, 3], [1, 2, 7]) == pytest.approx(math.sqrt(16 / 3), abs=1e-15)
    assert rmse([1, 2, 3], [1, 2, 7]) == pytest.approx(2.309401076758503, abs=1e-6)


def test_rmse_errors():
    with pytest.raises(ContractError):
        rmse([1, 2], [1])
    with pytest.raises(ContractError):
        rmse([], [])


def test_ccc_perfect():
    assert ccc([1.0, 4.0, 2.0], [1.0, 4.0, 2.0]) == 1.0


def test_ccc_reversed():
    # cov = -2/3, denominator = 2/3 + 2/3 + 0
    assert ccc([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-12)


def test_ccc_shift_closed_form():
    t = np.array([1.0, 3.0, 4.0, 8.0])
    var = t.var()
    for c in (0.5, 2.0, -7.0):
        assert ccc(t + c, t) == pytest.approx(2 * var / (c * c + 2 * var), abs=1e-12)
        assert ccc(t + c, t) < 1


def test_ccc_constant_pair():
    with pytest.raises(NumericError):
        ccc([2.0, 2.0], [2.0, 2.0])


def test_ccc_needs_two():
    with pytest.raises(ContractError):
        ccc([1.0], [1.0])


def test_evaluate_marks_undefined_ccc():
    rep = evaluate([5.0, 5.0], [5.0, 5.0], "val")
    assert rep.rmse == 0.0 and math.isnan(rep.ccc) and rep.n == 2


def test_report_text_round_trips_repr():
    rep = evaluate([1.0, 2.0, 3.0], [1.0, 2.0, 7.0], "test")
    kv = dict(line.split("=", 1) for line in rep.to_kv().splitlines())
    assert float(kv["rmse"]) == rep.rmse and kv["split"] == "test"


@settings(max_examples=100, deadline=None)
@given(vec, st.floats(-50, 50))
def test_rmse_translation_invariant(p, c):
    t = p[::-1].copy()
    assert rmse(p + c, t + c) == pytest.approx(rmse(p, t), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(vec)
def test_ccc_bounded_and_symmetric(p):
    t = np.roll(p, 1) + np.linspace(0, 1, p.size)
    assume(np.ptp(p) > 1e-6 or np.ptp(t) > 1e-6)
    value = ccc(p, t)
    assert -1 - 1e-12 <= value <= 1 + 1e-12
    assert value == pytest.approx(ccc(t, p), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(vec)
def test_ccc_self_is_one(x):
    assume(np.ptp(x) > 1e-6)
    assert ccc(x, x) == pytest.approx(1.0, abs=1e-12)
