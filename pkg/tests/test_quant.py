from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitwire.quant import (
    QMAX,
    QMIN,
    QuantParams,
    QuantTensor,
    calibrate_params,
    check_alignment,
    dequantize,
    quantize,
    requantize,
    round_half_away,
)


def oracle_q(v: float, scale: float, zp: int) -> int:
    # decimal's ROUND_HALF_UP rounds ties away from zero
    r = int((Decimal(v) / Decimal(scale)).quantize(Decimal(1), rounding=ROUND_HALF_UP)) + zp
    return min(max(r, QMIN), QMAX)


@pytest.mark.parametrize("x,want", [(0.5, 1), (-0.5, -1), (1.5, 2), (-2.5, -3), (2.4999, 2), (0.0, 0)])
def test_round_half_away(x, want):
    assert round_half_away(x) == want
    assert round_half_away(np.array([x]))[0] == want


def test_calibrate_zero_to_25_5():
    p = calibrate_params([0.0, 25.5])
    assert p.scale == pytest.approx(0.1)
    assert p.zero_point == -128


def test_symmetric_endpoints():
    p = calibrate_params([-1.0, 1.0])
    t = quantize([1.0, -1.0], p)
    assert t.data.tolist() == [127, -128]


def test_degenerate_range_still_valid():
    p = calibrate_params([3.0, 3.0])
    assert p.scale > 0
    assert QMIN <= p.zero_point <= QMAX
    with pytest.raises(ValueError):
        calibrate_params([])


def test_requantize_known_value():
    t = QuantTensor((1,), QuantParams(0.1, 0), np.array([10], np.int8))
    assert requantize(t, QuantParams(0.2, 0)).data.tolist() == [5]


def test_saturation():
    p = QuantParams(0.1, 0)
    assert quantize([1000.0, -1000.0], p).data.tolist() == [127, -128]


@pytest.mark.parametrize("scale,zp", [(0, 0), (-1.0, 0), (float("nan"), 0), (0.1, 200), (0.1, 1.5)])
def test_bad_params(scale, zp):
    with pytest.raises(ValueError):
        QuantParams(scale, zp)


def test_alignment():
    a = QuantParams(0.05, -3)
    assert check_alignment(a, QuantParams(0.05, -3))
    assert check_alignment(a, QuantParams(0.05 * (1 + 1e-8), -3))
    bad = check_alignment(a, QuantParams(0.05, -2))
    assert not bad and "zero_point" in bad.detail
    bad = check_alignment(a, QuantParams(0.051, -3))
    assert not bad and "scale" in bad.detail


def test_bytes_round_trip():
    t = quantize(np.linspace(-1, 1, 24).reshape(2, 3, 4), QuantParams(0.01, 5))
    back = QuantTensor.frombytes(t.tobytes(), t.shape, t.params)
    assert back == t
    assert len(t.tobytes()) == 24


def test_shape_mismatch():
    with pytest.raises(ValueError):
        QuantTensor((3,), QuantParams(1.0), np.zeros(4, np.int8))


params_st = st.builds(
    QuantParams,
    scale=st.floats(1e-4, 10.0, allow_nan=False),
    zero_point=st.integers(QMIN, QMAX),
)


@settings(max_examples=300, deadline=None)
@given(params_st, st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=16))
def test_quantize_matches_decimal_oracle(p, values):
    got = quantize(values, p).data.tolist()
    assert got == [oracle_q(v, p.scale, p.zero_point) for v in values]


@settings(max_examples=200, deadline=None)
@given(params_st, st.data())
def test_round_trip_error_within_half_scale(p, data):
    lo, hi = p.representable_range
    v = data.draw(st.floats(lo, hi, allow_nan=False))
    err = abs(float(dequantize(quantize([v], p))[0]) - v)
    assert err <= p.scale / 2 * (1 + 1e-9)


@settings(max_examples=100, deadline=None)
@given(params_st, st.lists(st.integers(QMIN, QMAX), min_size=1, max_size=32))
def test_requantize_identity(p, qs):
    t = QuantTensor((len(qs),), p, np.array(qs, np.int8))
    assert requantize(t, p) == t
