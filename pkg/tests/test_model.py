import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowcal.model import (DomainError, SpeedFlowParams, TrafficState, density, predict_speed,
                           speed_at_capacity)


def test_plateau_returns_free_flow_speed(sp280):
    assert predict_speed(sp280, 200.0) == 109.6
    assert predict_speed(sp280, 383.0) == 109.6
    assert predict_speed(sp280, 0.0) == 109.6


def test_capacity_endpoint(sp280):
    assert predict_speed(sp280, 2254.0) == pytest.approx(2254 / 26, rel=1e-12)


def test_interior_point_matches_high_precision_evaluation(sp280):
    # 30-digit mpmath evaluation of the decreasing branch at q = 1500
    assert predict_speed(sp280, 1500.0) == pytest.approx(98.75695025381491, rel=1e-12)


def test_array_input(sp280):
    q = np.array([0.0, 383.0, 1500.0, 2254.0])
    u = predict_speed(sp280, q)
    assert u.shape == (4,)
    assert u[0] == u[1] == 109.6
    assert u[3] == pytest.approx(2254 / 26)


@pytest.mark.parametrize("q", [-1.0, 2254.0001, 3000.0, math.nan])
def test_outside_domain_raises(sp280, q):
    with pytest.raises(DomainError):
        predict_speed(sp280, q)


@pytest.mark.parametrize("params", [
    SpeedFlowParams(100, 2000, 2000, 1.5, 26),   # bp == q_c
    SpeedFlowParams(100, 2000, 500, 0.9, 26),    # alpha < 1
    SpeedFlowParams(70, 2000, 500, 1.5, 26),     # q_c/k_c above u_f
    SpeedFlowParams(100, 2000, -1, 1.5, 26),
    SpeedFlowParams(100, 2000, 500, 1.5, 0),
])
def test_invalid_params_rejected(params):
    assert not params.is_valid
    with pytest.raises(DomainError):
        predict_speed(params, 0.0)


@pytest.mark.parametrize("q_c, k_c, expected", [
    (2254, 26, 86.69230769230769),
    (2600, 26, 100.0),
    (2461, 26, 94.65384615384616),
])
def test_speed_at_capacity(q_c, k_c, expected):
    p = SpeedFlowParams(120.0, q_c, 100.0, 1.5, k_c)
    assert speed_at_capacity(p) == pytest.approx(expected, rel=1e-15)


def test_rural_mean_capacity_speed_close_to_reference_median():
    assert round(speed_at_capacity(SpeedFlowParams(115.5, 2461, 468, 1.52, 26)), 1) == pytest.approx(94.7, abs=0.06)


def test_density():
    assert density(2000, 100) == 20
    assert density(0, 80) == 0
    assert density(2254, 2254 / 26) == pytest.approx(26.0, abs=1e-6)
    assert TrafficState(1200, 105).k == pytest.approx(11.428571428571429)
    with pytest.raises(DomainError):
        density(100, 0)
    with pytest.raises(DomainError):
        density(100, -5)


@st.composite
def valid_params(draw, min_bp=0.0):
    k_c = draw(st.sampled_from([25.0, 26.0]))
    q_c = draw(st.floats(500, 2800))
    bp = draw(st.floats(min_bp, 0.95)) * q_c
    u_f = q_c / k_c + draw(st.floats(0.5, 60))
    alpha = draw(st.floats(1.0, 3.0))
    return SpeedFlowParams(u_f, q_c, bp, alpha, k_c)


@settings(max_examples=200, deadline=None)
@given(valid_params())
def test_continuity_and_endpoint(p):
    assert predict_speed(p, p.bp) == p.u_f
    just_above = np.nextafter(p.bp, np.inf)
    assert predict_speed(p, just_above) == pytest.approx(p.u_f, rel=1e-9)
    assert predict_speed(p, p.q_c) == pytest.approx(p.q_c / p.k_c, rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(valid_params(), st.lists(st.floats(0, 1), min_size=2, max_size=30))
def test_monotone_decreasing_past_breakpoint(p, fracs):
    q = np.sort(p.bp + (p.q_c - p.bp) * np.asarray(fracs))
    u = predict_speed(p, q)
    assert np.all(np.diff(u) <= 0)


@settings(max_examples=100, deadline=None)
@given(valid_params())
def test_alpha_one_is_linear(p):
    lin = SpeedFlowParams(p.u_f, p.q_c, p.bp, 1.0, p.k_c)
    q = np.linspace(p.bp, p.q_c, 50)
    expected = np.interp(q, [p.bp, p.q_c], [p.u_f, p.q_c / p.k_c])
    np.testing.assert_allclose(predict_speed(lin, q), expected, rtol=1e-9)


def test_zero_breakpoint_is_pure_power_law():
    p = SpeedFlowParams(110.0, 2300.0, 0.0, 1.7, 26.0)
    q = np.linspace(0.0, 2300.0, 1001)
    u = predict_speed(p, q)
    assert np.all(np.isfinite(u))
    assert u[0] == 110.0
    assert np.all(np.diff(u) < 0)
