import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microgrid_mpc.netmodel import LclParams, Load, NetworkTopology, Vsc, steady_state_gains
from microgrid_mpc.vsc import (
    VscStaticModel,
    dc_power,
    linearize_power,
    pwm_control_signal,
    selector,
    vsc_static_gains,
)

from conftest import random_topology

W = 2 * math.pi * 50


@pytest.fixture
def model():
    top = random_topology(4, n_bus=4, n_vsc=3)
    g = steady_state_gains(top)
    return top, g, vsc_static_gains(g, top.vscs[1].lcl, 1, top.omega)


@pytest.mark.parametrize(
    "u, i, expected",
    [((400.0, 0.0), (10.0, 0.0), 4000.0), ((400.0, 30.0), (0.0, 0.0), 0.0), ((400.0, 30.0), (10.0, -2.0), 3940.0)],
)
def test_dc_power_examples(u, i, expected):
    assert dc_power(u, i) == pytest.approx(expected)


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_dc_power_bilinear(a, b):
    u, i = np.array([400.0, 30.0]), np.array([10.0, -2.0])
    assert dc_power(a * u, b * i) == pytest.approx(a * b * dc_power(u, i), rel=1e-12, abs=1e-9)


def test_open_filter_without_capacitor():
    top = NetworkTopology(("a",), (), (), (Vsc("v", "a", LclParams(c_f=0.0)),))
    g = steady_state_gains(top, virtual_resistance=math.inf)
    m = vsc_static_gains(g, top.vscs[0].lcl, 0, top.omega)
    assert np.abs(m.g_iL).max() < 1e-12
    np.testing.assert_allclose(m.g_u, selector(0, 1), atol=1e-12)


def test_capacitor_term_magnitude():
    assert W * LclParams(r_f=0.15, l_f=3.8e-3, c_f=680e-6).c_f == pytest.approx(0.2136, abs=5e-5)


def test_kcl_at_filter_node(model, rng):
    top, g, m = model
    p = top.vscs[1].lcl
    v = rng.normal(400.0, 30.0, size=2 * top.n_vsc)
    vo = v[2:4]
    i_cap = np.array([-W * p.c_f * vo[1], W * p.c_f * vo[0]])  # jwC v in dq
    np.testing.assert_allclose(m.g_iL @ v, g.g_io_block(1) @ v + i_cap, rtol=1e-12, atol=1e-9)
    # and the bridge voltage is v_o plus the filter drop
    i_l = m.g_iL @ v
    drop = np.array([p.r_f * i_l[0] - W * p.l_f * i_l[1], p.r_f * i_l[1] + W * p.l_f * i_l[0]])
    np.testing.assert_allclose(m.g_u @ v, vo + drop, rtol=1e-12, atol=1e-9)


def test_lossless_open_filter_draws_no_power(rng):
    top = NetworkTopology(("a",), (), (), (Vsc("v", "a", LclParams(r_f=0.0)),))
    g = steady_state_gains(top, virtual_resistance=math.inf)
    m = vsc_static_gains(g, top.vscs[0].lcl, 0, top.omega)
    for v in rng.normal(0, 400, size=(10, 2)):
        assert abs(m.power(v)) < 1e-9 * (v @ v)


def test_index_out_of_range(model):
    top, g, _ = model
    with pytest.raises(IndexError):
        vsc_static_gains(g, top.vscs[0].lcl, 3, top.omega)


def test_linearization_anchor(model, rng):
    _, _, m = model
    v0 = rng.normal(400.0, 30.0, size=6)
    lin = linearize_power(m, v0)
    assert lin(v0) == pytest.approx(m.power(v0), rel=1e-12)
    np.testing.assert_allclose(lin.nominal_i_Ldq, m.g_iL @ v0)
    np.testing.assert_allclose(lin.nominal_u_dq, m.g_u @ v0)


def test_linearization_zero_nominal(model):
    lin = linearize_power(model[2], np.zeros(6))
    assert np.all(lin.coeff == 0.0) and lin.offset == 0.0


def test_linearization_error_is_second_order(model, rng):
    _, _, m = model
    v0 = rng.normal(400.0, 30.0, size=6)
    lin = linearize_power(m, v0)
    d = rng.normal(size=6)
    errs = [abs(m.power(v0 + h * d) - lin(v0 + h * d)) for h in (8.0, 4.0, 2.0)]
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=1e-6)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=1e-6)


def test_gradient_matches_finite_differences(model, rng):
    _, _, m = model
    v0 = rng.normal(400.0, 30.0, size=6)
    lin = linearize_power(m, v0)
    h = 1e-3
    fd = np.array([(m.power(v0 + h * e) - m.power(v0 - h * e)) / (2 * h) for e in np.eye(6)])
    assert np.abs(fd - lin.coeff).max() <= 1e-6 * np.abs(lin.coeff).max()


def test_pwm_signal():
    np.testing.assert_allclose(pwm_control_signal([400.0, 20.0], 0.5, 800.0), [1.0, 0.05])


def test_static_model_power_equals_dc_power(model, rng):
    _, _, m = model
    assert isinstance(m, VscStaticModel)
    v = rng.normal(400.0, 30.0, size=6)
    assert m.power(v) == pytest.approx(dc_power(m.input_voltage(v), m.inductor_current(v)))


def test_vsc_feeding_resistor_power_positive():
    top = NetworkTopology(("a",), (), (Load("a", 10.0),), (Vsc("v", "a"),))
    g = steady_state_gains(top, virtual_resistance=math.inf)
    m = vsc_static_gains(g, top.vscs[0].lcl, 0, top.omega)
    v = np.array([415.0, 0.0])
    i_o = g.g_io_block(0) @ v
    # supplied power covers at least what the resistor absorbs (filter losses on top)
    p_load = 10.0 * (g.g_iload @ v) @ (g.g_iload @ v)
    assert m.power(v) > p_load > 0
    assert np.isfinite(i_o).all()
