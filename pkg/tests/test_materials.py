import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqsim.materials import EPS0, Constant, MaterialModel, Microvaristor, dkappa_dE, kappa_of_E

VARISTOR = MaterialModel(1.0, Microvaristor(1e-10, 1e-4, 5e5, 5e4))


def test_constant_law():
    m = MaterialModel(2.0, Constant(1e-3))
    assert kappa_of_E(m, 0.0) == 1e-3
    assert np.all(kappa_of_E(m, np.array([1.0, 1e9])) == 1e-3)
    assert dkappa_dE(m, 3e5) == 0.0


def test_eps():
    assert MaterialModel(3.0).eps == pytest.approx(3.0 * 8.8541878128e-12)
    assert EPS0 == 8.8541878128e-12


def test_switch_point_is_geometric_mean():
    assert kappa_of_E(VARISTOR, 5e5) == pytest.approx(math.sqrt(1e-10 * 1e-4), rel=1e-12)


def test_zero_field_near_lower_value():
    k = kappa_of_E(VARISTOR, 0.0)
    assert 1e-10 / 1.001 <= k <= 1e-10 * 1.001


def test_closed_form():
    e = 4.3e5
    s = 0.5 * (1 + math.tanh((e - 5e5) / 5e4))
    assert kappa_of_E(VARISTOR, e) == pytest.approx(10 ** (-10 + 6 * s), rel=1e-13)


def test_derivative_richardson():
    # the plain central difference at this h carries a truncation error of
    # h^2 k'''/(6 k') ~ 7.6e-4; one Richardson step removes it
    e, h = 5e5, 5e2
    d = dkappa_dE(VARISTOR, e)

    def central(hh):
        return (kappa_of_E(VARISTOR, e + hh) - kappa_of_E(VARISTOR, e - hh)) / (2 * hh)

    fd = (4 * central(h / 2) - central(h)) / 3
    assert abs(d - fd) <= 1e-6 * abs(d)


def test_central_difference_truncation_matches_theory():
    e, h = 5e5, 5e2
    d = dkappa_dE(VARISTOR, e)
    fd = (kappa_of_E(VARISTOR, e + h) - kappa_of_E(VARISTOR, e - h)) / (2 * h)
    L1 = math.log(10) * 6 * 0.5 / 5e4
    L3 = -2 * math.log(10) * 6 * 0.5 / 5e4**3
    predicted = h * h / 6 * (L1**2 + L3 / L1)
    assert (fd - d) / d == pytest.approx(predicted, rel=1e-2)


def test_derivative_nonnegative_scan():
    e = np.linspace(0, 2e6, 1000)
    assert np.all(dkappa_dE(VARISTOR, e) >= 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-14, 1e-6), st.floats(1.0, 1e8), st.floats(1e3, 1e7), st.floats(1e2, 1e6),
       st.lists(st.floats(0, 1e8), min_size=2, max_size=20))
def test_monotone_and_bounded(lo, ratio, es, w, es_list):
    m = MaterialModel(1.0, Microvaristor(lo, lo * ratio, es, w))
    e = np.sort(np.array(es_list))
    k = kappa_of_E(m, e)
    assert np.all(np.diff(k) >= -1e-15 * k[1:])
    assert np.all(k >= lo * (1 - 1e-12)) and np.all(k <= lo * ratio * (1 + 1e-12))


def test_limits_span_range():
    m = MaterialModel(1.0, Microvaristor(1e-10, 1e-4, 5e5, 5e4))
    assert math.log10(kappa_of_E(m, 0.0)) == pytest.approx(-10, abs=1e-6)
    assert math.log10(kappa_of_E(m, 1e8)) == pytest.approx(-4, abs=1e-12)


def test_pure():
    e = np.random.default_rng(0).uniform(0, 1e6, 100)
    assert np.array_equal(kappa_of_E(VARISTOR, e), kappa_of_E(VARISTOR, e.copy()))


@pytest.mark.parametrize("bad", [-1.0, float("nan")])
def test_bad_field(bad):
    with pytest.raises(ValueError):
        kappa_of_E(VARISTOR, bad)


@pytest.mark.parametrize("args", [(0.0, 1e-4, 5e5, 5e4), (1e-4, 1e-10, 5e5, 5e4), (1e-10, 1e-4, 0.0, 5e4),
                                  (1e-10, 1e-4, 5e5, -1.0)])
def test_invalid_varistor(args):
    with pytest.raises(ValueError):
        Microvaristor(*args)


def test_invalid_models():
    with pytest.raises(ValueError):
        MaterialModel(0.0)
    with pytest.raises(ValueError):
        Constant(-1.0)
