import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rwre_lab.reference_quadrature import (
    InitialData,
    QuadratureError,
    TestFunction,
    bulk_variance,
    extremal_variance_closed_form,
    extremal_variance_quadrature,
    gaussian_density,
    general_ic_limit,
    limiting_field_variance,
    qvf_limit_integral,
    qvf_limit_mc,
    regime_coefficient,
)


def test_coincident_start_constant_phi_d1():
    # int_0^1 (4 pi s)^{-1/2} ds
    v = qvf_limit_integral(1.0, TestFunction.constant(1), [0.0], [0.0], 1).value
    assert abs(v - 1 / math.sqrt(math.pi)) < 1e-9


@given(t=st.floats(0.1, 4.0))
def test_sqrt_t_scaling_d1(t):
    one = TestFunction.constant(1)
    a = qvf_limit_integral(t, one, [0.0], [0.0], 1).value
    assert abs(a - math.sqrt(t / math.pi)) < 1e-8


@pytest.mark.parametrize("d,a1,a2", [(1, [0.3], [-0.2]), (2, [0.5, 0.0], [0.0, 0.0])])
def test_quadrature_against_monte_carlo(d, a1, a2):
    phi = TestFunction.gaussian([0.1] * d, 0.8)
    q = qvf_limit_integral(1.0, phi, a1, a2, d)
    mean, se = qvf_limit_mc(1.0, phi, a1, a2, d, 200000, seed=4)
    assert abs(q.value - mean) <= 4 * se + 1e-6


def test_coincident_starts_rejected_in_2d():
    with pytest.raises(QuadratureError):
        qvf_limit_integral(1.0, TestFunction.constant(2), [0.0, 0.0], [0.0, 0.0], 2)


def test_dirac_data_rejected_in_2d():
    with pytest.raises(QuadratureError):
        general_ic_limit(1.0, TestFunction.constant(2), InitialData.dirac([0.0, 0.0]), 2)


def test_gaussian_density_normalized():
    x = np.linspace(-12, 12, 4001)
    dens = gaussian_density(x[:, None], [0.5], [[2.0]])
    assert abs(np.trapezoid(dens, x) - 1.0) < 1e-9


@given(r=st.integers(0, 3), x=st.floats(-2, 2), c=st.floats(-1, 1), w=st.floats(0.5, 2))
def test_derivatives_against_finite_differences(r, x, c, w):
    phi = TestFunction.gaussian([c], w)
    h = 1e-3
    if r == 0:
        assert abs(phi.derivative((0,), np.array([[x]]))[0] - phi(np.array([[x]]))[0]) < 1e-14
        return
    lo = phi.derivative((r - 1,), np.array([[x - h]]))[0]
    hi = phi.derivative((r - 1,), np.array([[x + h]]))[0]
    fd = (hi - lo) / (2 * h)
    assert abs(phi.derivative((r,), np.array([[x]]))[0] - fd) < 1e-4 / w ** (r + 2)


def test_extremal_closed_form_matches_quadrature():
    phi = TestFunction.gaussian([0.0], 1.0)
    h0 = InitialData.gaussian([0.0], 0.5)
    a = extremal_variance_closed_form(1.0, phi, h0, 1).value
    b = extremal_variance_quadrature(1.0, phi, h0).value
    assert abs(a - b) < 1e-6 * abs(a)


def test_bulk_forms_agree():
    phi = TestFunction.gaussian([0.0], 1.0)
    h0 = InitialData.gaussian([0.0], 0.5)
    A = {((1,), (1,)): 0.35}
    a = bulk_variance(1.0, phi, h0, A, form="A_p").value
    b = bulk_variance(1.0, phi, h0, A, form="divergence").value
    assert a > 0
    assert abs(a - b) < 1e-5 * a


def test_regime_coefficients():
    assert regime_coefficient("B", gamma_sq=0.4) == 1.0
    assert regime_coefficient("C", gamma_sq=0.4) == pytest.approx(1 / 0.8)
    assert regime_coefficient("D", theta_eff=0.3, pi_f=0.2) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        regime_coefficient("C", gamma_sq=2.5)


def test_limiting_variance_linear_in_coefficient():
    phi = TestFunction.gaussian([0.0], 1.0)
    h0 = InitialData.dirac([0.0])
    a = limiting_field_variance("B", 1.0, phi, h0, {"gamma_sq": 0.2}, 1).value
    b = limiting_field_variance("B", 1.0, phi, h0, {"gamma_sq": 0.4}, 1).value
    assert abs(b - 2 * a) < 1e-9 * b
