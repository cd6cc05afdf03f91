import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rwre_lab.env_models import ModelError, nearest_neighbor, simple_random_walk, symmetric_lazy
from rwre_lab.invariant_measure import (
    bulk_coefficients,
    c_d,
    f_integral,
    gamma_ext_literal,
    gamma_ext_sq,
    green_oracle_exp_functional,
    invariant_measure,
    return_probability,
    theta_eff,
    walker_coords,
)
from rwre_lab.kpoint_motion import difference_kernel

POLYA_Z3 = 0.3405373296


def test_uniform_nearest_neighbor_ratio():
    pi = invariant_measure(nearest_neighbor(1))
    assert abs(pi.weight((0,)) / pi.c_far - 1.5) < 1e-8


@pytest.mark.parametrize("spec", [nearest_neighbor(1), nearest_neighbor(2), simple_random_walk(2)],
                         ids=["nn1", "nn2", "srw2"])
def test_unit_normalization(spec):
    pi = invariant_measure(spec)
    total = f_integral(pi, difference_kernel(spec), walker_coords(spec))["total"]
    assert abs(total - 1.0) < 1e-8


def test_window_doubling_stable():
    spec = nearest_neighbor(2)
    a = invariant_measure(spec, 20).weight((0, 0))
    b = invariant_measure(spec, 40).weight((0, 0))
    assert abs(a - b) / b < 5e-3


def test_planar_simple_walk_value():
    assert abs(invariant_measure(simple_random_walk(2)).weight((0, 0)) - 2 / math.pi) < 1e-8


def test_polya_constant():
    assert abs(return_probability(difference_kernel(simple_random_walk(3))) - POLYA_Z3) < 1e-4


def test_dimension_constants():
    assert c_d(1) == 2.0
    assert abs(c_d(2) - 2 * math.pi) < 1e-15
    assert abs(c_d(3) - 4 * math.pi) < 1e-12


@given(v=st.floats(0.1, 3.0), c=st.floats(0.2, 4.0))
def test_gamma_quadratic_in_v(v, c):
    spec = nearest_neighbor(1)
    assert abs(gamma_ext_sq(spec, [c * v]) - c**2 * gamma_ext_sq(spec, [v])) < 1e-10 * c**2 * v**2


def test_gamma_forms_agree_for_p1():
    for spec, v in [(nearest_neighbor(1), [1.0]), (nearest_neighbor(2), [0.6, 0.8])]:
        assert abs(gamma_ext_sq(spec, v) - gamma_ext_literal(spec, v)) < 1e-12


def test_gamma_literal_sign_for_p2():
    spec = symmetric_lazy(1)
    assert gamma_ext_sq(spec, [1.0]) > 0
    assert abs(gamma_ext_sq(spec, [1.0]) + gamma_ext_literal(spec, [1.0])) < 1e-12


def test_gamma_isotropic_in_plane():
    spec = nearest_neighbor(2)
    a = gamma_ext_sq(spec, [1.0, 0.0])
    b = gamma_ext_sq(spec, [math.sqrt(0.5), math.sqrt(0.5)])
    assert abs(a - b) < 1e-10


def test_bulk_coefficient_matches_gamma_for_p1():
    spec = nearest_neighbor(1)
    assert abs(bulk_coefficients(spec).A_p[((1,), (1,))] - gamma_ext_sq(spec, [1.0])) < 1e-12


def test_theta_eff_small_tilt_close_to_pi():
    spec = nearest_neighbor(3)
    f = {(0, 0, 0): 1.0}
    est = theta_eff(spec, f, [1e-3, 0, 0], replicas=400, horizon=5000, seed=2)
    pf = invariant_measure(spec).integrate(f)
    assert abs(est.value - pf) <= 3 * math.hypot(est.stderr, est.extra["solver_error"]) + 1e-6


def test_exp_functional_oracle_exceeds_one():
    assert green_oracle_exp_functional(nearest_neighbor(3), [0.3, 0, 0], (0, 0, 0)) > 1.0


def test_theta_eff_needs_transience():
    with pytest.raises(ModelError):
        theta_eff(nearest_neighbor(2), {(0, 0): 1.0}, [0.1, 0.0])


def test_resummed_and_series_agree():
    spec = nearest_neighbor(3)
    from rwre_lab.kpoint_motion import Tilt, vartheta_table

    v = np.array([0.1, 0.0, 0.0])
    th = vartheta_table(spec, Tilt.from_normalized(spec, v)).as_dict()
    a = theta_eff(spec, th, v, 400, 5000, 1, form="series")
    b = theta_eff(spec, th, v, 400, 5000, 1, form="resummed")
    assert abs(a.value - b.value) <= 3 * math.hypot(a.stderr, b.stderr) + 1e-9
