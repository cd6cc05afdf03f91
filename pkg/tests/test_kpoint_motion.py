import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rwre_lab.env_models import ModelError, nearest_neighbor, symmetric_lazy
from rwre_lab.kpoint_motion import (
    Tilt,
    cumulant_gap,
    difference_kernel,
    exact_pair_distribution,
    pair_tables,
    simulate_quenched_kpoint,
    taylor_remainder_slope,
    tilting_identity_check,
    tilting_identity_mc,
    u_table,
    vartheta_table,
    zeta_table,
)


@given(a=st.floats(-0.4, 0.4), h=st.integers(1, 8), gap=st.sampled_from([0, 2, 4]))
def test_tilting_identity_enumeration(a, h, gap):
    r = tilting_identity_check(nearest_neighbor(1), [a], lambda x, y: float(abs(x[0] - y[0]) <= 2), h,
                               x1=(0,), x2=(gap,))
    assert abs(r["lhs"] - r["rhs"]) <= 1e-10 * max(1.0, abs(r["lhs"]))


def test_tilting_identity_enumeration_2d():
    r = tilting_identity_check(nearest_neighbor(2), [0.2, -0.1], lambda x, y: float(x[0] == y[0]), 3,
                               x1=(0, 0), x2=(2, 0))
    assert abs(r["lhs"] - r["rhs"]) <= 1e-10 * max(1.0, abs(r["lhs"]))


def test_tilting_identity_monte_carlo():
    spec = nearest_neighbor(1)
    r = tilting_identity_mc(spec, [0.2], lambda x, y: float(abs(x[0] - y[0]) <= 2), 8, 4000, 3)
    assert r["residual"] <= 4 * r["stderr"]


@given(v=st.floats(0.05, 0.5), c=st.floats(0.1, 3.0), p2=st.booleans())
def test_zeta_homogeneity(v, c, p2):
    spec = symmetric_lazy(1) if p2 else nearest_neighbor(1)
    p = 2 if p2 else 1
    z1 = zeta_table(spec, [v])
    z2 = zeta_table(spec, [c * v])
    assert np.allclose(z2.values, c ** (2 * p) * z1.values, rtol=1e-10, atol=1e-300)


@given(a=st.floats(-0.4, 0.4), b=st.floats(-0.4, 0.4))
def test_vartheta_is_expm1_of_u(a, b):
    spec = nearest_neighbor(2)
    u = u_table(spec, [a, b])
    th = vartheta_table(spec, [a, b])
    assert u.keys == th.keys
    assert np.allclose(th.values, np.expm1(u.values), rtol=1e-12, atol=1e-15)


def test_u_vanishes_without_tilt():
    assert np.allclose(u_table(nearest_neighbor(1), [0.0]).values, 0.0)


def test_pair_law_marginals_are_mu():
    pt = pair_tables(nearest_neighbor(1))
    law = exact_pair_distribution(pt, (0,), (0,), 5)
    assert abs(sum(law.values()) - 1.0) < 1e-12
    m1: dict = {}
    for (a, _), p in law.items():
        m1[a] = m1.get(a, 0.0) + p
    free = exact_pair_distribution(pt, (0,), (40,), 5)
    f1: dict = {}
    for (a, _), p in free.items():
        f1[a] = f1.get(a, 0.0) + p
    for k in f1:
        assert abs(m1.get(k, 0.0) - f1[k]) < 1e-12


def test_difference_kernel_rows_are_laws():
    dk = difference_kernel(nearest_neighbor(2))
    assert abs(dk.far.sum() - 1.0) < 1e-12
    assert np.allclose(dk.near.sum(axis=1), 1.0, atol=1e-12)


def test_two_point_cumulant_gap_vanishes_far_apart():
    spec = nearest_neighbor(1)
    assert abs(cumulant_gap(spec, [0.3], 2, [(0,), (50,)])) < 1e-12
    assert cumulant_gap(spec, [0.3], 2, [(0,), (0,)]) > 0


def test_quenched_walkers_share_environment():
    spec = nearest_neighbor(1)
    a = simulate_quenched_kpoint(spec, 3, [(0,), (0,), (4,)], 30, seed=5)
    b = simulate_quenched_kpoint(spec, 3, [(0,), (0,), (4,)], 30, seed=5)
    assert a.shape == (31, 3, 1)
    assert np.array_equal(a, b)
    steps = np.abs(np.diff(a[:, :, 0], axis=0))
    assert np.all(steps % 2 == 0) and np.all(steps <= 2)


@pytest.mark.parametrize("spec,p", [(nearest_neighbor(1), 1), (nearest_neighbor(2), 1), (symmetric_lazy(1), 2)])
def test_taylor_remainder_order(spec, p):
    slope, _, _ = taylor_remainder_slope(spec, np.ones(spec.d))
    assert slope >= 2 * p + 1 - 0.2


def test_tilt_from_normalized_coordinates():
    spec = nearest_neighbor(1)
    t = Tilt.from_normalized(spec, [1.0])
    # two elementary steps per composite step: variance 2
    assert abs(t.vector[0] - 1 / math.sqrt(2)) < 1e-12


def test_inadmissible_tilt_rejected():
    with pytest.raises(ModelError):
        u_table(nearest_neighbor(1), [50.0])
