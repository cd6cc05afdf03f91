import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rwre_lab.env_models import (
    EnvironmentSpec,
    ModelError,
    WeightLaw,
    build_step_distribution,
    mgf_oracle,
    nearest_neighbor,
    random_landscape,
    sample_kernel_row,
    simple_random_walk,
    symmetric_lazy,
    symmetry_order,
    two_point_kernel,
    validate_assumptions,
)

MODELS = [nearest_neighbor(1), nearest_neighbor(2), symmetric_lazy(1), random_landscape(1), simple_random_walk(2)]


@pytest.mark.parametrize("spec", MODELS[:4], ids=lambda s: f"{s.model}-d{s.d}")
def test_assumptions_hold(spec):
    rep = validate_assumptions(spec)
    assert all(rep.checks.values()), rep.details


def test_deterministic_kernel_flagged():
    rep = validate_assumptions(simple_random_walk(2))
    assert not rep.checks["symmetry_order"]


@given(seed=st.integers(0, 2**32), r=st.integers(1, 1000), x=st.integers(-500, 500), k=st.integers(0, 4))
def test_kernel_row_mass(seed, r, x, k):
    spec = MODELS[k]
    row = sample_kernel_row(spec, seed, r, tuple([x] + [0] * (spec.d - 1)))
    assert abs(row.probs.sum() - 1.0) < 1e-12
    assert np.all(row.probs >= 0)


@given(seed=st.integers(0, 2**32), r=st.integers(1, 50), x=st.integers(-50, 50))
def test_kernel_row_deterministic(seed, r, x):
    a = sample_kernel_row(nearest_neighbor(1), seed, r, (x,))
    b = sample_kernel_row(nearest_neighbor(1), seed, r, (x,))
    assert np.array_equal(a.probs, b.probs)


@pytest.mark.parametrize("spec", MODELS, ids=lambda s: f"{s.model}-d{s.d}")
def test_two_point_marginals(spec):
    mu = build_step_distribution(spec)
    for y in [(0,) * spec.d, (1,) + (0,) * (spec.d - 1), (7,) + (0,) * (spec.d - 1)]:
        k = two_point_kernel(spec, y)
        assert np.allclose(k.joint.sum(axis=1), k.mu, atol=1e-12)
        assert np.allclose(k.joint.sum(axis=0), k.mu, atol=1e-12)
        assert abs(k.joint.sum() - 1.0) < 1e-12
    assert abs(mu.probs.sum() - 1.0) < 1e-12


def test_far_pairs_independent():
    k = two_point_kernel(nearest_neighbor(1), (40,))
    assert np.allclose(k.joint, np.outer(k.mu, k.mu), atol=1e-14)


def test_normalization_gives_identity_covariance():
    for spec in MODELS:
        mu = build_step_distribution(spec)
        A = mu.normalization
        assert np.allclose(A @ mu.cov @ A.T, np.eye(spec.d), atol=1e-12)


def test_symmetry_orders():
    assert symmetry_order(nearest_neighbor(1)) == 1
    assert symmetry_order(symmetric_lazy(1)) == 2


@given(s=st.floats(-0.5, 0.5))
def test_mgf_matches_direct_sum(s):
    mu = build_step_distribution(nearest_neighbor(1))
    m = mgf_oracle(mu)
    direct = float(mu.probs @ np.exp(mu.offsets[:, 0] * s))
    assert abs(m.log_M([s]) - np.log(direct)) < 1e-12


def test_bad_specs_rejected():
    with pytest.raises(ModelError):
        validate_assumptions(EnvironmentSpec("no_such_model", 1))
    with pytest.raises((ModelError, ValueError)):
        build_step_distribution(nearest_neighbor(1, weight_law="no_such_law"))
    assert WeightLaw().kind == "uniform"


def test_row_index_starts_at_one():
    with pytest.raises(ModelError):
        sample_kernel_row(nearest_neighbor(1), 0, 0, (0,))


def test_tilt_beyond_radius_rejected():
    m = mgf_oracle(build_step_distribution(nearest_neighbor(1)))
    with pytest.raises(ModelError):
        m.log_M([10 * m.z0])
