import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from rwre_lab.env_models import nearest_neighbor, simple_random_walk
from rwre_lab.limit_estimators import (
    SRIChainHandle,
    TestReport,
    backward_propagation_test,
    chi2_geometric,
    collision_record,
    indicator,
    jitter_counts,
    ks_exponential,
    mean_ci,
    normality_check,
    stats_suite,
    trend_slope,
)
from rwre_lab.reference_quadrature import TestFunction


def test_constant_samples_have_zero_stderr():
    m = mean_ci(np.full(50, 3.0))
    assert m.value == 3.0 and m.stderr == 0.0


def test_ks_calibrated_on_exponential_samples():
    rng = np.random.default_rng(0)
    ps = [ks_exponential(rng.exponential(2.0, 500), 2.0)[1] for _ in range(200)]
    # p-values of a calibrated test are uniform
    assert stats.kstest(ps, "uniform").pvalue > 0.01


def test_ks_rejects_mixture():
    rng = np.random.default_rng(1)
    x = np.concatenate([rng.exponential(1.0, 5000), rng.normal(3.0, 0.3, 5000)])
    assert ks_exponential(x)[1] < 1e-6


@given(n=st.integers(1, 50), seed=st.integers(0, 1000))
def test_jitter_stays_in_cell(n, seed):
    counts = np.arange(n)
    j = jitter_counts(counts, 2.0, np.random.default_rng(seed))
    assert np.all(j >= counts / 2.0) and np.all(j < (counts + 1) / 2.0)


def test_chi2_geometric_accepts_geometric():
    rng = np.random.default_rng(3)
    x = rng.geometric(0.3, 5000)
    stat, p, dof = chi2_geometric(x, 0.3)
    assert p > 0.001 and dof >= 2
    assert chi2_geometric(x, 0.5)[1] < 1e-6


def test_normality_check_flags_skew():
    rng = np.random.default_rng(4)
    assert normality_check(rng.normal(size=2000))["p_omnibus"] > 0.001
    assert normality_check(rng.exponential(size=2000))["p_skew"] < 1e-6


def test_stats_suite_report_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    r = stats_suite(rng.exponential(size=1000), "exponential")
    assert isinstance(r, TestReport)
    d = json.loads(r.to_json())
    assert d["name"] == r.name
    r.append_csv(tmp_path / "x.csv")
    r.append_csv(tmp_path / "x.csv")
    lines = (tmp_path / "x.csv").read_text().splitlines()
    assert len(lines) == 3


def test_trend_slope_detects_increase():
    x = np.arange(10.0)
    up = trend_slope(x, 1 + 0.5 * x, np.full(10, 0.1))
    flat = trend_slope(x, np.ones(10), np.full(10, 0.1))
    assert up["p_upward"] < 1e-6
    assert flat["p_upward"] > 0.1


def test_collision_counts_monotone_and_reproducible():
    ch = SRIChainHandle.environment(nearest_neighbor(1))
    a = collision_record(ch, indicator(1), [0], [10, 100, 1000], 200, 7)
    b = collision_record(ch, indicator(1), [0], [10, 100, 1000], 200, 7)
    assert a.monotone()
    assert np.array_equal(a.values, b.values)


def test_independent_chain_zero_start_mean_matches_lclt():
    # two independent two-step walkers: E #collisions up to N ~ sqrt(2N/pi) for the difference walk
    ch = SRIChainHandle.independent(simple_random_walk(1, 2))
    N = 4000
    rec = collision_record(ch, indicator(1), [0], [N], 4000, 2)
    m = mean_ci(rec.values[:, 0])
    exact = sum(math.comb(4 * s, 2 * s) / 4 ** (2 * s) for s in range(1, N + 1))
    assert abs(m.value - exact) < 4 * m.stderr


def test_backward_propagation_vanishes_for_constant_phi():
    ch = SRIChainHandle.environment(nearest_neighbor(2))
    r = backward_propagation_test(ch, indicator(2), TestFunction.constant(2), [1000], 100, 1)
    assert np.allclose(r.details["second_moment"], 0.0)
