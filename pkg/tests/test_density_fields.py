import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rwre_lab.density_fields import (
    FastEvolver1D,
    InitialProfile,
    annealed_density,
    estimate_qvf,
    evolve_density,
    field_and_martingale,
    psi_n,
    qv_decomposition_check,
    regime_scale,
    schedule_for,
    scaling_schedule,
)
from rwre_lab.env_models import ModelError, nearest_neighbor, symmetric_lazy
from rwre_lab.kpoint_motion import Tilt, vartheta_table
from rwre_lab.reference_quadrature import TestFunction

NN1 = nearest_neighbor(1)
PHI = TestFunction.gaussian([0.0], 1.0)


def _dense(state, lo, hi):
    out = np.zeros(hi - lo)
    idx = state.sites[:, 0] - lo
    ok = (idx >= 0) & (idx < hi - lo)
    np.add.at(out, idx[ok], state.masses[ok])
    return out


def test_regime_scales_ordered():
    N = 10**4
    for p in (1, 2):
        a = regime_scale("A", p, 1, N)
        b = regime_scale("B", p, 1, N)
        crit = psi_n(p, 1, N) / N
        assert a < b < crit


def test_invalid_regimes():
    with pytest.raises(ModelError):
        scaling_schedule(1, 3, "C", 1000, [1.0, 0, 0])
    with pytest.raises(ModelError):
        scaling_schedule(1, 1, "D", 1000, [1.0])
    with pytest.raises(ModelError):
        scaling_schedule(1, 1, "Z", 1000, [1.0])


def test_regime_a_normalization_bulk():
    P = schedule_for(NN1, "A", 400, [1.0])
    assert P.B_N == pytest.approx(P.B_bulk)
    P = schedule_for(NN1, "B", 400, [1.0])
    assert P.B_N == pytest.approx(P.B_extremal)


@given(seed=st.integers(0, 2**31), h=st.integers(1, 40))
def test_mass_conserved(seed, h):
    tr = evolve_density(NN1, InitialProfile.dirac(1, 100), h, seed, method="exact")
    assert tr.max_mass_error < 1e-12
    s = tr.at(h)
    assert abs(s.masses.sum() - 1.0) < 1e-12


def test_fast_evolver_conserves_mass():
    ev = FastEvolver1D(NN1, InitialProfile.dirac(1, 100), 300, 7, trim=0.0)
    ev.advance(300)
    st_ = ev.state_obj()
    assert abs(st_.masses.sum() - 1.0) < 1e-12


@pytest.mark.parametrize("method", ["exact", "fast"])
def test_environment_average_is_annealed(method):
    nu = InitialProfile.dirac(1, 100)
    h, n = 12, 300
    ann = _dense(annealed_density(NN1, nu, h), -40, 41)
    acc = np.zeros_like(ann)
    sq = np.zeros_like(ann)
    for k in range(n):
        tr = evolve_density(NN1, nu, h, 11, env_id=k, checkpoints=[h], method=method)
        x = _dense(tr.at(h), -40, 41)
        acc += x
        sq += x * x
    mean = acc / n
    se = np.sqrt(np.maximum(sq / n - mean**2, 0) / n)
    # tail sites carry products of many weights and are too skewed for a normal bound
    core = ann > 1e-3
    assert np.all(np.abs(mean - ann)[core] <= 5 * se[core])
    assert abs(mean.sum() - 1.0) < 1e-12


def test_same_seed_same_density():
    nu = InitialProfile.dirac(1, 100)
    a = evolve_density(NN1, nu, 30, 3, checkpoints=[30], method="exact").at(30)
    b = evolve_density(NN1, nu, 30, 3, checkpoints=[30], method="exact").at(30)
    assert np.array_equal(a.masses, b.masses)


@pytest.mark.parametrize("regime,v", [("A", [1.0]), ("B", [1.0]), ("B", [-0.7])])
def test_martingale_path_identity(regime, v):
    P = schedule_for(NN1, regime, 60, v)
    fs = field_and_martingale(NN1, P, InitialProfile.dirac(1, 60), [PHI], 60, 5)
    assert fs.identity_residual < 1e-10


@pytest.mark.parametrize("spec,regime,v", [(NN1, "A", [0.0]), (NN1, "B", [1.0]), (symmetric_lazy(1), "A", [0.0])])
def test_qv_decomposition_reconstructs(spec, regime, v):
    P = schedule_for(spec, regime, 40, v)
    r = qv_decomposition_check(spec, P, PHI, 1.0, seed=2)
    assert r["residual"] < 1e-8


def test_qv_decomposition_needs_zero_tilt_in_bulk():
    P = schedule_for(NN1, "A", 40, [1.0])
    with pytest.raises(ModelError):
        qv_decomposition_check(NN1, P, PHI, 1.0)


def test_qvf_modes_agree():
    spec = nearest_neighbor(2)
    N = 400
    P = schedule_for(spec, "C", N, [0.1, 0.0])
    th = vartheta_table(spec, Tilt(P.tilt))
    one = TestFunction.constant(2)
    nu1 = InitialProfile.dirac(2, N, [4, 0])
    nu2 = InitialProfile.dirac(2, N)
    a = estimate_qvf(spec, P, th, one, 1.0, nu1, nu2, 3000, 1, mode="quenched")
    b = estimate_qvf(spec, P, th, one, 1.0, nu1, nu2, 3000, 2, mode="tilted")
    assert abs(a.value - b.value) <= 4 * math.hypot(a.stderr, b.stderr)


def test_qvf_refuses_degenerate_weights():
    spec = nearest_neighbor(2)
    N = 400
    P = schedule_for(spec, "C", N, [0.5, 0.0])
    th = vartheta_table(spec, Tilt(P.tilt))
    with pytest.raises(ModelError):
        estimate_qvf(spec, P, th, TestFunction.constant(2), 1.0, InitialProfile.dirac(2, N, [4, 0]),
                     InitialProfile.dirac(2, N), 500, 1, mode="quenched")


def test_dirac_profile_not_good_in_2d():
    spec = nearest_neighbor(2)
    kw = {"eps": 0.5, "t_grid": np.geomspace(1e-4, 1.0, 5), "n_a": 3}
    d = InitialProfile.dirac(2, 10**4).goodness_check(spec, **kw)
    g = InitialProfile.gaussian(spec, 10**4, 1.0).goodness_check(spec, **kw)
    assert d["C"] > 10 * g["C"]
