"""Quenched densities, rescaled fields, martingale increments and quadratic-variation fields."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import logsumexp

from . import _kernels as K
from .env_models import (
    EnvironmentSpec,
    ModelError,
    QuenchedEnvironment,
    build_step_distribution,
    mgf_oracle,
    near_set,
    symmetry_order,
    two_point_kernel,
)
from .invariant_measure import EstimateWithCI
from .kpoint_motion import PairFunctionTable, Tilt, pair_tables, vartheta_table, zeta_table, eta_table
from .reference_quadrature import InitialData, TestFunction
from .seeding import replica_seeds

REGIMES = ("A", "B", "C", "D")


class TruncationWarning(UserWarning):
    """Mass dropped by support trimming exceeded the tolerance."""


# ---------------------------------------------------------------------------
# scaling


def psi_n(p: int, d: int, N: float) -> float:
    if d == 1:
        return N ** (1 - 1 / (4 * p))
    if d == 2:
        return N * math.log(N) ** (-1 / (2 * p))
    return float(N)


@dataclass(frozen=True)
class ScalingParams:
    """Scaling data for one N.  sigma is in normalized coordinates, tilt and d_N are raw."""

    N: int
    p: int
    d: int
    regime: str
    sigma: tuple
    tilt: tuple
    d_N: tuple
    log_m: float
    psi_N: float
    omega_N: float
    B_N: float
    B_bulk: float
    B_extremal: float
    A: tuple

    @property
    def sigma_norm(self) -> float:
        return float(np.linalg.norm(self.sigma))

    @property
    def normalization(self) -> np.ndarray:
        return np.asarray(self.A, float).reshape(self.d, self.d)

    @property
    def tilt_array(self) -> np.ndarray:
        return np.asarray(self.tilt, float)

    @property
    def drift(self) -> np.ndarray:
        """Per-step location shift d_N / N in raw units."""
        return np.asarray(self.d_N, float) / self.N

    def as_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def regime_scale(regime: str, p: int, d: int, N: int) -> float:
    crit = psi_n(p, d, N) / N
    if regime == "A":
        return N ** -0.5
    if regime == "B":
        return math.sqrt(N**-0.5 * crit)
    if regime == "C":
        if d != 2:
            raise ModelError("regime C is only defined for d = 2")
        return crit
    if regime == "D":
        if d < 3:
            raise ModelError("regime D requires d >= 3")
        return 1.0
    raise ModelError(f"unknown regime {regime!r}")


def scaling_schedule(p: int, d: int, regime: str, N: int, v, spec: EnvironmentSpec | None = None) -> ScalingParams:
    """Tilt sequence and derived constants.  Without a spec, mu is taken Gaussian with identity covariance."""
    if p < 1 or d < 1 or N < 2:
        raise ModelError("need p >= 1, d >= 1, N >= 2")
    regime = regime.upper()
    v = np.atleast_1d(np.asarray(v, float))
    if len(v) != d:
        raise ModelError("direction has wrong dimension")
    sig = v * regime_scale(regime, p, d, N)
    if spec is not None:
        if spec.d != d:
            raise ModelError("spec dimension mismatch")
        A = build_step_distribution(spec).normalization
        tilt = Tilt.from_normalized(spec, sig)
        if np.any(sig):
            tilt.check(spec)
        mgf = mgf_oracle(build_step_distribution(spec))
        log_m = mgf.log_M(tilt.array)
        dN = N * mgf.grad_log_M(tilt.array)
    else:
        A = np.eye(d)
        tilt = Tilt(tuple(sig))
        log_m = 0.5 * float(sig @ sig)
        dN = N * sig
    psi = psi_n(p, d, N)
    s = float(np.linalg.norm(sig))
    b_bulk = N ** (p / 2 + (d - 2) / 4)
    b_ext = N ** ((d - 2) / 4) / s**p if s > 0 else math.inf
    if regime == "A":
        B = b_bulk
    else:
        if s == 0:
            raise ModelError("extremal regimes need a nonzero direction")
        B = b_ext
    return ScalingParams(int(N), int(p), int(d), regime, tuple(sig), tuple(tilt.vector), tuple(float(c) for c in dN),
                         float(log_m), psi, (psi / N) ** (2 * p), B, b_bulk, b_ext, tuple(A.ravel()))


def schedule_for(spec: EnvironmentSpec, regime: str, N: int, v) -> ScalingParams:
    return scaling_schedule(symmetry_order(spec), spec.d, regime, N, v, spec)


# ---------------------------------------------------------------------------
# initial profiles


def _walker_residues(spec: EnvironmentSpec) -> np.ndarray:
    """Residues mod 4 of the lattice generated by the composite steps."""
    d = spec.d
    offs = build_step_distribution(spec).offsets
    steps = np.vstack([offs, -offs])
    seen = {tuple([0] * d)}
    stack = [tuple([0] * d)]
    while stack:
        x = stack.pop()
        for s in steps:
            y = tuple(int(a + b) for a, b in zip(x, s))
            if max(abs(c) for c in y) <= 8 and y not in seen:
                seen.add(y)
                stack.append(y)
    good = np.zeros(4**d, bool)
    for y in seen:
        good[_res(np.array([y]))[0]] = True
    return good


def _res(pts: np.ndarray) -> np.ndarray:
    key = np.zeros(len(pts), np.int64)
    for i in range(pts.shape[1]):
        key = key * 4 + np.mod(pts[:, i], 4)
    return key


@dataclass
class InitialProfile:
    """Lattice probability vector nu_N with its macroscopic descriptor."""

    points: np.ndarray  # (n, d) int
    masses: np.ndarray  # (n,)
    descriptor: InitialData
    N: int
    eps_ic: float

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def log_mgf(self, tilt) -> float:
        s = np.asarray(tilt, float)
        return float(logsumexp(self.points @ s, b=self.masses))

    def tilted(self, tilt) -> np.ndarray:
        s = np.asarray(tilt, float)
        lw = self.points @ s + np.log(self.masses)
        return np.exp(lw - logsumexp(lw))

    def sample(self, n: int, rng: np.random.Generator, tilt=None) -> np.ndarray:
        p = self.masses if tilt is None else self.tilted(tilt)
        return self.points[rng.choice(len(p), size=n, p=p)]

    @staticmethod
    def dirac(d: int, N: int, site=None) -> "InitialProfile":
        site = np.zeros(d, np.int64) if site is None else np.asarray(site, np.int64)
        return InitialProfile(site[None, :], np.ones(1), InitialData.dirac(np.zeros(d)), int(N), 0.0)

    @staticmethod
    def gaussian(spec: EnvironmentSpec, N: int, width: float = 1.0, center=None) -> "InitialProfile":
        """Discretized Gaussian of macroscopic width `width` in normalized coordinates."""
        d = spec.d
        A = build_step_distribution(spec).normalization
        c = np.zeros(d) if center is None else np.asarray(center, float)
        Ainv = np.linalg.inv(A)
        mid = Ainv @ c * math.sqrt(N)
        R = int(math.ceil(7 * width * math.sqrt(N) * np.linalg.norm(Ainv, 2))) + 2
        axes = [np.arange(int(round(m)) - R, int(round(m)) + R + 1) for m in mid]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
        grid = grid[_walker_residues(spec)[_res(grid)]]
        xi = grid @ A.T / math.sqrt(N) - c
        lw = -0.5 * np.sum(xi**2, axis=1) / width**2
        w = np.exp(lw - logsumexp(lw))
        keep = w > 1e-300
        return InitialProfile(grid[keep].astype(np.int64), w[keep] / w[keep].sum(),
                              InitialData.gaussian(c, width), int(N), 1.0)

    def goodness_check(self, spec: EnvironmentSpec, t_grid=None, eps: float | None = None, n_a: int = 9) -> dict:
        """sup_a (m_N, G_t(a - .)) / t^(eps-1) over a t-grid: the fitted constant of the regularity bound."""
        eps = self.eps_ic if eps is None else eps
        N = self.N
        t_grid = np.geomspace(1.0 / N, 1.0, 12) if t_grid is None else np.asarray(t_grid, float)
        A = build_step_distribution(spec).normalization
        xi = self.points @ A.T / math.sqrt(N)
        c = np.asarray(self.descriptor.center, float)
        span = np.linspace(-1.0, 1.0, n_a)
        a_pts = np.stack(np.meshgrid(*([span] * self.d), indexing="ij"), -1).reshape(-1, self.d) + c
        ratios = []
        for t in t_grid:
            best = 0.0
            for a in a_pts:
                q = np.sum((a - xi) ** 2, axis=1)
                best = max(best, float(self.masses @ np.exp(-0.5 * q / t)) / (2 * math.pi * t) ** (self.d / 2))
            ratios.append(best / t ** (eps - 1))
        ratios = np.array(ratios)
        return {"t": t_grid, "ratio": ratios, "C": float(ratios.max()), "eps_ic": eps}


def default_profile(spec: EnvironmentSpec, N: int, width: float = 1.0) -> InitialProfile:
    return InitialProfile.dirac(spec.d, N) if spec.d == 1 else InitialProfile.gaussian(spec, N, width)


# ---------------------------------------------------------------------------
# rescaling constants


def log_rescale_constant(params: ScalingParams, t, x, nu: InitialProfile) -> np.ndarray:
    """log C_{N,t,x,nu} with x macroscopic (raw displacement times N^{-1/2})."""
    x = np.atleast_2d(np.asarray(x, float))
    s = params.tilt_array
    N = params.N
    val = math.sqrt(N) * (x @ s) + (float(s @ np.asarray(params.d_N)) - N * params.log_m) * np.asarray(t, float)
    return val - nu.log_mgf(s)


def rescale_constant(params: ScalingParams, t, x, nu: InitialProfile) -> np.ndarray:
    return np.exp(log_rescale_constant(params, t, x, nu))


def log_weight_along_path(params: ScalingParams, r: int, X, nu: InitialProfile) -> np.ndarray:
    """log C at time r / N evaluated at raw sites X (shift by r d_N / N applied)."""
    X = np.atleast_2d(np.asarray(X, float))
    N = params.N
    xm = (X - r * params.drift) / math.sqrt(N)
    return log_rescale_constant(params, r / N, xm, nu)


# ---------------------------------------------------------------------------
# sparse densities


_KB = np.int64(1 << 20)
_KOFF = np.int64(1 << 19)


def _encode(pts: np.ndarray) -> np.ndarray:
    key = np.zeros(len(pts), np.int64)
    for i in range(pts.shape[1]):
        key = key * _KB + (pts[:, i].astype(np.int64) + _KOFF)
    return key


def _decode(keys: np.ndarray, d: int) -> np.ndarray:
    out = np.empty((len(keys), d), np.int64)
    k = keys.copy()
    for i in range(d - 1, -1, -1):
        out[:, i] = k % _KB - _KOFF
        k //= _KB
    return out


@dataclass
class DensityState:
    """Quenched probability vector at composite time r (sites sorted by key)."""

    r: int
    sites: np.ndarray
    masses: np.ndarray
    lost_mass: float = 0.0

    @property
    def total(self) -> float:
        return float(self.masses.sum())

    def keys(self) -> np.ndarray:
        return _encode(self.sites)

    def as_dict(self) -> dict:
        return {tuple(int(c) for c in s): float(m) for s, m in zip(self.sites, self.masses)}


def _push(sites: np.ndarray, weights: np.ndarray, offs: np.ndarray):
    """Aggregate sum_y weights[y, a] at y + offs[a]; returns (sites, values) sorted by key."""
    d = sites.shape[1]
    tgt = (sites[:, None, :] + offs[None, :, :]).reshape(-1, d)
    keys = _encode(tgt)
    uk, inv = np.unique(keys, return_inverse=True)
    vals = np.bincount(inv, weights=weights.ravel(), minlength=len(uk))
    return _decode(uk, d), vals, uk


def _align(keys_a, vals_a, keys_b, vals_b):
    uk = np.union1d(keys_a, keys_b)
    va = np.zeros(len(uk))
    vb = np.zeros(len(uk))
    va[np.searchsorted(uk, keys_a)] = vals_a
    vb[np.searchsorted(uk, keys_b)] = vals_b
    return uk, va, vb


def _rows_matrix(env: QuenchedEnvironment, r: int, sites: np.ndarray, index: dict, m: int) -> np.ndarray:
    Kmat = np.zeros((len(sites), m))
    for i, y in enumerate(sites):
        row = env.kernel_row(r, tuple(int(c) for c in y))
        for o, p in zip(row.offsets, row.probs):
            Kmat[i, index[tuple(int(c) for c in o)]] += p
    return Kmat


def _trim(sites, masses, trim, max_sites):
    lost = 0.0
    keep = masses > trim
    if max_sites is not None and keep.sum() > max_sites:
        thr = np.partition(masses, -max_sites)[-max_sites]
        keep &= masses >= thr
    if not keep.all():
        lost = float(masses[~keep].sum())
    return sites[keep], masses[keep], lost


@dataclass
class ExactStep:
    """Data of one composite step of the exact evolver."""

    r: int
    sites: np.ndarray
    masses: np.ndarray
    rows: np.ndarray
    next_sites: np.ndarray
    next_masses: np.ndarray


def exact_steps(spec: EnvironmentSpec, profile: InitialProfile, horizon: int, seed: int, env_id: int = 0,
                trim: float = 0.0, max_sites: int | None = None):
    """Generator over exact composite steps using the lazily sampled environment (any d)."""
    env = QuenchedEnvironment(spec, seed, env_id)
    mu = build_step_distribution(spec)
    offs = mu.offsets
    index = {tuple(int(c) for c in o): i for i, o in enumerate(offs)}
    order = np.argsort(_encode(profile.points))
    sites, masses = profile.points[order].astype(np.int64), profile.masses[order].astype(float)
    for r in range(horizon):
        Kmat = _rows_matrix(env, r + 1, sites, index, len(offs))
        nxt, vals, _ = _push(sites, masses[:, None] * Kmat, offs)
        nz = vals > 0
        nxt, vals = nxt[nz], vals[nz]
        yield ExactStep(r, sites, masses, Kmat, nxt, vals)
        sites, masses, lost = _trim(nxt, vals, trim, max_sites)
        if lost:
            yield ("lost", lost)
        env.drop_before(spec.composite_steps * (r + 1))


@dataclass
class DensityTrajectory:
    states: list
    lost_mass: float
    max_mass_error: float
    method: str

    def at(self, r: int) -> DensityState:
        for s in self.states:
            if s.r == r:
                return s
        raise KeyError(r)


# ---------------------------------------------------------------------------
# compiled d = 1 evolver


FAST_MODELS = {("nearest_neighbor", "uniform"): 0, ("nearest_neighbor", "dirichlet"): 1,
               ("nearest_neighbor", "fixed"): 2, ("symmetric_lazy", "uniform"): 3, ("symmetric_lazy", "fixed"): 4}


@njit(inline="always")
def _unif(s):
    s, z = K._next(s)
    return s, ((z >> np.uint64(11)) + 0.5) * K.INV53


@njit
def _gamma(s, a):
    # Marsaglia-Tsang with the boost for a < 1
    boost = 1.0
    if a < 1.0:
        s, u = _unif(s)
        boost = u ** (1.0 / a)
        a += 1.0
    dd = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * dd)
    while True:
        s, u1 = _unif(s)
        s, u2 = _unif(s)
        x = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        s, u = _unif(s)
        if math.log(u) < 0.5 * x * x + dd - dd * v + dd * math.log(v):
            return s, dd * v * boost


@njit(cache=True)
def _advance_d1(buf, tmp, lo, hi, state, model, pa, pb, n_comp, s_comp, trim, record, snap_lo):
    """Advance n_comp composite steps.  Sites are buffer indices; snapshots cover [snap_lo, snap_lo + width)."""
    W = buf.shape[0]
    width = (hi - lo + 1) + 2 * s_comp * n_comp
    snaps = np.zeros((n_comp if record else 0, width))
    lost = 0.0
    st = np.uint64(state)
    for c in range(n_comp):
        for j in range(s_comp):
            a = max(lo - 1, 0)
            b = min(hi + 1, W - 1)
            for i in range(a, b + 1):
                tmp[i] = 0.0
            for i in range(lo, hi + 1):
                m = buf[i]
                if m == 0.0:
                    continue
                if model <= 2:
                    if model == 0:
                        st, wp = _unif(st)
                    elif model == 1:
                        st, g1 = _gamma(st, pa)
                        st, g2 = _gamma(st, pa)
                        wp = g1 / (g1 + g2)
                    else:
                        wp = pa
                    tmp[i + 1] += m * wp
                    tmp[i - 1] += m * (1.0 - wp)
                else:
                    if model == 3:
                        st, u = _unif(st)
                        u = pa + (pb - pa) * u
                    else:
                        u = pa
                    tmp[i] += m * u
                    h = 0.5 * m * (1.0 - u)
                    tmp[i + 1] += h
                    tmp[i - 1] += h
            lo = a
            hi = b
            for i in range(lo, hi + 1):
                buf[i] = tmp[i]
            while lo < hi and buf[lo] <= trim:
                lost += buf[lo]
                buf[lo] = 0.0
                lo += 1
            while hi > lo and buf[hi] <= trim:
                lost += buf[hi]
                buf[hi] = 0.0
                hi -= 1
        if record:
            for i in range(lo, hi + 1):
                k = i - snap_lo
                if 0 <= k < width:
                    snaps[c, k] = buf[i]
    return lo, hi, st, lost, snaps


class FastEvolver1D:
    """Compiled density evolution in d = 1 with a moving active window.

    The environment is drawn from a splitmix stream keyed by the seed, so realizations
    differ from the lazily sampled QuenchedEnvironment with the same seed (same law).
    """

    def __init__(self, spec: EnvironmentSpec, profile: InitialProfile, horizon: int, seed: int, trim: float = 1e-30):
        if spec.d != 1:
            raise ModelError("compiled evolver is one-dimensional")
        key = (spec.model, spec.weight_law.kind)
        if key not in FAST_MODELS:
            raise ModelError(f"compiled evolver does not support {key}")
        self.model = FAST_MODELS[key]
        wl = spec.weight_law
        self.pa, self.pb = {0: (0.0, 0.0), 1: (wl.alpha, 0.0), 2: (wl.weights[0] if wl.weights else 0.5, 0.0),
                            3: (wl.lo, wl.hi), 4: (wl.lo, 0.0)}[self.model]
        self.s = spec.composite_steps
        pts = profile.points[:, 0]
        reach = self.s * horizon + 2
        self.base = int(pts.min()) - reach
        W = int(pts.max() - pts.min()) + 2 * reach + 1
        self.buf = np.zeros(W)
        self.tmp = np.zeros(W)
        np.add.at(self.buf, pts - self.base, profile.masses)
        self.lo = int(pts.min() - self.base)
        self.hi = int(pts.max() - self.base)
        self.state = np.uint64(seed)
        self.r = 0
        self.lost = 0.0
        self.trim = float(trim)
        self.horizon = horizon

    def advance(self, n: int, record: bool = False):
        """Returns (first site, snapshots (n, width)) when recording, else None."""
        if self.r + n > self.horizon:
            raise ModelError("advance beyond the allocated horizon")
        snap_lo = self.lo - self.s * n
        lo, hi, st, lost, snaps = _advance_d1(self.buf, self.tmp, self.lo, self.hi, self.state, self.model,
                                              self.pa, self.pb, n, self.s, self.trim, record, snap_lo)
        self.lo, self.hi, self.state = int(lo), int(hi), st
        self.lost += lost
        self.r += n
        if record:
            return snap_lo + self.base, snaps
        return None

    def density(self) -> tuple[int, np.ndarray]:
        return self.lo + self.base, self.buf[self.lo:self.hi + 1].copy()

    def state_obj(self) -> DensityState:
        first, arr = self.density()
        nz = arr > 0
        sites = (np.nonzero(nz)[0] + first)[:, None].astype(np.int64)
        return DensityState(self.r, sites, arr[nz], self.lost)


def evolve_density(spec: EnvironmentSpec, profile: InitialProfile, horizon: int, seed: int, env_id: int = 0,
                   checkpoints=None, method: str = "auto", trim: float = 0.0, max_sites: int | None = None,
                   loss_tol: float = 1e-12) -> DensityTrajectory:
    """Quenched density at the checkpoints (default: every step)."""
    checkpoints = sorted(set(range(horizon + 1) if checkpoints is None else (int(c) for c in checkpoints)))
    if spec.d >= 3 or (spec.d == 2 and horizon > 1000):
        raise ModelError("density evolution supports d = 1, or d = 2 with horizon <= 1000")
    if method == "auto":
        method = "fast" if spec.d == 1 and (spec.model, spec.weight_law.kind) in FAST_MODELS else "exact"
    states, max_err = [], 0.0
    if method == "fast":
        seed64 = int(replica_seeds(seed, env_id + 1, "density-env")[env_id])
        ev = FastEvolver1D(spec, profile, horizon, seed64, trim)
        for c in checkpoints:
            if c > ev.r:
                ev.advance(c - ev.r)
            st = ev.state_obj()
            max_err = max(max_err, abs(st.total + ev.lost - 1.0))
            states.append(st)
        lost = ev.lost
    else:
        lost = 0.0
        if 0 in checkpoints:
            states.append(DensityState(0, profile.points.copy(), profile.masses.copy(), 0.0))
        for item in exact_steps(spec, profile, horizon, seed, env_id, trim, max_sites):
            if isinstance(item, tuple):
                lost += item[1]
                continue
            err = abs(item.next_masses.sum() - item.masses.sum())
            max_err = max(max_err, err)
            if item.r + 1 in checkpoints:
                states.append(DensityState(item.r + 1, item.next_sites, item.next_masses, lost))
    if lost > loss_tol:
        warnings.warn(f"support truncation dropped mass {lost:.3e}", TruncationWarning, stacklevel=2)
    return DensityTrajectory(states, lost, max_err, method)


def annealed_density(spec: EnvironmentSpec, profile: InitialProfile, r: int, tilt=None) -> DensityState:
    """nu * mu^{*r} (or the tilted version nu^s * (mu^s)^{*r}) by exact repeated convolution."""
    mu = build_step_distribution(spec)
    probs = mu.probs
    nu = profile.masses
    if tilt is not None and np.any(np.asarray(tilt) != 0):
        s = np.asarray(tilt, float)
        probs = probs * np.exp(mu.offsets @ s)
        probs = probs / probs.sum()
        nu = profile.tilted(s)
    sites = profile.points.astype(np.int64)
    masses = nu.astype(float)
    for _ in range(r):
        sites, masses, _k = _push(sites, masses[:, None] * probs[None, :], mu.offsets)
        keep = masses > 1e-300
        sites, masses = sites[keep], masses[keep]
    return DensityState(r, sites, masses)


# ---------------------------------------------------------------------------
# fields and martingales


def _xi(params: ScalingParams, r: int, X: np.ndarray) -> np.ndarray:
    A = params.normalization
    return (np.asarray(X, float) - r * params.drift) @ A.T / math.sqrt(params.N)


def field_value(params: ScalingParams, state: DensityState, phi: TestFunction, nu: InitialProfile) -> float:
    """H^N(r/N, phi) = sum_X C(r/N, .) phi(.) P(r, X)."""
    if state.masses.size == 0:
        return 0.0
    r = state.r
    lz = np.log(state.masses) + log_weight_along_path(params, r, state.sites, nu)
    return float(np.exp(lz) @ phi(_xi(params, r, state.sites)))


def mean_field(spec: EnvironmentSpec, params: ScalingParams, nu: InitialProfile, phi: TestFunction, r: int) -> float:
    """E H^N(r/N, phi): the tilted annealed law carries the rescaling constant exactly."""
    return float(mean_fields(spec, params, nu, [phi], [r])[0, 0])


def mean_fields(spec: EnvironmentSpec, params: ScalingParams, nu: InitialProfile, phis, times) -> np.ndarray:
    """Mean field for several test functions and times from one annealed evolution."""
    mu = build_step_distribution(spec)
    probs = _tilted_mu(spec, params)
    s = params.tilt_array
    sites = nu.points.astype(np.int64)
    masses = nu.tilted(s) if np.any(s) else nu.masses.astype(float)
    times = list(times)
    out = np.zeros((len(phis), len(times)))
    pos = {t: i for i, t in enumerate(times)}
    for r in range(max(times) + 1):
        if r > 0:
            sites, masses, _k = _push(sites, masses[:, None] * probs[None, :], mu.offsets)
            keep = masses > 1e-300
            sites, masses = sites[keep], masses[keep]
        if r in pos:
            for k, ph in enumerate(phis):
                out[k, pos[r]] = float(masses @ ph(_xi(params, r, sites)))
    return out


@dataclass
class FieldSample:
    """Per-step ledgers for one environment and a family of test functions."""

    times: np.ndarray
    field: np.ndarray  # (n_phi, n_times)
    mean_field: np.ndarray
    F: np.ndarray
    increments: np.ndarray  # (n_phi, horizon)
    qv: np.ndarray  # (n_phi, horizon) predictable QV increments
    identity_residual: float
    mass_error: float
    decomposition: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def martingale(self) -> np.ndarray:
        return np.concatenate([np.zeros((self.increments.shape[0], 1)), np.cumsum(self.increments, axis=1)], axis=1)

    @property
    def qv_total(self) -> np.ndarray:
        return self.qv.sum(axis=1)


class _QVEngine:
    """Exact predictable quadratic variation and its regime decomposition at one step."""

    def __init__(self, spec: EnvironmentSpec, params: ScalingParams, phi: TestFunction):
        self.spec, self.params, self.phi = spec, params, phi
        mu = build_step_distribution(spec)
        self.offs = mu.offsets
        self.A = params.normalization
        self.p = params.p
        self.near = list(near_set(spec))
        self.rho = {y: two_point_kernel(spec, y).rho for y in self.near}
        s = params.tilt_array
        self.g = np.exp(self.offs @ s - params.log_m)
        self.noffs = self.offs @ self.A.T
        N = params.N
        self.regime = params.regime
        if self.regime == "A":
            from .kpoint_motion import _multi_indices
            self.mi = _multi_indices(spec.d, self.p)
            self.eta = {(r1, r2): eta_table(spec, r1, r2, coords=self.A) for r1 in self.mi for r2 in self.mi}
            from itertools import product
            low = [r for k in range(self.p + 1) for r in _all_multi(spec.d, k)]
            self.taylor = [(r1, r2) for r1, r2 in product(low, low)]
        else:
            v = np.asarray(params.sigma, float)
            vn = float(np.linalg.norm(v))
            self.vn = vn
            self.zeta_unit = zeta_table(spec, v / vn, self.p, coords=self.A)
            self.theta = vartheta_table(spec, Tilt(params.tilt))
        self.N = N

    def step(self, r: int, sites: np.ndarray, z: np.ndarray) -> dict:
        P = self.params
        B2 = P.B_N**2
        N = self.N
        keys = _encode(sites)
        order = np.argsort(keys)
        keys, sites, z = keys[order], sites[order], z[order]
        xi = _xi(P, r, sites)
        phi = self.phi
        m = len(self.offs)
        # g-weighted phi at all targets: G[y, a] = e^{s.a - log M} phi(xi(y + a))
        tgt_xi = xi[:, None, :] + self.noffs[None, :, :] / math.sqrt(N)
        phit = phi(tgt_xi.reshape(-1, P.d)).reshape(len(sites), m)
        G = phit * self.g[None, :]
        out = {"qv": 0.0, "lead": 0.0, "r1": 0.0, "r2": 0.0}
        phi0 = phi(xi)
        if self.regime == "A":
            der = {r_: phi.derivative(r_, xi) for r_ in {a for pair in self.taylor for a in pair}}
        for y in self.near:
            ky = _encode(np.asarray(y, np.int64)[None, :])[0] - _encode(np.zeros((1, P.d), np.int64))[0]
            # partner y2 = y1 - y
            idx2 = np.searchsorted(keys, keys - ky)
            ok = (idx2 < len(keys))
            ok[ok] &= keys[idx2[ok]] == keys[ok] - ky
            i1 = np.nonzero(ok)[0]
            if i1.size == 0:
                continue
            i2 = idx2[i1]
            rho = self.rho[y]
            zz = z[i1] * z[i2]
            J = np.einsum("na,ab,nb->n", G[i1], rho, G[i2])
            out["qv"] += B2 * float(zz @ J)
            if self.regime == "A":
                lead = np.zeros(len(i1))
                v2 = np.zeros(len(i1))
                for r1 in self.mi:
                    for r2 in self.mi:
                        c = self.eta[(r1, r2)](y) / (_fact(r1) * _fact(r2))
                        if c == 0.0:
                            continue
                        lead += c * der[r1][i1] * der[r2][i1]
                        v2 += c * der[r1][i1] * (der[r2][i2] - der[r2][i1])
                sc = B2 * N ** (-self.p)
                # explicit Taylor remainder integrated against rho
                Rint = np.einsum("na,ab,nb->n", phit[i1], rho, phit[i2])
                for r1, r2 in self.taylor:
                    mono1 = np.prod(self.noffs.astype(float) ** np.asarray(r1, float), axis=1)
                    mono2 = np.prod(self.noffs.astype(float) ** np.asarray(r2, float), axis=1)
                    mom = float(mono1 @ rho @ mono2)
                    if mom == 0.0:
                        continue
                    scale = N ** (-(sum(r1) + sum(r2)) / 2) / (_fact(r1) * _fact(r2))
                    Rint -= scale * mom * der[r1][i1] * der[r2][i2]
                out["lead"] += sc * float(zz @ lead)
                out["r2"] += sc * float(zz @ v2)
                out["r1"] += B2 * float(zz @ Rint)
            else:
                ph2 = phi0[i1] ** 2
                A1 = np.einsum("na,ab,nb->n", G[i1], rho, G[i2]) - ph2 * float(self.g @ rho @ self.g)
                th = self.theta(y)
                if self.regime == "D":
                    out["lead"] += B2 * th * float(zz @ ph2)
                    out["r1"] += B2 * float(zz @ A1)
                else:
                    zeta_s = self.vn ** (2 * self.p) * self.zeta_unit(y)
                    lead_c = math.exp(-2 * P.log_m) * N ** ((P.d - 2) / 2) * self.zeta_unit(y)
                    out["lead"] += lead_c * float(zz @ ph2)
                    out["r1"] += B2 * float(zz @ A1)
                    out["r2"] += B2 * (th - math.exp(-2 * P.log_m) * zeta_s) * float(zz @ ph2)
        return out


def _all_multi(d: int, k: int):
    from .kpoint_motion import _multi_indices
    if k == 0:
        return [tuple([0] * d)]
    return _multi_indices(d, k)


def _fact(r) -> float:
    return float(np.prod([math.factorial(i) for i in r]))


def _tilted_mu(spec: EnvironmentSpec, params: ScalingParams) -> np.ndarray:
    mu = build_step_distribution(spec)
    w = mu.probs * np.exp(mu.offsets @ params.tilt_array)
    return w / w.sum()


def field_and_martingale(spec: EnvironmentSpec, params: ScalingParams, nu: InitialProfile, phis, horizon: int,
                         seed: int, env_id: int = 0, times=None, decompose: bool = False, method: str = "exact",
                         trim: float = 0.0) -> FieldSample:
    """Field values, martingale increments (heat-operator identity) and exact QV ledgers.

    method "exact" samples rows through QuenchedEnvironment and checks the identity against
    the row-level right-hand side; method "fast" (d = 1) uses consecutive compiled snapshots.
    """
    phis = [phis] if isinstance(phis, TestFunction) else list(phis)
    times = sorted(set(range(horizon + 1) if times is None else (int(t) for t in times)))
    mu = build_step_distribution(spec)
    offs = mu.offsets
    mus = _tilted_mu(spec, params)
    nphi = len(phis)
    inc = np.zeros((nphi, horizon))
    qv = np.zeros((nphi, horizon))
    fields = np.zeros((nphi, len(times)))
    means = mean_fields(spec, params, nu, phis, times)
    engines = [_QVEngine(spec, params, ph) for ph in phis]
    decomp = [[] for _ in phis]
    resid = 0.0
    mass_err = 0.0
    tpos = {t: i for i, t in enumerate(times)}
    s = params.tilt_array
    B = params.B_N

    def z_of(r, sites, masses):
        return masses * np.exp(log_weight_along_path(params, r, sites, nu))

    def record(r, sites, z):
        for k, (ph, eng) in enumerate(zip(phis, engines)):
            if r in tpos:
                fields[k, tpos[r]] = float(z @ ph(_xi(params, r, sites)))
            if r < horizon:
                st = eng.step(r, sites, z)
                qv[k, r] = st["qv"]
                if decompose:
                    decomp[k].append(st)

    def increment(r, sites, z, nsites, nz):
        # (L Z)(r, X') = z_{r+1}(X') - (z_r * mu^s)(X')
        csites, cvals, ckeys = _push(sites, z[:, None] * mus[None, :], offs)
        nkeys = _encode(nsites)
        o = np.argsort(nkeys)
        uk, a, b = _align(nkeys[o], nz[o], ckeys, cvals)
        X = _decode(uk, params.d)
        lhs = a - b
        for k, ph in enumerate(phis):
            inc[k, r] = B * float(ph(_xi(params, r, X)) @ lhs)
        return uk, lhs

    if method == "fast":
        if spec.d != 1:
            raise ModelError("fast path is one-dimensional")
        seed64 = int(replica_seeds(seed, env_id + 1, "density-env")[env_id])
        ev = FastEvolver1D(spec, nu, horizon, seed64, trim if trim > 0 else 1e-300)
        first, arr = ev.density()
        sites = (np.arange(len(arr)) + first)[:, None]
        nzm = arr > 0
        sites, masses = sites[nzm], arr[nzm]
        z = z_of(0, sites, masses)
        record(0, sites, z)
        chunk = 256
        r = 0
        while r < horizon:
            n = min(chunk, horizon - r)
            f0, snaps = ev.advance(n, record=True)
            for j in range(n):
                row = snaps[j]
                keep = row > 0
                nsites = (np.nonzero(keep)[0] + f0)[:, None]
                nm = row[keep]
                nz = z_of(r + 1, nsites, nm)
                increment(r, sites, z, nsites, nz)
                mass_err = max(mass_err, abs(nm.sum() + 0.0 - masses.sum()))
                sites, masses, z = nsites, nm, nz
                r += 1
                record(r, sites, z)
        lost = ev.lost
    else:
        lost = 0.0
        for item in exact_steps(spec, nu, horizon, seed, env_id, trim):
            if isinstance(item, tuple):
                lost += item[1]
                continue
            r = item.r
            z = z_of(r, item.sites, item.masses)
            if r == 0:
                record(0, item.sites, z)
            nz = z_of(r + 1, item.next_sites, item.next_masses)
            uk, lhs = increment(r, item.sites, z, item.next_sites, nz)
            # right-hand side: sum_y e^{s.(X'-y) - log M} [K(y, X') - mu(X'-y)] z(y)
            g = np.exp(offs @ s - params.log_m)
            rs, rv, rk = _push(item.sites, z[:, None] * (item.rows - mu.probs[None, :]) * g[None, :], offs)
            uk2, l2, r2 = _align(uk, lhs, rk, rv)
            scale = max(float(np.abs(nz).max()), 1e-300)
            resid = max(resid, float(np.abs(l2 - r2).max()) / scale)
            mass_err = max(mass_err, abs(item.next_masses.sum() - item.masses.sum()))
            record(r + 1, item.next_sites, nz)
    F = B * (fields - means)
    return FieldSample(np.array(times) / params.N, fields, means, F, inc, qv, resid, mass_err, decomp,
                       {"lost_mass": lost, "method": method, "horizon": horizon})


def qv_decomposition_check(spec: EnvironmentSpec, params: ScalingParams, phi: TestFunction, t: float,
                           nu: InitialProfile | None = None, seed: int = 0, env_id: int = 0,
                           method: str = "auto") -> dict:
    """Direct QV against leading term plus remainders; returns totals and the reconstruction residual."""
    nu = default_profile(spec, params.N) if nu is None else nu
    if params.regime == "A" and np.any(params.tilt_array):
        raise ModelError("regime A decomposition requires zero tilt")
    horizon = int(round(params.N * t))
    if method == "auto":
        method = "fast" if spec.d == 1 and (spec.model, spec.weight_law.kind) in FAST_MODELS else "exact"
    fs = field_and_martingale(spec, params, nu, [phi], horizon, seed, env_id, times=[0], decompose=True,
                              method=method, trim=1e-300)
    steps = fs.decomposition[0]
    tot = {k: float(sum(s_[k] for s_ in steps)) for k in ("qv", "lead", "r1", "r2")}
    recon = tot["lead"] + tot["r1"] + tot["r2"]
    scale = max(abs(tot["qv"]), 1e-300)
    names = {"A": ("V1", "V2"), "B": ("E1", "E2"), "C": ("E1", "E2"), "D": ("E1", None)}[params.regime]
    out = {"regime": params.regime, "direct": tot["qv"], "leading": tot["lead"], names[0]: tot["r1"],
           "residual": abs(recon - tot["qv"]) / scale, "abs_residual": abs(recon - tot["qv"]),
           "remainder_ratio": abs(tot["r1"] + tot["r2"]) / max(abs(tot["lead"]), 1e-300), "N": params.N}
    if names[1]:
        out[names[1]] = tot["r2"]
    return out


# ---------------------------------------------------------------------------
# QVF estimator


def _f_grid(f, d: int):
    if isinstance(f, PairFunctionTable):
        f = f.as_dict()
    f = {tuple(int(c) for c in k): float(v) for k, v in f.items() if v != 0.0}
    f_r = max((max(abs(c) for c in y) for y in f), default=0)
    fw = 2 * f_r + 1
    grid = np.zeros(fw**d)
    for y, val in f.items():
        idx = 0
        for c in y:
            idx = idx * fw + (c + f_r)
        grid[idx] = val
    return f, f_r, grid


def _phi_args(phi: TestFunction, d: int):
    if phi.kind == "constant":
        return 1, np.zeros(d), 1.0
    return 0, np.asarray(phi.center, float), float(phi.width)


def ess_fraction(logw: np.ndarray) -> float:
    w = np.exp(logw - logw.max())
    return float(w.sum() ** 2 / (len(w) * (w**2).sum()))


def estimate_qvf(spec: EnvironmentSpec, params: ScalingParams, f, phi: TestFunction, t: float,
                 nu1: InitialProfile, nu2: InitialProfile, replicas: int, seed: int, mode: str = "quenched",
                 ess_floor: float = 0.01, per_replica: bool = False) -> EstimateWithCI:
    """Monte Carlo of N^{(d-2)/2} sum_{s <= Nt} E[prod C * phi * f(R1 - R2)] over annealed pair paths.

    mode "quenched": untilted pair chain with explicit exp(s.(R1 + R2) - 2 s log M) weights;
    mode "tilted": tilted pair chain with exp(sum u) reweighting and tilted starts.
    """
    d = spec.d
    f, f_r, fgrid = _f_grid(f, d)
    N = params.N
    T = int(round(N * t))
    if not f or T == 0:
        return EstimateWithCI(0.0, 0.0, replicas, seed, {"mode": mode, "ess": 1.0})
    s = params.tilt_array
    tilted = bool(np.any(s != 0))
    if mode not in ("quenched", "tilted"):
        raise ModelError(f"unknown mode {mode!r}")
    pt = pair_tables(spec, Tilt(params.tilt) if (mode == "tilted" and tilted) else None)
    offs, fth, fal, nr, ngrid, nth, nal, nu_ = pt.numba_args()
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(17,)))
    use_tilt_starts = mode == "tilted" and tilted
    x1s = nu1.sample(replicas, rng, s if use_tilt_starts else None)
    x2s = nu2.sample(replicas, rng, s if use_tilt_starts else None)
    seeds = replica_seeds(seed, replicas, "qvf")
    kmode = 1 if use_tilt_starts else (2 if tilted else 0)
    start_log = np.zeros(replicas)
    if kmode == 2:
        start_log = (x1s + x2s) @ s - nu1.log_mgf(s) - nu2.log_mgf(s)
    pk, pc, pw = _phi_args(phi, d)
    A = params.normalization
    vals = np.zeros(replicas)
    pairs = np.concatenate([x1s, x2s], axis=1)
    uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
    inv = inv.ravel()
    for u_i, pr in enumerate(uniq):
        idx = np.nonzero(inv == u_i)[0]
        res = K.pair_functional(seeds[idx], pr[:d].astype(np.int64), pr[d:].astype(np.int64), offs, fth, fal, nr,
                                ngrid, nth, nal, nu_, f_r, fgrid, np.array([float(N)]), np.array([T], np.int64),
                                np.zeros(1), pk, pc, pw, params.drift, A, kmode, s, params.log_m)
        vals[idx] = res[:, 0]
    vals = vals * np.exp(start_log) * N ** ((d - 2) / 2)
    ess = 1.0
    if tilted:
        nchk = min(replicas, 2000)
        lw = np.zeros(nchk)
        for i in range(nchk):
            pos, logw = K.pair_positions(seeds[i:i + 1], x1s[i].astype(np.int64), x2s[i].astype(np.int64),
                                         np.array([T], np.int64), offs, fth, fal, nr, ngrid, nth, nal, nu_)
            if kmode == 1:
                lw[i] = logw[0, 0]
            else:
                lw[i] = float(s @ (pos[0, 0, 0] - x1s[i] + pos[0, 0, 1] - x2s[i])) - 2 * T * params.log_m
        ess = ess_fraction(lw)
        if ess < ess_floor:
            raise ModelError("tilt too large for importance estimator")
    est = EstimateWithCI(float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(replicas)), replicas, seed,
                         {"mode": mode, "ess": ess, "N": N, "t": t})
    if per_replica:
        est.extra["samples"] = vals
    return est
