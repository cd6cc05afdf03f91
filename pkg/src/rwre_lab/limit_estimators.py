"""Estimators and hypothesis tests for collision functionals of short-range interacting pair chains."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import _kernels as K
from .env_models import EnvironmentSpec, ModelError, build_step_distribution, mgf_oracle, near_set, symmetry_order
from .invariant_measure import (
    EstimateWithCI,
    gamma_ext_sq,
    invariant_measure,
    return_probability,
    walker_coords,
)
from .kpoint_motion import (
    DifferenceKernel,
    PairTables,
    Tilt,
    difference_from_pairs,
    pair_tables,
    vartheta_table,
    zeta_table,
)
from .reference_quadrature import InitialData, TestFunction, extremal_variance_closed_form, qvf_limit_integral
from .seeding import replica_seeds

C_D = {1: 2.0, 2: 2.0 * math.pi}


# ---------------------------------------------------------------------------
# reports


@dataclass
class TestReport:
    name: str
    verdict: bool
    estimate: float | None = None
    stderr: float | None = None
    target: float | None = None
    tolerance: float | None = None
    statistic: float | None = None
    p_value: float | None = None
    replicas: int | None = None
    seed: int | None = None
    details: dict = field(default_factory=dict)

    __test__ = False

    def as_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self, path=None) -> str:
        s = json.dumps(self.as_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(s)
        return s

    def append_csv(self, path) -> None:
        cols = ["name", "estimate", "stderr", "target", "tolerance", "statistic", "p_value", "replicas", "seed",
                "verdict"]
        new = not os.path.exists(path)
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(cols)
            w.writerow([_fmt(getattr(self, c)) for c in cols])

    def line(self) -> str:
        parts = [f"{self.name}: {'PASS' if self.verdict else 'FAIL'}"]
        if self.estimate is not None:
            parts.append(f"estimate={self.estimate:.6g}")
        if self.stderr is not None:
            parts.append(f"stderr={self.stderr:.3g}")
        if self.target is not None:
            parts.append(f"target={self.target:.6g}")
        if self.p_value is not None:
            parts.append(f"p={self.p_value:.3g}")
        return " ".join(parts)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        x = float(x)
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return x


# ---------------------------------------------------------------------------
# statistics


def mean_ci(samples) -> EstimateWithCI:
    x = np.asarray(samples, float)
    se = float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
    return EstimateWithCI(float(x.mean()), se, len(x))


def ks_exponential(samples, scale: float | None = None) -> tuple[float, float]:
    """KS statistic and p-value against Exp with the given mean (sample mean when None)."""
    x = np.asarray(samples, float)
    scale = float(x.mean()) if scale is None else scale
    res = stats.kstest(x, "expon", args=(0.0, scale))
    return float(res.statistic), float(res.pvalue)


def jitter_counts(counts, norm: float, rng: np.random.Generator) -> np.ndarray:
    """(K + U) / norm: spreads integer counts over their unit cell before a continuous test."""
    k = np.asarray(counts, float)
    return (k + rng.uniform(size=k.shape)) / norm


def chi2_geometric(counts, success: float, min_expected: float = 5.0) -> tuple[float, float, int]:
    """Pearson chi-square of counts on {1, 2, ...} against Geometric(success); returns (stat, p, dof)."""
    k = np.asarray(counts, np.int64)
    n = len(k)
    if np.any(k < 1):
        raise ValueError("geometric counts start at 1")
    q = 1.0 - success
    kmax = int(k.max())
    probs = [q ** (j - 1) * success for j in range(1, kmax + 1)]
    obs = [int(np.sum(k == j)) for j in range(1, kmax + 1)]
    # pool the upper tail until every bin expects at least min_expected
    bins_o, bins_e = [], []
    acc_o, acc_e = 0, 0.0
    for j in range(kmax):
        tail_e = n * q**j
        if n * probs[j] >= min_expected and tail_e - n * probs[j] >= min_expected:
            bins_o.append(obs[j])
            bins_e.append(n * probs[j])
        else:
            acc_o = int(np.sum(k >= j + 1))
            acc_e = tail_e
            break
    else:
        acc_o, acc_e = 0, n * q**kmax
    bins_o.append(acc_o)
    bins_e.append(acc_e)
    o = np.array(bins_o, float)
    e = np.array(bins_e, float)
    stat = float(np.sum((o - e) ** 2 / e))
    dof = len(o) - 1
    return stat, float(stats.chi2.sf(stat, dof)), dof


def normality_check(samples) -> dict:
    x = np.asarray(samples, float)
    sk = stats.skewtest(x)
    ku = stats.kurtosistest(x)
    om = stats.normaltest(x)
    return {"skew": float(stats.skew(x)), "excess_kurtosis": float(stats.kurtosis(x)),
            "p_skew": float(sk.pvalue), "p_kurtosis": float(ku.pvalue), "p_omnibus": float(om.pvalue)}


def stats_suite(samples, reference: str = "none", level: float = 0.01, **kw) -> TestReport:
    """Mean and stderr plus a goodness-of-fit test against 'exponential', 'geometric' or 'normal'."""
    x = np.asarray(samples, float)
    m = mean_ci(x)
    det: dict = {}
    stat = p = None
    verdict = True
    if reference == "exponential":
        stat, p = ks_exponential(x, kw.get("scale"))
        verdict = p >= level
    elif reference == "geometric":
        stat, p, dof = chi2_geometric(x.astype(np.int64), kw["success"])
        det["dof"] = dof
        verdict = p >= level
    elif reference == "normal":
        det = normality_check(x)
        p = det["p_omnibus"]
        verdict = det["p_skew"] >= level and det["p_kurtosis"] >= level
    return TestReport(f"stats_{reference}", bool(verdict), m.value, m.stderr, statistic=stat, p_value=p,
                      replicas=len(x), details=det)


def trend_slope(x, y, y_se) -> dict:
    """Weighted least-squares slope of y on x with its standard error and one-sided upward p-value."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    w = 1.0 / np.asarray(y_se, float) ** 2
    X = np.stack([np.ones_like(x), x], 1)
    cov = np.linalg.inv(X.T @ (X * w[:, None]))
    beta = cov @ (X.T @ (w * y))
    se = math.sqrt(cov[1, 1])
    z = beta[1] / se
    return {"slope": float(beta[1]), "slope_se": se, "z": float(z), "p_upward": float(stats.norm.sf(z))}


# ---------------------------------------------------------------------------
# chains


@dataclass
class SRIChainHandle:
    """A two-walker chain: compiled tables, its difference chain and the per-step drift."""

    name: str
    spec: EnvironmentSpec
    tables: PairTables
    diff: DifferenceKernel
    drift: np.ndarray
    centered: bool
    tilt: tuple

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def normalization(self) -> np.ndarray:
        return walker_coords(self.spec, Tilt(self.tilt) if any(self.tilt) else None)

    @classmethod
    def environment(cls, spec: EnvironmentSpec, tilt=None) -> "SRIChainHandle":
        t = Tilt(tuple([0.0] * spec.d)) if tilt is None else (tilt if isinstance(tilt, Tilt) else Tilt(tuple(tilt)))
        pt = pair_tables(spec, t if any(t.vector) else None)
        mu = build_step_distribution(spec)
        drift = mgf_oracle(mu).grad_log_M(t.array) if any(t.vector) else mu.mean.astype(float)
        return cls(f"{spec.model}-d{spec.d}", spec, pt, difference_from_pairs(pt), np.asarray(drift, float),
                   not any(t.vector), t.vector)

    @classmethod
    def independent(cls, spec: EnvironmentSpec) -> "SRIChainHandle":
        pt = pair_tables(spec)
        free = PairTables(spec, pt.tilt, pt.offsets, pt.far, [], np.zeros((0, pt.m, pt.m)), np.zeros(0), pt.log_m)
        return cls(f"independent-{spec.model}-d{spec.d}", spec, free, difference_from_pairs(free),
                   build_step_distribution(spec).mean.astype(float), True, pt.tilt.vector)

    def step(self, state, rng: np.random.Generator):
        x1, x2 = (np.asarray(s, np.int64) for s in state)
        J = self.tables.row(tuple(int(c) for c in x1 - x2)).ravel()
        j = rng.choice(len(J), p=J / J.sum())
        a, b = divmod(j, self.tables.m)
        return x1 + self.tables.offsets[a], x2 + self.tables.offsets[b]

    def pair_args(self):
        return self.tables.numba_args()

    def diff_args(self):
        return self.diff.numba_args()


def _fgrid(f: dict, d: int):
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


def indicator(d: int, y=None) -> dict:
    return {tuple([0] * d) if y is None else tuple(y): 1.0}


@dataclass
class CollisionRecord:
    """Running sums V(f; r) of f(R1 - R2) at checkpoints, one row per replica."""

    checkpoints: np.ndarray
    values: np.ndarray

    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.values, axis=1) >= -1e-12))


def collision_record(chain: SRIChainHandle, f: dict, y0, checkpoints, replicas: int, seed: int,
                     experiment: str = "collisions") -> CollisionRecord:
    f, f_r, grid = _fgrid(f, chain.d)
    cps = np.asarray(sorted(int(c) for c in checkpoints), np.int64)
    if not f:
        return CollisionRecord(cps, np.zeros((replicas, len(cps))))
    steps, fth, fal, nr, ngrid, nth, nal, _u = chain.diff_args()
    seeds = replica_seeds(seed, replicas, experiment)
    out = K.diff_counts(seeds, np.asarray(y0, np.int64), cps, steps, fth, fal, nr, ngrid, nth, nal, f_r, grid)
    return CollisionRecord(cps, out)


def pi_integral(spec: EnvironmentSpec, f: dict, independent: bool = False) -> float:
    """pi_unit(f) for the environment chain, or for the independent-walker chain."""
    if independent:
        from .invariant_measure import solve_invariant_measure, unit_normalize
        from .kpoint_motion import independent_difference_kernel
        dk = independent_difference_kernel(spec)
        radius = {1: 60, 2: 40}.get(spec.d, 10)
        pi = unit_normalize(solve_invariant_measure(dk, radius), dk, walker_coords(spec))
    else:
        pi = invariant_measure(spec)
    return float(pi.integrate(f))


# ---------------------------------------------------------------------------
# classical limit laws


def erdos_taylor_test(chain: SRIChainHandle, f: dict, N: int, y0, replicas: int, seed: int,
                      target_mean: float | None = None, tol: float = 0.15, level: float = 0.01,
                      independent_pi: bool | None = None) -> TestReport:
    """(log N)^{-1} sum_{r <= N} f(R1 - R2) against the exponential law with mean pi(f)/2."""
    if chain.d != 2:
        raise ModelError("Erdos-Taylor test is two-dimensional")
    if any(v < 0 for v in f.values()):
        raise ModelError("f must be nonnegative")
    rec = collision_record(chain, f, y0, [N], replicas, seed, "erdos-taylor")
    raw = rec.values[:, 0]
    L = math.log(N)
    x = raw / L
    if target_mean is None:
        indep = chain.name.startswith("independent") if independent_pi is None else independent_pi
        target_mean = 0.5 * pi_integral(chain.spec, f, indep)
    m = mean_ci(x)
    if np.all(raw == 0):
        return TestReport("erdos_taylor", target_mean == 0.0, 0.0, 0.0, target_mean, tol, replicas=replicas, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(99,)))
    integer = np.allclose(raw, np.round(raw))
    xj = jitter_counts(raw, L, rng) if integer else x
    stat, p = ks_exponential(xj)
    stat_t, p_t = ks_exponential(xj, target_mean + 0.5 / L if integer else target_mean)
    rel = abs(m.value - target_mean) / target_mean
    ok = rel <= tol and p >= level
    return TestReport("erdos_taylor", bool(ok), m.value, m.stderr, target_mean, tol, stat, p, replicas, seed,
                      {"relative_error": rel, "N": N, "jittered": integer, "ks_fixed_scale_p": p_t,
                       "ks_fixed_scale_stat": stat_t})


def total_collision_test_d3(chain: SRIChainHandle, horizon: int, replicas: int, seed: int, q_return: float | None = None,
                            level: float = 0.01, tail_tol: float = 0.01) -> TestReport:
    """Total visits to 0 (time 0 included) of the difference chain against Geometric(1 - q_return)."""
    if chain.d < 3:
        raise ModelError("total collision law needs d >= 3")
    d = chain.d
    q = return_probability(chain.diff) if q_return is None else q_return
    # expected visits after the horizon, from the local limit theorem
    cov = (chain.diff.steps * chain.diff.far[:, None]).T @ chain.diff.steps
    from .invariant_measure import cell_volume
    vol = cell_volume(chain.diff)
    dens = vol * (2 * math.pi) ** (-d / 2) * float(np.linalg.det(cov)) ** -0.5
    tail = dens * horizon ** (1 - d / 2) / (d / 2 - 1) / (1 - q)
    if tail > tail_tol:
        raise ModelError(f"truncation tail {tail:.3g} above tolerance: increase horizon")
    rec = collision_record(chain, indicator(d), np.zeros(d, np.int64), [horizon], replicas, seed, "geometric-d3")
    counts = rec.values[:, 0].astype(np.int64) + 1
    stat, p, dof = chi2_geometric(counts, 1 - q)
    m = mean_ci(counts)
    target = 1 / (1 - q)
    z = abs(m.value - target) / m.stderr if m.stderr > 0 else 0.0
    ok = p >= level
    return TestReport("geometric_d3", bool(ok), m.value, m.stderr, target, None, stat, p, replicas, seed,
                      {"q_return": q, "dof": dof, "tail_bound": tail, "mean_z": z, "horizon": horizon})


def local_time_test_d1(chain: SRIChainHandle, f: dict, N: int, t_grid, replicas: int, seed: int,
                       tol: float = 0.05, slope_tol: float = 0.05, independent_pi: bool | None = None) -> TestReport:
    """N^{-1/2} sum_{r <= Nt} f against c_1 pi(f) sqrt(t / pi) and the sqrt(t) scaling."""
    if chain.d != 1:
        raise ModelError("local time test is one-dimensional")
    t_grid = sorted(float(t) for t in t_grid)
    cps = [int(round(N * t)) for t in t_grid]
    rec = collision_record(chain, f, [0], cps, replicas, seed, "local-time-d1")
    x = rec.values / math.sqrt(N)
    indep = chain.name.startswith("independent") if independent_pi is None else independent_pi
    pif = pi_integral(chain.spec, f, indep) if f else 0.0
    one = TestFunction.constant(1)
    targets = [C_D[1] * pif * qvf_limit_integral(t, one, [0.0], [0.0], 1).value for t in t_grid]
    means = x.mean(axis=0)
    ses = x.std(axis=0, ddof=1) / math.sqrt(replicas)
    if not f:
        return TestReport("local_time_d1", bool(np.all(x == 0)), 0.0, 0.0, 0.0, tol, replicas=replicas, seed=seed)
    i1 = t_grid.index(1.0) if 1.0 in t_grid else len(t_grid) // 2
    rel = abs(means[i1] - targets[i1]) / targets[i1]
    sl = trend_slope(np.log(t_grid), np.log(means), ses / means)
    ok = rel <= tol and abs(sl["slope"] - 0.5) <= slope_tol
    return TestReport("local_time_d1", bool(ok), float(means[i1]), float(ses[i1]), float(targets[i1]), tol,
                      replicas=replicas, seed=seed,
                      details={"t": t_grid, "means": means, "stderrs": ses, "targets": targets, "slope": sl["slope"],
                               "slope_se": sl["slope_se"], "relative_error": rel, "pi_f": pif})


# ---------------------------------------------------------------------------
# invariance principle and anti-concentration


def invariance_principle_test(chain: SRIChainHandle, N: int, replicas: int, seed: int, t_grid=(0.5, 1.0),
                              starts=None, q: float = 4.0, n_se: float = 3.0) -> TestReport:
    """Covariance of N^{-1/2} A (R_{Nt} - Nt drift) for both walkers against t I."""
    d = chain.d
    if starts is None:
        far = 4 * (max((max(abs(c) for c in y) for y in near_set(chain.spec)), default=0) + 1)
        starts = (np.zeros(d, np.int64), np.zeros(d, np.int64))
    x1, x2 = (np.asarray(s, np.int64) for s in starts)
    cps = np.array(sorted({int(round(N * t)) for t in t_grid}), np.int64)
    offs, fth, fal, nr, ngrid, nth, nal, u = chain.pair_args()
    seeds = replica_seeds(seed, replicas, "invariance")
    pos, _lw = K.pair_positions(seeds, x1, x2, cps, offs, fth, fal, nr, ngrid, nth, nal, u)
    A = chain.normalization
    worst = 0.0
    rows = []
    moment = 0.0
    for c, r in enumerate(cps):
        t = r / N
        X = np.concatenate([(pos[:, c, 0] - x1 - r * chain.drift) @ A.T,
                            (pos[:, c, 1] - x2 - r * chain.drift) @ A.T], axis=1) / math.sqrt(N)
        prod = X[:, :, None] * X[:, None, :]
        cov = prod.mean(axis=0)
        se = prod.std(axis=0, ddof=1) / math.sqrt(replicas)
        target = t * np.eye(2 * d)
        z = np.abs(cov - target) / np.maximum(se, 1e-300)
        worst = max(worst, float(z.max()))
        rows.append({"t": t, "cov": cov, "stderr": se, "max_z": float(z.max())})
        norms = np.linalg.norm(X[:, :d], axis=1)
        moment = max(moment, float(np.mean(norms**q)) / t ** (q / 2))
    return TestReport("invariance_principle", worst <= n_se, worst, None, n_se, n_se, replicas=replicas, seed=seed,
                      details={"by_time": rows, "moment_bound": moment, "q": q, "N": N})


def anti_concentration_scan(chain: SRIChainHandle, r_grid, replicas: int, seed: int, level: float = 0.05,
                            y0=None) -> TestReport:
    """r^{d/2} max_y P(|D_r - y| <= 1) with a cross-fitted argmax, plus a one-sided trend test."""
    d = chain.d
    y0 = np.zeros(d, np.int64) if y0 is None else np.asarray(y0, np.int64)
    cps = np.array(sorted({int(r) for r in r_grid}), np.int64)
    steps, fth, fal, nr, ngrid, nth, nal, _u = chain.diff_args()
    seeds = replica_seeds(seed, replicas, "anti-concentration")
    pos = K.diff_positions(seeds, y0, cps, steps, fth, fal, nr, ngrid, nth, nal)
    half = replicas // 2
    vals, ses, ys = [], [], []
    for c, r in enumerate(cps):
        P = pos[:, c]
        # choose the center on the first half, estimate on the second
        sel = _best_center(P[:half])
        hits = np.all(np.abs(P[half:] - sel) <= 1, axis=1)
        p = max(hits.mean(), 0.5 / (replicas - half))
        n_hit = max(int(hits.sum()), 1)
        vals.append(p * r ** (d / 2))
        ses.append(p * r ** (d / 2) / math.sqrt(n_hit))
        ys.append(sel)
    vals = np.array(vals)
    ses = np.array(ses)
    tr = trend_slope(np.log(cps.astype(float)), np.log(vals), ses / vals)
    ok = tr["p_upward"] >= level
    return TestReport("anti_concentration", bool(ok), float(vals.max()), None, None, None, tr["z"], tr["p_upward"],
                      replicas, seed, {"r": cps, "scaled_max": vals, "stderr": ses, "centers": ys, **tr})


def _best_center(P: np.ndarray) -> np.ndarray:
    d = P.shape[1]
    pts, counts = np.unique(P, axis=0, return_counts=True)
    lookup = {tuple(p): c for p, c in zip(map(tuple, pts), counts)}
    best, arg = -1, np.zeros(d, np.int64)
    shifts = np.stack(np.meshgrid(*([np.arange(-1, 2)] * d), indexing="ij"), -1).reshape(-1, d)
    cand = np.unique((pts[:, None, :] + shifts[None, :, :]).reshape(-1, d), axis=0)
    for y in cand:
        tot = sum(lookup.get(tuple(y + s), 0) for s in shifts)
        if tot > best:
            best, arg = tot, y
    return arg


# ---------------------------------------------------------------------------
# expectation limits and backward propagation


def _pair_functional(chain: SRIChainHandle, f: dict, phi: TestFunction, x1, x2, Ns, seeds, subtract=None,
                     mode: int = 0):
    f, f_r, grid = _fgrid(f, chain.d)
    offs, fth, fal, nr, ngrid, nth, nal, u = chain.pair_args()
    Ns = np.asarray(Ns, float)
    hz = np.round(Ns).astype(np.int64)
    sub = np.zeros(len(Ns)) if subtract is None else np.asarray(subtract, float)
    pk = 1 if phi.kind == "constant" else 0
    pc = np.zeros(chain.d) if pk else np.asarray(phi.center, float)
    pw = 1.0 if pk else phi.width
    return K.pair_functional(seeds, np.asarray(x1, np.int64), np.asarray(x2, np.int64), offs, fth, fal, nr, ngrid,
                             nth, nal, u, f_r, grid, Ns, hz, sub, pk, pc, pw, chain.drift,
                             chain.normalization, mode, np.zeros(chain.d), 0.0)


def expectation_limit_test(chain: SRIChainHandle, f: dict, phi: TestFunction, x1, x2, N_grid, replicas: int, seed: int,
                           t: float = 1.0, tol: float = 0.1, variant: str = "separated",
                           independent_pi: bool | None = None) -> TestReport:
    """N^{(d-2)/2} sum_{r <= Nt} E[phi f(diff)] against c_d pi(f) times the heat-kernel quadrature.

    variant "bounded" (d = 2): (log N)^{-1} normalization against pi(f) / 2.
    """
    d = chain.d
    x1 = np.asarray(x1, np.int64)
    x2 = np.asarray(x2, np.int64)
    N_grid = sorted(int(n) for n in N_grid)
    indep = chain.name.startswith("independent") if independent_pi is None else independent_pi
    pif = pi_integral(chain.spec, f, indep) if f else 0.0
    A = chain.normalization
    if variant == "separated":
        if d >= 2 and np.max(np.abs(x1 - x2)) < math.sqrt(min(N_grid)) / 4:
            raise ModelError("starts not well separated for d >= 2")
    elif variant != "bounded" or d != 2:
        raise ModelError("bounded-separation variant is two-dimensional")
    seeds = replica_seeds(seed, replicas, f"expectation-{variant}")
    Ns = [n * t for n in N_grid]
    if f:
        raw = _pair_functional(chain, f, phi, x1, x2, Ns, seeds)
        # phi is evaluated at scale N*t; rescale arguments so they read N^{-1/2}
        if phi.kind != "constant" and t != 1.0:
            raise ModelError("non-constant phi requires t = 1")
    else:
        raw = np.zeros((replicas, len(N_grid)))
    targets, ests, ses = [], [], []
    for k, N in enumerate(N_grid):
        if variant == "bounded":
            x = raw[:, k] / math.log(N * t)
            target = 0.5 * pif
        else:
            x = raw[:, k] * N ** ((d - 2) / 2)
            a1 = A @ x1 / math.sqrt(N)
            a2 = A @ x2 / math.sqrt(N)
            target = C_D[d] * pif * qvf_limit_integral(t, phi, a1, a2, d).value if d <= 2 else math.nan
        m = mean_ci(x)
        targets.append(target)
        ests.append(m.value)
        ses.append(m.stderr)
    rel = [abs(e - g) / abs(g) if g else abs(e) for e, g in zip(ests, targets)]
    ok = rel[-1] <= tol
    return TestReport(f"expectation_limit_{variant}", bool(ok), ests[-1], ses[-1], targets[-1], tol,
                      replicas=replicas, seed=seed,
                      details={"N": N_grid, "estimates": ests, "stderrs": ses, "targets": targets,
                               "relative_errors": rel, "pi_f": pif})


def backward_propagation_test(chain: SRIChainHandle, f: dict, phi: TestFunction, N_grid, replicas: int, seed: int,
                              x1=None, x2=None, floor_ratio: float = 0.5) -> TestReport:
    """Second moment of the normalized sum of f(diff) (phi(xi_r) - phi(xi_0)) over N.

    d = 2: (log N)^{-1} normalization, must decrease strictly; d = 1: N^{-1/2}, must stay above a floor;
    d >= 3: unnormalized, must decrease.
    """
    d = chain.d
    x1 = np.zeros(d, np.int64) if x1 is None else np.asarray(x1, np.int64)
    x2 = np.zeros(d, np.int64) if x2 is None else np.asarray(x2, np.int64)
    N_grid = sorted(int(n) for n in N_grid)
    A = chain.normalization
    sub = [float(phi((A @ x1 / math.sqrt(N))[None, :])[0]) for N in N_grid]
    seeds = replica_seeds(seed, replicas, f"backward-d{d}")
    if phi.kind == "constant" or not f:
        raw = np.zeros((replicas, len(N_grid)))
    else:
        raw = _pair_functional(chain, f, phi, x1, x2, N_grid, seeds, subtract=sub)
    norm = {1: lambda n: n**-0.5, 2: lambda n: 1 / math.log(n)}.get(d, lambda n: 1.0)
    m2, se = [], []
    for k, N in enumerate(N_grid):
        x2s = (raw[:, k] * norm(N)) ** 2
        c = mean_ci(x2s)
        m2.append(c.value)
        se.append(c.stderr)
    m2 = np.array(m2)
    se = np.array(se)
    if d == 1:
        ok = bool(np.all(m2 - 3 * se > 0) and m2[-1] >= floor_ratio * m2[0])
        name = "backward_propagation_d1_control"
    else:
        ok = bool(np.all(np.diff(m2) < 0))
        name = f"backward_propagation_d{d}"
    if phi.kind == "constant":
        ok = bool(np.all(m2 == 0))
    return TestReport(name, ok, float(m2[-1]), float(se[-1]), None, None, replicas=replicas, seed=seed,
                      details={"N": N_grid, "second_moment": m2, "stderr": se})


# ---------------------------------------------------------------------------
# field-level and coefficient checks


def occupation_ratio(spec: EnvironmentSpec, y_far, horizon: int, replicas: int, seed: int) -> EstimateWithCI:
    """Occupation ratio of 0 against y_far for the stationary-measure cross-check (recurrent chains)."""
    chain = SRIChainHandle.environment(spec)
    d = spec.d
    y_far = tuple(int(c) for c in y_far)
    neg = tuple(-c for c in y_far)
    f0 = collision_record(chain, indicator(d), np.zeros(d, np.int64), [horizon], replicas, seed, "occupation-0")
    ff = collision_record(chain, {y_far: 0.5, neg: 0.5}, np.zeros(d, np.int64), [horizon], replicas, seed,
                          "occupation-0")
    a = f0.values[:, 0]
    b = ff.values[:, 0]
    ratio = a.sum() / b.sum()
    # delta-method stderr of a ratio of means
    ma, mb = a.mean(), b.mean()
    cov = np.cov(a, b, ddof=1)
    var = (cov[0, 0] / mb**2 - 2 * ma * cov[0, 1] / mb**3 + ma**2 * cov[1, 1] / mb**4) / replicas
    return EstimateWithCI(float(ratio), float(math.sqrt(max(var, 0.0))), replicas, seed, {"y_far": y_far})


def field_gaussianity_test(spec: EnvironmentSpec, N: int, envs: int, seed: int, phi: TestFunction | None = None,
                           v=(1.0,), regime: str = "B", tol: float = 0.15, level: float = 0.05,
                           trim: float = 1e-30) -> TestReport:
    """Var F_N(1, phi) over environments against c_1 gamma^2 times the Duhamel integral, plus normality."""
    from .density_fields import FastEvolver1D, InitialProfile, field_value, mean_fields, schedule_for

    if spec.d != 1:
        raise ModelError("field test is one-dimensional")
    phi = TestFunction.gaussian([0.0], 1.0) if phi is None else phi
    P = schedule_for(spec, regime, N, v)
    nu = InitialProfile.dirac(1, N)
    G = mean_fields(spec, P, nu, [phi], [N])[0, 0]
    vals = np.empty(envs)
    lost = 0.0
    for i, s in enumerate(replica_seeds(seed, envs, "field-gaussianity")):
        ev = FastEvolver1D(spec, nu, N, int(s), trim)
        ev.advance(N)
        vals[i] = field_value(P, ev.state_obj(), phi, nu)
        lost = max(lost, ev.lost)
    F = P.B_N * (vals - G)
    var = float(F.var(ddof=1))
    # stderr of a sample variance from the fourth central moment
    c = F - F.mean()
    se = float(math.sqrt(max(np.mean(c**4) - var**2, 0.0) / envs))
    vhat = np.asarray(P.sigma) / P.sigma_norm
    g2 = gamma_ext_sq(spec, vhat)
    integral = extremal_variance_closed_form(1.0, phi, InitialData.dirac([0.0]), 1).value
    target = C_D[1] * g2 * integral
    rel = abs(var - target) / target
    norm = normality_check(F)
    ok = rel <= tol and norm["p_skew"] >= level and norm["p_kurtosis"] >= level
    return TestReport("field_gaussianity_d1", bool(ok), var, se, target, tol, None, norm["p_omnibus"], envs, seed,
                      {"relative_error": rel, "gamma_sq": g2, "duhamel": integral, "mean_F": float(F.mean()),
                       "mean_field": G, "lost_mass": lost, "N": N, **norm})


def regime_c_ratio_test(spec: EnvironmentSpec, N: int, v_norms, replicas: int, seed: int, tol: float = 0.25,
                        sep_scale: float = 1.0) -> TestReport:
    """E[Q^{vartheta}] in regime C over two |v|, each divided by its first-order prediction.

    The first-order prediction is c_2 pi_s(vartheta_s) times the heat-kernel quadrature (tilted
    invariant measure and tilted walker coordinates); the ratio of the two normalized values is
    compared with the predicted (1 - gamma^2(v)/2)^{-1} ordering.
    """
    from .density_fields import InitialProfile, estimate_qvf, schedule_for

    if spec.d != 2:
        raise ModelError("regime C is two-dimensional")
    a = int(round(sep_scale * math.sqrt(N)))
    a += a % 2
    one = TestFunction.constant(2)
    rows = []
    for k, vn in enumerate(sorted(float(x) for x in v_norms)):
        P = schedule_for(spec, "C", N, [vn, 0.0])
        T = Tilt(P.tilt)
        th = vartheta_table(spec, T)
        nu1 = InitialProfile.dirac(2, N, [a, 0])
        nu2 = InitialProfile.dirac(2, N, [0, 0])
        est = estimate_qvf(spec, P, th, one, 1.0, nu1, nu2, replicas, seed + k, mode="tilted")
        pit = invariant_measure(spec, None, T)
        At = walker_coords(spec, T)
        I = qvf_limit_integral(1.0, one, At @ np.array([a, 0]) / math.sqrt(N), [0.0, 0.0], 2).value
        first = C_D[2] * pit.integrate(th.as_dict()) * I
        g2 = gamma_ext_sq(spec, [vn, 0.0])
        rows.append({"v": vn, "estimate": est.value, "stderr": est.stderr, "first_order": first,
                     "normalized": est.value / first, "normalized_se": est.stderr / first, "gamma_sq": g2,
                     "predicted_factor": 1.0 / (1.0 - g2 / 2.0), "ess": est.extra["ess"], "sigma": P.sigma_norm})
    r1, r2 = rows[0], rows[-1]
    observed = r2["normalized"] / r1["normalized"]
    predicted = r2["predicted_factor"] / r1["predicted_factor"]
    ok = r1["normalized"] > 1 and r2["normalized"] > 1 and observed > 1 and abs(observed - predicted) / predicted <= tol
    return TestReport("regime_c_ordering", bool(ok), observed, None, predicted, tol, replicas=replicas, seed=seed,
                      details={"rows": rows, "N": N})


def weight_variance(spec: EnvironmentSpec) -> float:
    """Var of the right-jump weight for one-dimensional nearest-neighbor environments."""
    if spec.model != "nearest_neighbor" or spec.d != 1:
        raise ModelError("weight variance is defined for one-dimensional nearest-neighbor models")
    law = spec.weight_law
    if law.kind == "fixed":
        return 0.0
    if law.kind == "uniform":
        return 1.0 / 12.0
    if law.kind == "dirichlet":
        return 1.0 / (4.0 * (2.0 * law.alpha + 1.0))
    raise ModelError(f"no weight variance for law {law.kind!r}")


def invariant_measure_test(spec: EnvironmentSpec, target: float | None = None, tol: float = 0.02,
                           radius: int = 60, unit_tol: float = 1e-8, window_tol: float = 0.005,
                           y_far=None, horizon: int = 100000, replicas: int = 400, seed: int = 0,
                           n_se: float = 3.0) -> TestReport:
    """pi({0})/c_far against 1/(1 - 4 sigma^2), unit normalization, window doubling and occupation ratio."""
    from .invariant_measure import f_integral

    if target is None:
        target = 1.0 / (1.0 - 4.0 * weight_variance(spec))
    zero = tuple([0] * spec.d)
    # the start-at-zero bias of the occupation ratio is of order |y_far|/sqrt(horizon)
    y_far = (2,) + (0,) * (spec.d - 1) if y_far is None else tuple(y_far)
    pi = invariant_measure(spec, radius)
    pi2 = invariant_measure(spec, 2 * radius)
    ratio = pi.weight(zero) / pi.c_far
    ratio2 = pi2.weight(zero) / pi2.c_far
    unit = f_integral(pi, difference_from_pairs(pair_tables(spec)), walker_coords(spec))["total"]
    occ = occupation_ratio(spec, y_far, horizon, replicas, seed)
    occ_target = pi.weight(zero) / pi.weight(tuple(int(c) for c in y_far))
    rel = abs(ratio - target) / target
    checks = {
        "ratio": rel <= tol,
        "unit": abs(unit - 1.0) <= unit_tol,
        "window": abs(ratio2 - ratio) / ratio <= window_tol,
        "occupation": abs(occ.value - occ_target) <= n_se * occ.stderr,
    }
    return TestReport("invariant_measure", all(checks.values()), ratio, None, target, tol, replicas=replicas,
                      seed=seed, details={"checks": checks, "relative_error": rel, "unit_integral": unit,
                                          "ratio_doubled_window": ratio2, "occupation": occ.value,
                                          "occupation_stderr": occ.stderr, "occupation_target": occ_target})


def gamma_one_step(spec: EnvironmentSpec, v) -> float:
    """c_d gamma_ext^2 converted from composite-step to one-step lattice units."""
    s = spec.composite_steps or 1
    p = symmetry_order(spec)
    return C_D[spec.d] * gamma_ext_sq(spec, v) * s ** ((spec.d - 2) / 2 + p)


def gamma_closed_form_test(spec: EnvironmentSpec, target: float | None = None, tol: float = 0.05) -> TestReport:
    """gamma_ext^2 for a unit direction against 8 sigma^2/(1 - 4 sigma^2)."""
    if target is None:
        s2 = weight_variance(spec)
        target = 8.0 * s2 / (1.0 - 4.0 * s2)
    v = np.zeros(spec.d)
    v[0] = 1.0
    val = gamma_one_step(spec, v)
    rel = abs(val - target) / abs(target)
    return TestReport("gamma_closed_form", bool(rel <= tol), val, None, target, tol,
                      details={"relative_error": rel, "gamma_sq_normalized": gamma_ext_sq(spec, v),
                               "c_d": C_D[spec.d], "composite_steps": spec.composite_steps})


def taylor_remainder_test(specs, margin: float = 0.2, sigmas=None) -> TestReport:
    """Log-log slope of sup|u_s - zeta_s| is at least 2p + 1 - margin for every model."""
    from .kpoint_motion import taylor_remainder_slope

    rows = []
    for spec in specs:
        p = symmetry_order(spec)
        direction = np.ones(spec.d)
        slope, sig, errs = taylor_remainder_slope(spec, direction, sigmas)
        rows.append({"model": spec.model, "d": spec.d, "p": p, "slope": slope, "required": 2 * p + 1 - margin,
                     "sigmas": sig, "errors": errs})
    ok = all(r["slope"] >= r["required"] for r in rows)
    worst = min(r["slope"] - r["required"] for r in rows)
    return TestReport("taylor_remainder", bool(ok), worst, None, 0.0, margin, details={"rows": rows})


def theta_eff_test(spec: EnvironmentSpec, f: dict | None = None, v_small: float = 1e-3, v_mid: float = 0.1,
                   replicas: int = 2000, horizon: int = 20000, seed: int = 0, n_se: float = 3.0) -> TestReport:
    """Theta_eff(f; v) -> pi(f) as v -> 0, and series against resummed form for f = vartheta_v.

    Error bars combine Monte Carlo stderr with the window-solver error of the tilted measure.
    """
    from .invariant_measure import theta_eff

    d = spec.d
    f = indicator(d) if f is None else f
    e = np.zeros(d)
    e[0] = 1.0

    def err(est):
        return math.hypot(est.stderr, est.extra.get("solver_error", 0.0))

    small = theta_eff(spec, f, v_small * e, replicas, horizon, seed)
    pf = invariant_measure(spec).integrate(f)
    gap_small = abs(small.value - pf)
    ok_small = gap_small <= n_se * err(small)
    vm = v_mid * e
    th = vartheta_table(spec, Tilt.from_normalized(spec, vm)).as_dict()
    ser = theta_eff(spec, th, vm, replicas, horizon, seed + 1, form="series")
    res = theta_eff(spec, th, vm, replicas, horizon, seed + 1, form="resummed")
    gap_mid = abs(ser.value - res.value)
    bar_mid = n_se * math.hypot(err(ser), err(res))
    ok_mid = gap_mid <= bar_mid
    return TestReport("theta_eff", bool(ok_small and ok_mid), small.value, err(small), pf, n_se,
                      replicas=replicas, seed=seed,
                      details={"gap_small": gap_small, "mc_stderr_small": small.stderr,
                               "solver_error_small": small.extra.get("solver_error", 0.0), "series": ser.value,
                               "series_err": err(ser), "resummed": res.value, "resummed_err": err(res),
                               "gap_mid": gap_mid, "bar_mid": bar_mid, "ok_small": ok_small, "ok_mid": ok_mid})
