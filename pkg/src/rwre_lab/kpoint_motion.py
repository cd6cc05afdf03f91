"""Two-point and k-point motions: exact tables, tilted chains, pair functions."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from . import _kernels as K
from .env_models import (
    EnvironmentSpec,
    ModelError,
    Offset,
    QuenchedEnvironment,
    build_step_distribution,
    mgf_oracle,
    near_set,
    symmetry_order,
    two_point_kernel,
)


@dataclass(frozen=True)
class Tilt:
    """Exponential tilt in raw lattice coordinates."""

    vector: tuple[float, ...]

    @classmethod
    def from_normalized(cls, spec: EnvironmentSpec, v) -> "Tilt":
        """Tilt v given in identity-covariance coordinates: v.(A x) = (A^T v).x."""
        A = build_step_distribution(spec).normalization
        return cls(tuple(float(c) for c in A.T @ np.atleast_1d(np.asarray(v, float))))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.vector, float)

    def check(self, spec: EnvironmentSpec, k: int = 2) -> None:
        radius = mgf_oracle(build_step_distribution(spec)).z0 / (2 * k)
        if np.max(np.abs(self.array)) > radius:
            raise ModelError(f"tilt {self.vector} outside admissible ball of radius {radius:.3g}")


def _as_tilt(spec: EnvironmentSpec, tilt) -> Tilt:
    if tilt is None:
        return Tilt(tuple([0.0] * spec.d))
    if isinstance(tilt, Tilt):
        return tilt
    return Tilt(tuple(float(c) for c in np.atleast_1d(tilt)))


# ---------------------------------------------------------------------------
# exact pair tables


@dataclass
class PairTables:
    """Composite two-point step law, optionally exponentially tilted.

    joint[n] is the law of the offset pair (a1, a2) for walkers at separation
    near_keys[n]; outside the near set the walkers step independently from `far`.
    u[n] is the cumulant gap u_tilt(near_keys[n]).
    """

    spec: EnvironmentSpec
    tilt: Tilt
    offsets: np.ndarray
    far: np.ndarray
    near_keys: list[Offset]
    joint: np.ndarray
    u: np.ndarray
    log_m: float
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def m(self) -> int:
        return len(self.offsets)

    def near_index(self) -> dict[Offset, int]:
        return {y: i for i, y in enumerate(self.near_keys)}

    def row(self, y: Offset) -> np.ndarray:
        i = self.near_index().get(tuple(y))
        if i is None:
            return np.outer(self.far, self.far)
        return self.joint[i]

    def u_of(self, y: Offset) -> float:
        i = self.near_index().get(tuple(y))
        return 0.0 if i is None else float(self.u[i])

    @property
    def near_radius(self) -> int:
        return max((max(abs(c) for c in y) for y in self.near_keys), default=0)

    def numba_args(self):
        """Arrays for the compiled pair-chain kernels."""
        if "pair" not in self._cache:
            r = self.near_radius
            w = 2 * r + 1
            grid = -np.ones(w**self.d, np.int64)
            for i, y in enumerate(self.near_keys):
                grid[_flat(y, r, w)] = i
            fth, fal = K.build_alias(self.far)
            if len(self.near_keys):
                nth, nal = K.build_alias_rows(self.joint.reshape(len(self.near_keys), -1))
            else:
                nth = np.ones((1, self.m * self.m), np.uint64)
                nal = np.zeros((1, self.m * self.m), np.int64)
            self._cache["pair"] = (self.offsets.astype(np.int64), fth, fal, r, grid, nth, nal, self.u.astype(float))
        return self._cache["pair"]


def _flat(y, r, w) -> int:
    idx = 0
    for c in y:
        idx = idx * w + (c + r)
    return idx


@lru_cache(maxsize=None)
def _pair_tables_cached(spec: EnvironmentSpec, tilt: Tilt) -> PairTables:
    mu = build_step_distribution(spec)
    s = tilt.array
    e = np.exp(mu.offsets @ s)
    M = float(mu.probs @ e)
    far = mu.probs * e / M
    keys = list(near_set(spec))
    m = len(mu.offsets)
    joint = np.zeros((len(keys), m, m))
    u = np.zeros(len(keys))
    ee = np.outer(e, e)
    for i, y in enumerate(keys):
        tp = two_point_kernel(spec, y)
        w = tp.joint * ee
        tot = w.sum()
        joint[i] = w / tot
        u[i] = math.log(tot) - 2 * math.log(M)
    return PairTables(spec, tilt, mu.offsets, far, keys, joint, u, math.log(M))


def pair_tables(spec: EnvironmentSpec, tilt=None) -> PairTables:
    t = _as_tilt(spec, tilt)
    if np.any(t.array != 0):
        t.check(spec)
    return _pair_tables_cached(spec, t)


# ---------------------------------------------------------------------------
# difference chain


@dataclass
class DifferenceKernel:
    """Transition law y -> y + step of the separation of the two-point chain."""

    d: int
    steps: np.ndarray  # (q, d)
    far: np.ndarray  # (q,)
    near_keys: list[Offset]
    near: np.ndarray  # (n, q)
    u: np.ndarray  # (n,)
    _cache: dict = field(default_factory=dict, repr=False)

    def near_index(self) -> dict[Offset, int]:
        if "idx" not in self._cache:
            self._cache["idx"] = {y: i for i, y in enumerate(self.near_keys)}
        return self._cache["idx"]

    def row(self, y: Offset) -> np.ndarray:
        i = self.near_index().get(tuple(int(c) for c in y))
        return self.far if i is None else self.near[i]

    def u_of(self, y: Offset) -> float:
        i = self.near_index().get(tuple(int(c) for c in y))
        return 0.0 if i is None else float(self.u[i])

    @property
    def near_radius(self) -> int:
        return max((max(abs(c) for c in y) for y in self.near_keys), default=0)

    @property
    def max_step(self) -> int:
        return int(np.abs(self.steps).max())

    def pmf(self, y: Offset) -> dict[Offset, float]:
        y = tuple(int(c) for c in y)
        out: dict = {}
        for st, p in zip(self.steps, self.row(y)):
            if p > 0:
                z = tuple(int(a + b) for a, b in zip(y, st))
                out[z] = out.get(z, 0.0) + float(p)
        return out

    def reachable_from_zero(self, radius: int) -> set[Offset]:
        zero = tuple([0] * self.d)
        seen = {zero}
        stack = [zero]
        while stack:
            y = stack.pop()
            for z, p in self.pmf(y).items():
                if p > 0 and max(abs(c) for c in z) <= radius and z not in seen:
                    seen.add(z)
                    stack.append(z)
        return seen

    def numba_args(self):
        if "diff" not in self._cache:
            r = self.near_radius
            w = 2 * r + 1
            grid = -np.ones(w**self.d, np.int64)
            for i, y in enumerate(self.near_keys):
                grid[_flat(y, r, w)] = i
            fth, fal = K.build_alias(self.far)
            if len(self.near_keys):
                nth, nal = K.build_alias_rows(self.near)
            else:
                nth = np.ones((1, len(self.far)), np.uint64)
                nal = np.zeros((1, len(self.far)), np.int64)
            self._cache["diff"] = (self.steps.astype(np.int64), fth, fal, r, grid, nth, nal, self.u.astype(float))
        return self._cache["diff"]


def difference_from_pairs(pt: PairTables) -> DifferenceKernel:
    offs = pt.offsets
    m = len(offs)
    diffs = sorted({tuple(int(c) for c in offs[a] - offs[b]) for a in range(m) for b in range(m)})
    index = {s: i for i, s in enumerate(diffs)}
    amap = np.array([[index[tuple(int(c) for c in offs[a] - offs[b])] for b in range(m)] for a in range(m)])

    def collapse(J):
        out = np.zeros(len(diffs))
        np.add.at(out, amap.ravel(), J.ravel())
        return out

    far = collapse(np.outer(pt.far, pt.far))
    near = np.array([collapse(J) for J in pt.joint]) if len(pt.near_keys) else np.zeros((0, len(diffs)))
    return DifferenceKernel(pt.d, np.array(diffs, dtype=np.int64), far, list(pt.near_keys), near, pt.u.copy())


def difference_kernel(spec: EnvironmentSpec, tilt=None) -> DifferenceKernel:
    return difference_from_pairs(pair_tables(spec, tilt))


def independent_difference_kernel(spec: EnvironmentSpec) -> DifferenceKernel:
    """Reference chain: same one-walker law, no interaction."""
    pt = pair_tables(spec)
    free = PairTables(spec, pt.tilt, pt.offsets, pt.far, [], np.zeros((0, pt.m, pt.m)), np.zeros(0), pt.log_m)
    return difference_from_pairs(free)


# ---------------------------------------------------------------------------
# simulation


def simulate_quenched_kpoint(spec: EnvironmentSpec, k: int, starts, horizon: int, seed: int, env_id: int = 0,
                             walker_seed: int | None = None) -> np.ndarray:
    """Positions (horizon+1, k, d) of k walkers sharing one sampled environment."""
    env = QuenchedEnvironment(spec, seed, env_id)
    rng = np.random.default_rng(np.random.SeedSequence(seed if walker_seed is None else walker_seed,
                                                       spawn_key=(env_id, 10**6)))
    x = np.array(starts, dtype=np.int64).reshape(k, spec.d)
    path = np.empty((horizon + 1, k, spec.d), np.int64)
    path[0] = x
    for r in range(1, horizon + 1):
        rows: dict = {}
        for i in range(k):
            key = tuple(int(c) for c in x[i])
            if key not in rows:
                rows[key] = env.kernel_row(r, key)
            row = rows[key]
            j = rng.choice(len(row.probs), p=row.probs)
            x[i] = x[i] + row.offsets[j]
        path[r] = x
        env.drop_before(spec.composite_steps * (r - 1))
    return path


def tilted_two_point_step(spec: EnvironmentSpec, tilt, state, rng: np.random.Generator):
    """One exact step of the tilted two-point chain from state (x1, x2)."""
    pt = pair_tables(spec, tilt)
    x1, x2 = (np.asarray(s, np.int64) for s in state)
    y = tuple(int(c) for c in x1 - x2)
    J = pt.row(y).ravel()
    j = rng.choice(len(J), p=J / J.sum())
    a, b = divmod(j, pt.m)
    return x1 + pt.offsets[a], x2 + pt.offsets[b]


def exact_pair_distribution(pt: PairTables, x1, x2, horizon: int, weighted: bool = False):
    """Exact law of (R1, R2) after `horizon` steps as {(x1, x2): mass}.

    With weighted=True each path carries exp(sum of u over visited pre-step states).
    """
    m = pt.m
    offs = [tuple(int(c) for c in o) for o in pt.offsets]
    state = {(tuple(x1), tuple(x2)): 1.0}
    for _ in range(horizon):
        new: dict = {}
        for (a, b), p in state.items():
            y = tuple(i - j for i, j in zip(a, b))
            J = pt.row(y)
            w = math.exp(pt.u_of(y)) if weighted else 1.0
            for i in range(m):
                for j in range(m):
                    q = J[i, j]
                    if q == 0:
                        continue
                    key = (tuple(c + o for c, o in zip(a, offs[i])), tuple(c + o for c, o in zip(b, offs[j])))
                    new[key] = new.get(key, 0.0) + p * q * w
        state = new
    return state


def cumulant_gap(spec: EnvironmentSpec, tilt, k: int, x, samples: int = 4000, seed: int = 0):
    """K(x, (tilt,...,tilt); k): log joint tilted mass minus k log M.

    Exact for k = 2 (returns float); Monte Carlo over sampled environments for
    k > 2 (returns (estimate, stderr)).
    """
    t = _as_tilt(spec, tilt)
    s = t.array
    x = np.array(x, dtype=np.int64).reshape(k, spec.d)
    mu = build_step_distribution(spec)
    logM = math.log(float(mu.probs @ np.exp(mu.offsets @ s)))
    if k == 2:
        tp = two_point_kernel(spec, tuple(int(c) for c in x[0] - x[1]))
        e = np.exp(tp.offsets @ s)
        return float(math.log(e @ tp.joint @ e) - 2 * logM)
    if not 2 <= k <= 6:
        raise ModelError("k must lie in 2..6")
    vals = np.empty(samples)
    for n in range(samples):
        env = QuenchedEnvironment(spec, seed, env_id=n)
        prod = 1.0
        for i in range(k):
            row = env.kernel_row(1, tuple(int(c) for c in x[i]))
            prod *= float(row.probs @ np.exp(row.offsets @ s))
        vals[n] = prod
    mean = vals.mean()
    se = vals.std(ddof=1) / math.sqrt(samples)
    return math.log(mean) - k * logM, se / mean


# ---------------------------------------------------------------------------
# pair functions


@dataclass
class PairFunctionTable:
    """Values of a separation function on the near set; zero elsewhere."""

    name: str
    keys: list[Offset]
    values: np.ndarray
    meta: dict

    def __call__(self, y) -> float:
        try:
            return float(self.values[self.keys.index(tuple(int(c) for c in y))])
        except ValueError:
            return 0.0

    def as_dict(self) -> dict[Offset, float]:
        return {k: float(v) for k, v in zip(self.keys, self.values)}

    def to_csv(self, path) -> None:
        d = len(self.keys[0]) if self.keys else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"y{i + 1}" for i in range(d)] + ["value"])
            for k, v in zip(self.keys, self.values):
                w.writerow(list(k) + [repr(float(v))])


def _multi_indices(d: int, p: int) -> list[tuple[int, ...]]:
    out = []
    for c in itertools.combinations_with_replacement(range(d), p):
        r = [0] * d
        for i in c:
            r[i] += 1
        out.append(tuple(r))
    return sorted(set(out))


def _mono(offs: np.ndarray, r) -> np.ndarray:
    return np.prod(offs.astype(float) ** np.asarray(r, float), axis=1)


def _fact(r) -> float:
    return float(np.prod([math.factorial(i) for i in r]))


def eta_table(spec: EnvironmentSpec, r1, r2, coords: np.ndarray | None = None) -> PairFunctionTable:
    """eta_{r1,r2}(y) = int (x1-y1)^r1 (x2-y2)^r2 rho; offsets optionally mapped by `coords`."""
    keys = list(near_set(spec))
    vals = []
    for y in keys:
        tp = two_point_kernel(spec, y)
        offs = tp.offsets if coords is None else tp.offsets @ coords.T
        vals.append(float(_mono(offs, r1) @ tp.rho @ _mono(offs, r2)))
    return PairFunctionTable("eta", keys, np.array(vals), {"r1": tuple(r1), "r2": tuple(r2)})


def zeta_table(spec: EnvironmentSpec, v, p: int | None = None, coords: np.ndarray | None = None) -> PairFunctionTable:
    """zeta_v(y) = int prod_j (v.(x_j-y_j))^p / p! rho((y,0), dx)."""
    p = symmetry_order(spec) if p is None else p
    v = np.atleast_1d(np.asarray(v, float))
    keys = list(near_set(spec))
    vals = []
    for y in keys:
        tp = two_point_kernel(spec, y)
        offs = tp.offsets if coords is None else tp.offsets @ coords.T
        g = (offs @ v) ** p / math.factorial(p)
        vals.append(float(g @ tp.rho @ g))
    return PairFunctionTable("zeta", keys, np.array(vals), {"p": p, "v": tuple(v)})


def u_table(spec: EnvironmentSpec, tilt) -> PairFunctionTable:
    pt = pair_tables(spec, tilt)
    return PairFunctionTable("u", list(pt.near_keys), pt.u.copy(), {"tilt": pt.tilt.vector})


def vartheta_table(spec: EnvironmentSpec, tilt) -> PairFunctionTable:
    """vartheta(y) = int prod_j exp(s.(x_j-y_j) - log M) rho((y,0), dx), computed directly."""
    t = _as_tilt(spec, tilt)
    s = t.array
    mu = build_step_distribution(spec)
    e = np.exp(mu.offsets @ s)
    M = float(mu.probs @ e)
    keys = list(near_set(spec))
    vals = [float((e / M) @ two_point_kernel(spec, y).rho @ (e / M)) for y in keys]
    return PairFunctionTable("vartheta", keys, np.array(vals), {"tilt": t.vector})


def pair_functions(spec: EnvironmentSpec, v, multi_indices=None) -> dict[str, PairFunctionTable]:
    """zeta_v, u_v, vartheta_v and eta tables for a raw-coordinate vector v."""
    p = symmetry_order(spec)
    out = {"zeta": zeta_table(spec, v, p), "u": u_table(spec, v), "vartheta": vartheta_table(spec, v)}
    if multi_indices is None:
        multi_indices = [(r1, r2) for r1 in _multi_indices(spec.d, p) for r2 in _multi_indices(spec.d, p)]
    for r1, r2 in multi_indices:
        out[f"eta{r1}{r2}"] = eta_table(spec, r1, r2)
    return out


def taylor_remainder_slope(spec: EnvironmentSpec, direction, sigmas=None) -> tuple[float, np.ndarray, np.ndarray]:
    """Log-log slope of sup_y |u_s - zeta_s| against |s| along a direction."""
    if sigmas is None:
        sigmas = np.geomspace(1e-2, 1e-1, 8)
    direction = np.asarray(direction, float)
    direction = direction / np.linalg.norm(direction)
    p = symmetry_order(spec)
    errs = []
    for s in sigmas:
        v = s * direction
        u = u_table(spec, v)
        z = zeta_table(spec, v, p)
        errs.append(np.max(np.abs(u.values - z.values)))
    errs = np.array(errs)
    slope = np.polyfit(np.log(sigmas), np.log(errs), 1)[0]
    return float(slope), np.asarray(sigmas), errs


# ---------------------------------------------------------------------------
# tilting identity


def tilting_identity_check(spec: EnvironmentSpec, tilt, f: Callable, horizon: int, x1=None, x2=None) -> dict:
    """Exact check of E[prod_j e^{s.(R^j_t - R^j_0) - t log M} f(R_t)] = E_tilt[e^{sum u} f(R_t)]."""
    t = _as_tilt(spec, tilt)
    zero = tuple([0] * spec.d)
    x1 = zero if x1 is None else tuple(x1)
    x2 = zero if x2 is None else tuple(x2)
    base = pair_tables(spec)
    tilted = pair_tables(spec, t)
    s = t.array
    lhs = 0.0
    for (a, b), p in exact_pair_distribution(base, x1, x2, horizon).items():
        w = math.exp(s @ (np.subtract(a, x1) + np.subtract(b, x2)) - 2 * horizon * tilted.log_m)
        lhs += p * w * f(np.array(a), np.array(b))
    rhs = 0.0
    for (a, b), p in exact_pair_distribution(tilted, x1, x2, horizon, weighted=True).items():
        rhs += p * f(np.array(a), np.array(b))
    return {"lhs": lhs, "rhs": rhs, "residual": abs(lhs - rhs)}


def tilting_identity_mc(spec: EnvironmentSpec, tilt, f: Callable, horizon: int, replicas: int, seed: int) -> dict:
    """Monte Carlo version of the tilting identity (untilted vs tilted sampler)."""
    from .seeding import replica_seeds

    t = _as_tilt(spec, tilt)
    s = t.array
    zero = np.zeros(spec.d, np.int64)
    cps = np.array([horizon], np.int64)
    base = pair_tables(spec)
    tilted = pair_tables(spec, t)
    pos0, _ = K.pair_positions(replica_seeds(seed, replicas, "tilt-lhs"), zero, zero, cps, *base.numba_args())
    pos1, lw1 = K.pair_positions(replica_seeds(seed, replicas, "tilt-rhs"), zero, zero, cps, *tilted.numba_args())
    fa = np.array([f(p[0, 0], p[0, 1]) for p in pos0])
    w0 = np.exp((pos0[:, 0, 0, :] + pos0[:, 0, 1, :]) @ s - 2 * horizon * tilted.log_m)
    a = fa * w0
    fb = np.array([f(p[0, 0], p[0, 1]) for p in pos1])
    b = fb * np.exp(lw1[:, 0])
    se = math.sqrt(a.var(ddof=1) / replicas + b.var(ddof=1) / replicas)
    return {"lhs": a.mean(), "rhs": b.mean(), "residual": abs(a.mean() - b.mean()), "stderr": se}
