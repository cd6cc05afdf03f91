"""Catalog of lattice random-environment models, annealed laws and quenched rows."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from typing import Iterable

import numpy as np

MODELS = ("nearest_neighbor", "symmetric_lazy", "random_landscape")
WEIGHT_KINDS = ("uniform", "dirichlet", "log_levels", "fixed")

Offset = tuple[int, ...]


class ModelError(ValueError):
    """Invalid or unsupported model specification."""


@dataclass(frozen=True)
class WeightLaw:
    """Parametric law of the random weights.

    uniform:    NN -> Dirichlet(1); lazy -> stay probability U ~ Uniform[lo, hi].
    dirichlet:  NN only, symmetric Dirichlet(alpha) over the 2d directions.
    log_levels: landscape only, log-weights uniform on the finite set `levels`.
    fixed:      deterministic kernel; NN uses `weights`, lazy uses `lo`, landscape uses zero log-weights.
    """

    kind: str = "uniform"
    alpha: float = 1.0
    lo: float = 0.0
    hi: float = 1.0
    levels: tuple[float, ...] = (-0.5, 0.5)
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in WEIGHT_KINDS:
            raise ModelError(f"unknown weight law {self.kind!r}")
        if self.kind == "dirichlet" and not self.alpha > 0:
            raise ModelError("dirichlet alpha must be positive")
        if not (0.0 <= self.lo <= self.hi <= 1.0):
            raise ModelError("uniform law needs 0 <= lo <= hi <= 1")
        if self.kind == "log_levels" and len(self.levels) == 0:
            raise ModelError("log_levels needs at least one level")


@dataclass(frozen=True)
class EnvironmentSpec:
    model: str = "nearest_neighbor"
    d: int = 1
    weight_law: WeightLaw = field(default_factory=WeightLaw)
    composite_steps: int | None = None
    landscape_support: tuple[tuple[Offset, float], ...] | None = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ModelError(f"unknown model {self.model!r}")
        if self.d < 1:
            raise ModelError("dimension must be >= 1")
        if self.composite_steps is None:
            object.__setattr__(self, "composite_steps", 2 if self.model == "nearest_neighbor" else 1)
        if self.composite_steps < 1:
            raise ModelError("composite_steps must be positive")
        kind = self.weight_law.kind
        allowed = {
            "nearest_neighbor": ("uniform", "dirichlet", "fixed"),
            "symmetric_lazy": ("uniform", "fixed"),
            "random_landscape": ("log_levels", "fixed"),
        }[self.model]
        if kind not in allowed:
            raise ModelError(f"weight law {kind!r} not available for {self.model}")
        if self.model == "random_landscape":
            supp = self.landscape_support
            if supp is None:
                supp = tuple((o, 1.0) for o in _default_landscape_support(self.d))
                object.__setattr__(self, "landscape_support", supp)
            supp = tuple((tuple(int(c) for c in o), float(b)) for o, b in supp)
            object.__setattr__(self, "landscape_support", supp)
            for o, b in supp:
                if len(o) != self.d or b <= 0:
                    raise ModelError("landscape support needs d-dim offsets with positive weights")
        if self.model == "nearest_neighbor" and kind == "fixed":
            w = self.weight_law.weights
            if w is None:
                w = tuple([1.0 / (2 * self.d)] * (2 * self.d))
                object.__setattr__(self, "weight_law", WeightLaw(kind="fixed", weights=w))
            if len(self.weight_law.weights) != 2 * self.d or abs(sum(self.weight_law.weights) - 1) > 1e-12:
                raise ModelError("fixed NN weights must be 2d probabilities")

    # serialization
    def to_dict(self) -> dict:
        wl = asdict(self.weight_law)
        kind = wl.pop("kind")
        out = {
            "model": self.model,
            "d": self.d,
            "weight_law": kind,
            "weight_params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in wl.items() if v is not None},
            "composite_steps": self.composite_steps,
        }
        if self.landscape_support is not None:
            out["landscape_support"] = [[list(o), b] for o, b in self.landscape_support]
        return out

    @classmethod
    def from_dict(cls, cfg: dict) -> "EnvironmentSpec":
        allowed = {"model", "d", "weight_law", "weight_params", "composite_steps", "landscape_support"}
        unknown = set(cfg) - allowed
        if unknown:
            raise ModelError(f"unknown environment keys: {sorted(unknown)}")
        params = dict(cfg.get("weight_params") or {})
        bad = set(params) - {"alpha", "lo", "hi", "levels", "weights"}
        if bad:
            raise ModelError(f"unknown weight_params keys: {sorted(bad)}")
        for k in ("levels", "weights"):
            if k in params and params[k] is not None:
                params[k] = tuple(float(x) for x in params[k])
        wl = WeightLaw(kind=cfg.get("weight_law", "uniform"), **params)
        supp = cfg.get("landscape_support")
        if supp is not None:
            supp = tuple((tuple(int(c) for c in o), float(b)) for o, b in supp)
        return cls(
            model=cfg.get("model", "nearest_neighbor"),
            d=int(cfg.get("d", 1)),
            weight_law=wl,
            composite_steps=cfg.get("composite_steps"),
            landscape_support=supp,
        )


def _default_landscape_support(d: int) -> list[Offset]:
    out = [tuple([0] * d)]
    for i in range(d):
        for s in (1, -1):
            e = [0] * d
            e[i] = s
            out.append(tuple(e))
    return out


def unit_vectors(d: int) -> list[Offset]:
    """Directions +e1, -e1, +e2, -e2, ..."""
    out = []
    for i in range(d):
        for s in (1, -1):
            e = [0] * d
            e[i] = s
            out.append(tuple(e))
    return out


# ---------------------------------------------------------------------------
# elementary laws


@dataclass(frozen=True)
class ElementaryLaw:
    offsets: tuple[Offset, ...]
    probs: np.ndarray


def elementary_offsets(spec: EnvironmentSpec) -> tuple[Offset, ...]:
    d = spec.d
    if spec.model == "nearest_neighbor":
        return tuple(unit_vectors(d))
    if spec.model == "symmetric_lazy":
        return (tuple([0] * d),) + tuple(unit_vectors(d))
    return tuple(o for o, _ in spec.landscape_support)


def _nn_weight_moments(spec: EnvironmentSpec) -> tuple[np.ndarray, np.ndarray]:
    """First and second moments of the NN weight vector."""
    K = 2 * spec.d
    wl = spec.weight_law
    if wl.kind == "fixed":
        w = np.asarray(wl.weights, float)
        return w, np.outer(w, w)
    a = 1.0 if wl.kind == "uniform" else wl.alpha
    m1 = np.full(K, 1.0 / K)
    m2 = np.full((K, K), a * a / (K * a * (K * a + 1)))
    np.fill_diagonal(m2, a * (a + 1) / (K * a * (K * a + 1)))
    return m1, m2


def _lazy_moments(spec: EnvironmentSpec) -> tuple[float, float]:
    wl = spec.weight_law
    if wl.kind == "fixed":
        return wl.lo, wl.lo * wl.lo
    lo, hi = wl.lo, wl.hi
    m1 = 0.5 * (lo + hi)
    m2 = (lo * lo + lo * hi + hi * hi) / 3.0
    return m1, m2


def _landscape_levels(spec: EnvironmentSpec) -> np.ndarray:
    if spec.weight_law.kind == "fixed":
        return np.zeros(1)
    return np.asarray(spec.weight_law.levels, float)


def _landscape_rows(spec: EnvironmentSpec, omega_at: np.ndarray) -> np.ndarray:
    """Rows for stacked configurations; omega_at has shape (..., m) = omega at x+z."""
    b = np.array([w for _, w in spec.landscape_support])
    e = b * np.exp(omega_at)
    return e / e.sum(axis=-1, keepdims=True)


@lru_cache(maxsize=None)
def elementary_step_law(spec: EnvironmentSpec) -> ElementaryLaw:
    offs = elementary_offsets(spec)
    if spec.model == "nearest_neighbor":
        m1, _ = _nn_weight_moments(spec)
        return ElementaryLaw(offs, m1)
    if spec.model == "symmetric_lazy":
        m1, _ = _lazy_moments(spec)
        K = 2 * spec.d
        return ElementaryLaw(offs, np.array([m1] + [(1 - m1) / K] * K))
    lv = _landscape_levels(spec)
    m = len(offs)
    configs = np.array(list(itertools.product(lv, repeat=m)))
    rows = _landscape_rows(spec, configs)
    return ElementaryLaw(offs, rows.mean(axis=0))


def _add(a: Offset, b: Offset) -> Offset:
    return tuple(x + y for x, y in zip(a, b))


def _sub(a: Offset, b: Offset) -> Offset:
    return tuple(x - y for x, y in zip(a, b))


@lru_cache(maxsize=None)
def elementary_pair_law(spec: EnvironmentSpec, y: Offset) -> np.ndarray:
    """E[K(y, y+a) K(0, b)] over elementary offsets (a, b)."""
    y = tuple(y)
    offs = elementary_offsets(spec)
    law = elementary_step_law(spec)
    indep = np.outer(law.probs, law.probs)
    zero = tuple([0] * spec.d)
    if spec.model in ("nearest_neighbor", "symmetric_lazy"):
        if y != zero:
            return indep
        if spec.model == "nearest_neighbor":
            return _nn_weight_moments(spec)[1].copy()
        m1, m2 = _lazy_moments(spec)
        K = 2 * spec.d
        m = K + 1
        out = np.empty((m, m))
        out[0, 0] = m2
        out[0, 1:] = (m1 - m2) / K
        out[1:, 0] = (m1 - m2) / K
        out[1:, 1:] = (1 - 2 * m1 + m2) / (K * K)
        return out
    # landscape: enumerate log-weights over the union of touched sites
    sites1 = [_add(y, z) for z in offs]
    sites2 = list(offs)
    union = sorted(set(sites1) | set(sites2))
    if len(set(sites1) & set(sites2)) == 0:
        return indep
    idx = {s: i for i, s in enumerate(union)}
    i1 = [idx[s] for s in sites1]
    i2 = [idx[s] for s in sites2]
    lv = _landscape_levels(spec)
    n = len(union)
    if len(lv) ** n > 5_000_000:
        raise ModelError("landscape enumeration too large")
    configs = np.array(list(itertools.product(lv, repeat=n)))
    r1 = _landscape_rows(spec, configs[:, i1])
    r2 = _landscape_rows(spec, configs[:, i2])
    return np.einsum("ka,kb->ab", r1, r2) / len(configs)


def elementary_near_set(spec: EnvironmentSpec) -> list[Offset]:
    zero = tuple([0] * spec.d)
    if spec.model != "random_landscape":
        return [zero]
    offs = elementary_offsets(spec)
    return sorted({_sub(a, b) for a in offs for b in offs})


# ---------------------------------------------------------------------------
# composite laws


@dataclass(frozen=True)
class StepDistribution:
    offsets: np.ndarray  # (m, d) int
    probs: np.ndarray  # (m,)
    mean: np.ndarray  # (d,)
    cov: np.ndarray  # (d, d)
    normalization: np.ndarray  # Sigma^{-1/2}

    @property
    def d(self) -> int:
        return self.offsets.shape[1]

    def as_dict(self) -> dict[Offset, float]:
        return {tuple(int(c) for c in o): float(p) for o, p in zip(self.offsets, self.probs)}

    def normalized_offsets(self) -> np.ndarray:
        return self.offsets @ self.normalization.T


def _convolve(d1: dict, d2: dict) -> dict:
    out: dict = {}
    for a, p in d1.items():
        for b, q in d2.items():
            k = _add(a, b)
            out[k] = out.get(k, 0.0) + p * q
    return out


def inv_sqrt_psd(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(S)
    return (V / np.sqrt(w)) @ V.T


def make_step_distribution(pmf: dict[Offset, float]) -> StepDistribution:
    keys = sorted(k for k, v in pmf.items() if v > 0)
    offs = np.array(keys, dtype=np.int64)
    probs = np.array([pmf[k] for k in keys])
    probs = probs / probs.sum()
    mean = probs @ offs
    c = offs - mean
    cov = (c * probs[:, None]).T @ c
    ev = np.linalg.eigvalsh(cov)
    if ev.min() <= 1e-12 * max(1.0, ev.max()):
        raise ModelError("degenerate step law: support lies in a proper subspace")
    return StepDistribution(offs, probs, mean, cov, inv_sqrt_psd(cov))


@lru_cache(maxsize=None)
def build_step_distribution(spec: EnvironmentSpec) -> StepDistribution:
    law = elementary_step_law(spec)
    one = {o: float(p) for o, p in zip(law.offsets, law.probs) if p > 0}
    pmf = {tuple([0] * spec.d): 1.0}
    for _ in range(spec.composite_steps):
        pmf = _convolve(pmf, one)
    return make_step_distribution(pmf)


@dataclass(frozen=True)
class TwoPointKernel:
    """Joint composite step law of two walkers at (y, 0)."""

    separation: Offset
    offsets: np.ndarray  # (m, d) composite offsets, same order as StepDistribution
    joint: np.ndarray  # (m, m): P(walker at y moves by a, walker at 0 moves by b)
    mu: np.ndarray  # (m,)

    @property
    def rho(self) -> np.ndarray:
        return self.joint - np.outer(self.mu, self.mu)


@lru_cache(maxsize=None)
def two_point_kernel(spec: EnvironmentSpec, y: Offset) -> TwoPointKernel:
    y = tuple(int(c) for c in y)
    if len(y) != spec.d:
        raise ModelError("separation dimension mismatch")
    mu = build_step_distribution(spec)
    index = {tuple(int(c) for c in o): i for i, o in enumerate(mu.offsets)}
    eoffs = elementary_offsets(spec)
    zero = tuple([0] * spec.d)
    state = {(zero, zero): 1.0}
    for _ in range(spec.composite_steps):
        new: dict = {}
        for (c1, c2), p in state.items():
            sep = _sub(_add(y, c1), c2)
            tab = elementary_pair_law(spec, sep)
            for i, a in enumerate(eoffs):
                for j, b in enumerate(eoffs):
                    q = tab[i, j]
                    if q == 0.0:
                        continue
                    k = (_add(c1, a), _add(c2, b))
                    new[k] = new.get(k, 0.0) + p * q
        state = new
    m = len(index)
    joint = np.zeros((m, m))
    for (c1, c2), p in state.items():
        joint[index[c1], index[c2]] += p
    return TwoPointKernel(y, mu.offsets, joint, mu.probs)


def _box(radius: int, d: int) -> Iterable[Offset]:
    return itertools.product(range(-radius, radius + 1), repeat=d)


@lru_cache(maxsize=None)
def near_set(spec: EnvironmentSpec) -> tuple[Offset, ...]:
    """Separations at which the composite pair law differs from mu x mu."""
    eoffs = elementary_offsets(spec)
    diffs = {_sub(a, b) for a in eoffs for b in eoffs}
    cand = set(elementary_near_set(spec))
    frontier = set(cand)
    for _ in range(spec.composite_steps - 1):
        frontier = {_add(c, dd) for c in frontier for dd in diffs}
        cand |= frontier
    out = []
    for y in sorted(cand):
        if np.abs(two_point_kernel(spec, y).rho).max() > 1e-15:
            out.append(y)
    return tuple(out)


def interaction_range(spec: EnvironmentSpec) -> int:
    ns = near_set(spec)
    return max((max(abs(c) for c in y) for y in ns), default=0)


def symmetry_order(spec: EnvironmentSpec, max_order: int = 4, tol: float = 1e-12) -> int:
    """Smallest degree at which a row moment of the composite kernel is random."""
    zero = tuple([0] * spec.d)
    tp = two_point_kernel(spec, zero)
    rho = tp.rho
    offs = tp.offsets.astype(float)
    for k in range(1, max_order + 1):
        for r in itertools.combinations_with_replacement(range(spec.d), k):
            c = np.prod(offs[:, list(r)], axis=1)
            if float(c @ rho @ c) > tol:
                return k
    if np.abs(rho).max() <= tol:
        raise ModelError("kernel is deterministic")
    raise ModelError("unsupported symmetry order")


# ---------------------------------------------------------------------------
# moment generating function


@dataclass(frozen=True)
class MgfOracle:
    offsets: np.ndarray
    probs: np.ndarray
    z0: float

    def _check(self, s):
        s = np.atleast_1d(np.asarray(s, float))
        if np.max(np.abs(s)) > self.z0:
            raise ModelError(f"tilt {s} exceeds admissible radius {self.z0}")
        return s

    def M(self, s) -> float:
        s = self._check(s)
        return float(self.probs @ np.exp(self.offsets @ s))

    def log_M(self, s) -> float:
        return float(np.log(self.M(s)))

    def grad_log_M(self, s) -> np.ndarray:
        s = self._check(s)
        w = self.probs * np.exp(self.offsets @ s)
        w /= w.sum()
        return w @ self.offsets

    def hessian_log_M(self, s) -> np.ndarray:
        s = self._check(s)
        w = self.probs * np.exp(self.offsets @ s)
        w /= w.sum()
        m = w @ self.offsets
        c = self.offsets - m
        return (c * w[:, None]).T @ c

    def tilted(self, s) -> np.ndarray:
        s = self._check(s)
        w = self.probs * np.exp(self.offsets @ s)
        return w / w.sum()


def default_z0(mu: StepDistribution) -> float:
    """Admissible sup-norm radius for tilts, in raw lattice units."""
    return 8.0 / float(np.abs(mu.offsets).max())


def mgf_oracle(mu: StepDistribution, z0: float | None = None) -> MgfOracle:
    return MgfOracle(mu.offsets.astype(float), mu.probs, default_z0(mu) if z0 is None else z0)


# ---------------------------------------------------------------------------
# quenched environments


def _zigzag(n: int) -> int:
    return 2 * n if n >= 0 else -2 * n - 1


@dataclass
class KernelRow:
    site: Offset
    time: int
    offsets: np.ndarray
    probs: np.ndarray


class QuenchedEnvironment:
    """Lazily sampled environment; rows are deterministic in (seed, env_id, time, site block)."""

    def __init__(self, spec: EnvironmentSpec, seed: int, env_id: int = 0, block: int | None = None):
        self.spec = spec
        self.seed = int(seed)
        self.env_id = int(env_id)
        self.block = block or (32 if spec.d == 1 else 8)
        self._slices: dict[int, dict[Offset, np.ndarray]] = {}
        self._eoffs = elementary_offsets(spec)
        self._eoffs_arr = np.array(self._eoffs, dtype=np.int64)

    def _block_values(self, t: int, bkey: Offset) -> np.ndarray:
        sl = self._slices.setdefault(t, {})
        v = sl.get(bkey)
        if v is not None:
            return v
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.env_id, t, *map(_zigzag, bkey)))
        rng = np.random.default_rng(ss)
        nsites = self.block**self.spec.d
        spec, wl = self.spec, self.spec.weight_law
        if spec.model == "nearest_neighbor":
            K = 2 * spec.d
            if wl.kind == "fixed":
                v = np.tile(np.asarray(wl.weights), (nsites, 1))
            else:
                a = 1.0 if wl.kind == "uniform" else wl.alpha
                g = rng.gamma(a, size=(nsites, K))
                v = g / g.sum(axis=1, keepdims=True)
        elif spec.model == "symmetric_lazy":
            if wl.kind == "fixed":
                v = np.full(nsites, wl.lo)
            else:
                v = rng.uniform(wl.lo, wl.hi, size=nsites)
        else:
            lv = _landscape_levels(spec)
            v = lv[rng.integers(0, len(lv), size=nsites)]
        sl[bkey] = v
        return v

    def _site_value(self, t: int, x: Offset):
        B = self.block
        bkey = tuple(c // B for c in x)
        loc = 0
        for c in x:
            loc = loc * B + (c % B)
        return self._block_values(t, bkey)[loc]

    def elementary_row(self, t: int, x: Offset) -> np.ndarray:
        """Probabilities over elementary offsets at elementary time t, site x."""
        spec = self.spec
        x = tuple(int(c) for c in x)
        if spec.model == "nearest_neighbor":
            return np.asarray(self._site_value(t, x), float)
        if spec.model == "symmetric_lazy":
            u = float(self._site_value(t, x))
            K = 2 * spec.d
            return np.array([u] + [(1 - u) / K] * K)
        om = np.array([self._site_value(t, _add(x, z)) for z in self._eoffs])
        return _landscape_rows(spec, om)

    def kernel_row(self, r: int, x: Offset) -> KernelRow:
        """Composite kernel K_r(x, .) for r >= 1."""
        if r < 1:
            raise ModelError("kernel rows are indexed by r >= 1")
        s = self.spec.composite_steps
        x = tuple(int(c) for c in x)
        pmf = {tuple([0] * self.spec.d): 1.0}
        for j in range(s):
            t = s * (r - 1) + j
            new: dict = {}
            for c, p in pmf.items():
                row = self.elementary_row(t, _add(x, c))
                for z, q in zip(self._eoffs, row):
                    if q > 0:
                        k = _add(c, z)
                        new[k] = new.get(k, 0.0) + p * q
            pmf = new
        keys = sorted(pmf)
        probs = np.array([pmf[k] for k in keys])
        return KernelRow(x, r, np.array(keys, dtype=np.int64), probs)

    def drop_before(self, t: int) -> None:
        for k in [k for k in self._slices if k < t]:
            del self._slices[k]


def sample_kernel_row(spec: EnvironmentSpec, seed: int, r: int, x: Offset, env_id: int = 0) -> KernelRow:
    return QuenchedEnvironment(spec, seed, env_id).kernel_row(r, x)


# ---------------------------------------------------------------------------
# lattice utilities and diagnostics


def lattice_closure(steps: np.ndarray, radius: int, symmetric: bool = True) -> set[Offset]:
    """Points of the box reachable from 0 using the given steps (and their negatives)."""
    d = steps.shape[1]
    st = [tuple(int(c) for c in s) for s in steps]
    if symmetric:
        st = list({*st, *[tuple(-c for c in s) for s in st]})
    zero = tuple([0] * d)
    seen = {zero}
    stack = [zero]
    while stack:
        x = stack.pop()
        for s in st:
            y = _add(x, s)
            if max(abs(c) for c in y) <= radius and y not in seen:
                seen.add(y)
                stack.append(y)
    return seen


@dataclass
class AxiomReport:
    checks: dict[str, bool]
    details: dict[str, str]

    @property
    def ok(self) -> bool:
        return all(self.checks.values())


def validate_assumptions(spec: EnvironmentSpec, seed: int = 0) -> AxiomReport:
    checks: dict[str, bool] = {}
    details: dict[str, str] = {}
    try:
        mu = build_step_distribution(spec)
    except ModelError as e:
        return AxiomReport({"step_law": False}, {"step_law": str(e)})
    # mass conservation of sampled rows and of the pair tables
    env = QuenchedEnvironment(spec, seed)
    err = 0.0
    for r in (1, 2):
        for x in itertools.product(range(-2, 3), repeat=spec.d):
            row = env.kernel_row(r, x)
            err = max(err, abs(row.probs.sum() - 1), float(-min(row.probs.min(), 0)))
    checks["mass_conservation"] = err < 1e-12
    details["mass_conservation"] = f"max row error {err:.2e}"
    # finite range
    R = interaction_range(spec)
    shell = [y for y in _box(R + 2, spec.d) if max(abs(c) for c in y) > R]
    far_rho = max(float(np.abs(two_point_kernel(spec, y).rho).max()) for y in shell)
    checks["finite_range"] = far_rho < 1e-15
    details["finite_range"] = f"range {R}, max |rho| beyond range {far_rho:.1e}"
    # irreducibility of the difference chain on the walker lattice
    from .kpoint_motion import difference_kernel

    dk = difference_kernel(spec)
    box = 2 * (R + int(np.abs(mu.offsets).max())) + 2
    walker_lattice = lattice_closure(mu.offsets, box)
    reach = dk.reachable_from_zero(box)
    inner = R + 1
    wl_inner = {y for y in walker_lattice if max(abs(c) for c in y) <= inner}
    re_inner = {y for y in reach if max(abs(c) for c in y) <= inner}
    checks["irreducible"] = wl_inner == re_inner
    details["irreducible"] = f"walker lattice {len(wl_inner)} pts, reached {len(re_inner)} pts in inner box"
    # normalization
    A = mu.normalization
    checks["identity_covariance"] = bool(np.allclose(A @ mu.cov @ A.T, np.eye(spec.d), atol=1e-12))
    try:
        details["symmetry_order"] = str(symmetry_order(spec))
        checks["symmetry_order"] = True
    except ModelError as e:
        checks["symmetry_order"] = False
        details["symmetry_order"] = str(e)
    return AxiomReport(checks, details)


# ---------------------------------------------------------------------------
# convenience constructors


def nearest_neighbor(d: int = 1, weight_law: str = "uniform", alpha: float = 1.0, composite_steps: int = 2) -> EnvironmentSpec:
    return EnvironmentSpec("nearest_neighbor", d, WeightLaw(weight_law, alpha=alpha), composite_steps)


def simple_random_walk(d: int = 1, composite_steps: int = 1) -> EnvironmentSpec:
    """Deterministic kernel: independent simple random walkers."""
    return EnvironmentSpec("nearest_neighbor", d, WeightLaw("fixed"), composite_steps)


def symmetric_lazy(d: int = 1, lo: float = 0.0, hi: float = 1.0) -> EnvironmentSpec:
    return EnvironmentSpec("symmetric_lazy", d, WeightLaw("uniform", lo=lo, hi=hi), 1)


def random_landscape(d: int = 1, levels=(-0.5, 0.5), support=None) -> EnvironmentSpec:
    supp = None if support is None else tuple((tuple(o), float(b)) for o, b in support)
    return EnvironmentSpec("random_landscape", d, WeightLaw("log_levels", levels=tuple(levels)), 1, supp)
