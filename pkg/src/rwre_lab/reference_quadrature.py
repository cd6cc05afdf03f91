"""Deterministic evaluation of the limiting formulas: heat kernels and Duhamel integrals."""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import eval_hermitenorm, roots_hermitenorm


class QuadratureError(RuntimeError):
    """Raised when a quadrature cannot reach its tolerance."""


# ---------------------------------------------------------------------------
# building blocks


@dataclass(frozen=True)
class HeatKernelSpec:
    """G(t, x) = N(x; 0, t H): the heat kernel of (1/2) div(H grad)."""

    d: int
    H: tuple | None = None

    @property
    def matrix(self) -> np.ndarray:
        return np.eye(self.d) if self.H is None else np.asarray(self.H, float).reshape(self.d, self.d)

    def __call__(self, t: float, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        return gaussian_density(x, np.zeros(self.d), t * self.matrix)

    def total_mass(self, t: float, radius: float = 12.0) -> float:
        """Integral of G(t, .) over R^d by a tensor Gauss-Hermite rule."""
        nodes, wts = roots_hermitenorm(40)
        S = t * self.matrix
        L = np.linalg.cholesky(S)
        tot = 0.0
        for idx in itertools.product(range(len(nodes)), repeat=self.d):
            z = nodes[list(idx)]
            w = float(np.prod(wts[list(idx)]))
            x = L @ z
            # importance weight G / N(z; 0, I) in the x = Lz change of variables
            tot += w / math.sqrt(2 * math.pi) ** self.d * float(self(t, x[None, :])[0]) \
                * float(np.linalg.det(L)) * (2 * math.pi) ** (self.d / 2) * math.exp(0.5 * z @ z)
        return tot


def gaussian_density(x: np.ndarray, mean, cov) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, float))
    cov = np.atleast_2d(np.asarray(cov, float))
    d = cov.shape[0]
    diff = x - np.asarray(mean, float)
    sol = np.linalg.solve(cov, diff.T).T
    q = np.sum(diff * sol, axis=1)
    return np.exp(-0.5 * q) / math.sqrt((2 * math.pi) ** d * float(np.linalg.det(cov)))


@dataclass(frozen=True)
class TestFunction:
    """Catalog test function on R^d: 'constant' (phi = 1) or 'gaussian' bump exp(-|x-c|^2 / (2 w^2))."""

    __test__ = False

    kind: str = "gaussian"
    center: tuple = (0.0,)
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "gaussian"):
            raise ValueError(f"unknown test function {self.kind!r}")
        if self.width <= 0:
            raise ValueError("width must be positive")

    @property
    def d(self) -> int:
        return len(self.center)

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        if self.kind == "constant":
            return np.ones(len(x))
        q = np.sum((x - np.asarray(self.center)) ** 2, axis=1)
        return np.exp(-0.5 * q / self.width**2)

    def derivative(self, r, x) -> np.ndarray:
        """Partial derivative of multi-index r, in closed form via Hermite polynomials."""
        x = np.atleast_2d(np.asarray(x, float))
        if self.kind == "constant":
            return np.ones(len(x)) if not any(r) else np.zeros(len(x))
        out = self(x)
        w = self.width
        for i, k in enumerate(r):
            if k:
                z = (x[:, i] - self.center[i]) / w
                out = out * (-1.0 / w) ** k * eval_hermitenorm(k, z)
        return out

    @staticmethod
    def constant(d: int) -> "TestFunction":
        return TestFunction("constant", tuple([0.0] * d), 1.0)

    @staticmethod
    def gaussian(center, width: float = 1.0) -> "TestFunction":
        return TestFunction("gaussian", tuple(float(c) for c in np.atleast_1d(center)), float(width))

    def as_dict(self) -> dict:
        return {"kind": self.kind, "center": list(self.center), "width": self.width}


@dataclass(frozen=True)
class InitialData:
    """Macroscopic initial profile: 'dirac' at a point or normalized 'gaussian' of width w."""

    kind: str = "dirac"
    center: tuple = (0.0,)
    width: float = 0.0

    @property
    def d(self) -> int:
        return len(self.center)

    @staticmethod
    def dirac(center) -> "InitialData":
        return InitialData("dirac", tuple(float(c) for c in np.atleast_1d(center)), 0.0)

    @staticmethod
    def gaussian(center, width: float) -> "InitialData":
        return InitialData("gaussian", tuple(float(c) for c in np.atleast_1d(center)), float(width))

    def smoothed_cov(self, s: float, H: np.ndarray) -> np.ndarray:
        """Covariance of G_s * h0 (a Gaussian density)."""
        return s * H + (self.width**2) * np.eye(len(H))


@dataclass
class LimitIntegral:
    value: float
    abserr: float
    tag: str
    meta: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"value": self.value, "abserr": self.abserr, "tag": self.tag, **self.meta}


def _quad(fun, a, b, tol, tag, points=None):
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(fun, a, b, epsabs=tol, epsrel=tol, limit=400, points=points)
        except integrate.IntegrationWarning as exc:
            val, err = integrate.quad(fun, a, b, epsabs=tol, epsrel=tol, limit=400, points=points)
            if err > 10 * max(tol, tol * abs(val)):
                raise QuadratureError(f"{tag}: tolerance not reached (value {val}, error {err}): {exc}")
    return float(val), float(err)


def _H(d: int, H) -> np.ndarray:
    return np.eye(d) if H is None else np.asarray(H, float).reshape(d, d)


# ---------------------------------------------------------------------------
# QVF limit integrals


def _phi_pairing(phi: TestFunction, cov: np.ndarray, shift: np.ndarray) -> float:
    """int N(y; 0, cov) phi(shift + y / 2) dy in closed form."""
    d = len(shift)
    if phi.kind == "constant":
        return 1.0
    w2 = phi.width**2
    # phi(shift + y/2) = exp(-|y - 2(c - shift)|^2 / (8 w^2))
    b = 2.0 * (np.asarray(phi.center) - shift)
    S = cov + 4.0 * w2 * np.eye(d)
    return float((2 * math.pi * 4.0 * w2) ** (d / 2) * gaussian_density(b[None, :], np.zeros(d), S)[0])


def qvf_limit_integral(t: float, phi: TestFunction, a1, a2, d: int, H=None, tol: float = 1e-10) -> LimitIntegral:
    """int_0^t int G(2s, a1-a2) G(2s, y) phi((y + a1 + a2)/2) dy ds, substituting s = u^2."""
    a1 = np.atleast_1d(np.asarray(a1, float))
    a2 = np.atleast_1d(np.asarray(a2, float))
    if t <= 0:
        return LimitIntegral(0.0, 0.0, "qvf")
    if d >= 2 and np.allclose(a1, a2):
        raise QuadratureError("coincident starts give a divergent integral for d >= 2")
    Hm = _H(d, H)
    mid = 0.5 * (a1 + a2)
    sep = a1 - a2

    def integrand(u):
        s = u * u
        if s == 0.0:
            return 0.0
        g = gaussian_density(sep[None, :], np.zeros(d), 2 * s * Hm)[0]
        return 2 * u * g * _phi_pairing(phi, 2 * s * Hm, mid)

    val, err = _quad(integrand, 0.0, math.sqrt(t), tol, "qvf_limit_integral")
    return LimitIntegral(val, err, "qvf", {"t": t, "d": d})


def qvf_limit_mc(t: float, phi: TestFunction, a1, a2, d: int, n: int, seed: int = 0, H=None) -> tuple[float, float]:
    """Plain Monte Carlo quadrature of the same integral (independent check)."""
    rng = np.random.default_rng(seed)
    a1 = np.atleast_1d(np.asarray(a1, float))
    a2 = np.atleast_1d(np.asarray(a2, float))
    Hm = _H(d, H)
    L = np.linalg.cholesky(Hm)
    u = rng.uniform(0, math.sqrt(t), n)
    s = u * u
    z = rng.standard_normal((n, d))
    y = np.sqrt(2 * s)[:, None] * (z @ L.T)
    sep = a1 - a2
    q = np.einsum("i,ij,j->", sep, np.linalg.inv(Hm), sep)
    g = np.exp(-q / (4 * s)) / np.sqrt((4 * math.pi * s) ** d * np.linalg.det(Hm))
    vals = math.sqrt(t) * 2 * u * g * phi(0.5 * (y + a1 + a2))
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))


def general_ic_limit(t: float, phi: TestFunction, h0: InitialData, d: int, H=None, tol: float = 1e-10) -> LimitIntegral:
    """int_0^t int (G_s * h0)(a)^2 phi(a) da ds for Gaussian or Dirac initial data."""
    if h0.kind == "dirac" and d >= 2:
        raise QuadratureError("initial profile not a good sequence: Dirac data in d >= 2")
    if t <= 0:
        return LimitIntegral(0.0, 0.0, "general_ic")
    Hm = _H(d, H)
    c0 = np.asarray(h0.center, float)

    def inner(s):
        S = h0.smoothed_cov(s, Hm)
        k = (2 * math.pi) ** (-d / 2) * float(np.linalg.det(S)) ** -0.5 * 2 ** (-d / 2)
        # (G_s * h0)^2 = k N(.; c0, S/2)
        if phi.kind == "constant":
            return k
        w2 = phi.width**2
        return k * (2 * math.pi * w2) ** (d / 2) * float(
            gaussian_density((np.asarray(phi.center) - c0)[None, :], np.zeros(d), S / 2 + w2 * np.eye(d))[0])

    def integrand(u):
        s = u * u
        if s == 0.0 and h0.kind == "dirac":
            return 0.0
        return 2 * u * inner(s)

    val, err = _quad(integrand, 0.0, math.sqrt(t), tol, "general_ic_limit")
    return LimitIntegral(val, err, "general_ic", {"t": t, "d": d})


# ---------------------------------------------------------------------------
# coefficients


def regime_coefficient(regime: str, gamma_sq: float | None = None, theta_eff: float | None = None,
                       pi_f: float | None = None, d: int | None = None) -> float:
    """Multiplier of the noise strength in each regime (the c_d constant is applied separately)."""
    regime = regime.upper()
    if regime in ("A", "B"):
        return 1.0
    if regime == "C":
        if d is not None and d != 2:
            raise ValueError("regime C is the d = 2 critical regime")
        if gamma_sq is None:
            raise ValueError("regime C needs gamma_sq")
        if gamma_sq >= 2.0:
            raise ValueError("at or beyond critical coefficient: gamma^2 >= 2")
        return 1.0 / (1.0 - gamma_sq / 2.0)
    if regime == "D":
        if theta_eff is None or pi_f is None:
            raise ValueError("regime D needs theta_eff and pi_f")
        return float(theta_eff) / float(pi_f)
    raise ValueError(f"unknown regime {regime!r}")


# ---------------------------------------------------------------------------
# field variance


def _smoothed_phi(phi: TestFunction, tau: float, Hm: np.ndarray):
    """(G_tau * phi) as (amplitude, mean, covariance) of a Gaussian density, or None for constants."""
    d = len(Hm)
    if phi.kind == "constant":
        return None
    w2 = phi.width**2
    return (2 * math.pi * w2) ** (d / 2), np.asarray(phi.center, float), tau * Hm + w2 * np.eye(d)


def _gauss_sq_weight(S: np.ndarray) -> float:
    d = len(S)
    return (2 * math.pi) ** (-d / 2) * float(np.linalg.det(S)) ** -0.5 * 2 ** (-d / 2)


def extremal_variance_closed_form(t: float, phi: TestFunction, h0: InitialData, d: int, H=None,
                                  tol: float = 1e-10) -> LimitIntegral:
    """int_0^t int (G_{t-s} * phi)^2 (G_s * h0)^2 dx ds with Gaussian algebra for the x-integral."""
    if h0.kind == "dirac" and d >= 2:
        raise QuadratureError("initial profile not a good sequence: Dirac data in d >= 2")
    if phi.kind == "constant":
        raise QuadratureError("extremal variance needs a localized test function")
    Hm = _H(d, H)
    c0 = np.asarray(h0.center, float)

    def inner(s):
        amp, c1, S1 = _smoothed_phi(phi, t - s, Hm)
        S0 = h0.smoothed_cov(s, Hm)
        k1 = amp**2 * _gauss_sq_weight(S1)
        k0 = _gauss_sq_weight(S0)
        return k1 * k0 * float(gaussian_density((c1 - c0)[None, :], np.zeros(d), (S1 + S0) / 2)[0])

    def integrand(u):
        s = u * u
        if s == 0.0 and h0.kind == "dirac":
            return 0.0
        return 2 * u * inner(s)

    val, err = _quad(integrand, 0.0, math.sqrt(t), tol, "extremal_variance")
    return LimitIntegral(val, err, "field_variance_extremal", {"t": t, "d": d, "method": "closed_form"})


def extremal_variance_quadrature(t: float, phi: TestFunction, h0: InitialData, H=None,
                                 tol: float = 1e-9, hermite: int = 80) -> LimitIntegral:
    """d = 1 cross-check: nested adaptive quadrature, smoothing phi by Gauss-Hermite sums."""
    if phi.kind == "constant":
        raise QuadratureError("extremal variance needs a localized test function")
    Hm = _H(1, H)
    h = float(Hm[0, 0])
    nodes, wts = roots_hermitenorm(hermite)
    wts = wts / math.sqrt(2 * math.pi)
    c0 = float(h0.center[0])

    def smooth_phi(tau, x):
        return float(wts @ phi(np.array([[x + math.sqrt(tau * h) * z] for z in nodes])))

    def density(s, x):
        var = s * h + h0.width**2
        return math.exp(-0.5 * (x - c0) ** 2 / var) / math.sqrt(2 * math.pi * var)

    def x_integral(s):
        var = s * h + h0.width**2
        sd = math.sqrt(var / 2)
        lo, hi = c0 - 12 * sd - 10 * phi.width, c0 + 12 * sd + 10 * phi.width
        val, _ = integrate.quad(lambda x: smooth_phi(t - s, x) ** 2 * density(s, x) ** 2, lo, hi,
                                epsabs=tol, epsrel=tol, limit=200, points=[c0, phi.center[0]])
        return val

    def integrand(u):
        s = u * u
        if s == 0.0 and h0.kind == "dirac":
            return 0.0
        return 2 * u * x_integral(s)

    val, err = _quad(integrand, 0.0, math.sqrt(t), tol, "extremal_variance_quadrature")
    return LimitIntegral(val, err, "field_variance_extremal", {"t": t, "d": 1, "method": "quadrature"})


def _multi_indices(d: int, p: int):
    out = set()
    for c in itertools.combinations_with_replacement(range(d), p):
        r = [0] * d
        for i in c:
            r[i] += 1
        out.add(tuple(r))
    return sorted(out)


def _fact(r) -> float:
    return float(np.prod([math.factorial(i) for i in r]))


def _smoothed_derivative(phi: TestFunction, tau: float, r, x: np.ndarray) -> np.ndarray:
    """partial^r (G_tau * phi) at x for isotropic H = I (Gaussian phi stays Gaussian)."""
    w2 = phi.width**2 + tau
    scale = (phi.width**2 / w2) ** (len(r) / 2)
    widened = TestFunction("gaussian", phi.center, math.sqrt(w2))
    return scale * widened.derivative(r, x)


def _bulk_grid(h0: InitialData, s: float, n: int):
    """Tensor Gauss-Hermite nodes and weights for integrals against (G_s * h0)^2."""
    d = h0.d
    nodes, wts = roots_hermitenorm(n)
    wts = wts / math.sqrt(2 * math.pi)
    var = s + h0.width**2
    sd = math.sqrt(var / 2)
    pts, ws = [], []
    for idx in itertools.product(range(n), repeat=d):
        pts.append(np.asarray(h0.center) + sd * nodes[list(idx)])
        ws.append(float(np.prod(wts[list(idx)])))
    k0 = _gauss_sq_weight(var * np.eye(d))
    return np.array(pts), np.array(ws) * k0


def bulk_variance(t: float, phi: TestFunction, h0: InitialData, A_p: dict, form: str = "A_p",
                  hermite: int = 24, tol: float = 1e-8) -> LimitIntegral:
    """Bulk Duhamel variance: int_0^t int sum A[(r1,r2)] d^r1 F d^r2 F / (r1! r2!) (G_s*h0)^2 dx ds, F = G_{t-s}*phi.

    form "A_p" evaluates the display directly; form "divergence" (p = 1 only) integrates by parts
    onto -F (Gamma : Hess F) - F (Gamma grad F) . grad log w with w = (G_s*h0)^2.
    """
    if phi.kind == "constant":
        return LimitIntegral(0.0, 0.0, "field_variance_bulk", {"form": form})
    d = h0.d
    if h0.kind == "dirac" and d >= 2:
        raise QuadratureError("initial profile not a good sequence: Dirac data in d >= 2")
    p = sum(next(iter(A_p))[0])
    if form == "divergence" and p != 1:
        raise ValueError("divergence form is defined for p = 1")

    def inner(s):
        x, w = _bulk_grid(h0, s, hermite)
        tau = t - s
        if form == "A_p":
            tot = np.zeros(len(x))
            for (r1, r2), a in A_p.items():
                tot += a / (_fact(r1) * _fact(r2)) * _smoothed_derivative(phi, tau, r1, x) \
                    * _smoothed_derivative(phi, tau, r2, x)
            return float(w @ tot)
        G = np.zeros((d, d))
        for (r1, r2), a in A_p.items():
            G[r1.index(1), r2.index(1)] = a
        F = _smoothed_derivative(phi, tau, (0,) * d, x)
        grad = np.stack([_smoothed_derivative(phi, tau, tuple(int(k == i) for k in range(d)), x)
                         for i in range(d)], axis=1)
        hess_term = np.zeros(len(x))
        for i in range(d):
            for j in range(d):
                r = [0] * d
                r[i] += 1
                r[j] += 1
                hess_term += G[i, j] * _smoothed_derivative(phi, tau, tuple(r), x)
        var = s + h0.width**2
        glogw = -2.0 * (x - np.asarray(h0.center)) / var
        tot = -F * hess_term - F * np.einsum("ni,ij,nj->n", grad, G, glogw)
        return float(w @ tot)

    def integrand(u):
        s = u * u
        if s == 0.0 and h0.kind == "dirac":
            return 0.0
        return 2 * u * inner(s)

    val, err = _quad(integrand, 0.0, math.sqrt(t), tol, "bulk_variance")
    return LimitIntegral(val, err, "field_variance_bulk", {"t": t, "d": d, "form": form})


def limiting_field_variance(regime: str, t: float, phi: TestFunction, h0: InitialData, coefficients: dict,
                            d: int, H=None, c_const: float = 1.0) -> LimitIntegral:
    """Variance of the limiting field paired with phi.

    coefficients: extremal regimes need 'gamma_sq' (and 'theta_eff', 'pi_f' for D);
    regime A needs 'A_p' (table over multi-index pairs).  c_const multiplies the result.
    """
    regime = regime.upper()
    if regime == "A":
        base = bulk_variance(t, phi, h0, coefficients["A_p"])
        return LimitIntegral(c_const * base.value, c_const * base.abserr, base.tag, base.meta)
    g2 = float(coefficients.get("gamma_sq", 0.0))
    if g2 == 0.0:
        return LimitIntegral(0.0, 0.0, "field_variance_extremal", {"regime": regime})
    coef = regime_coefficient(regime, g2, coefficients.get("theta_eff"), coefficients.get("pi_f"), d)
    base = extremal_variance_closed_form(t, phi, h0, d, H)
    factor = c_const * g2 * coef
    return LimitIntegral(factor * base.value, factor * base.abserr, base.tag,
                         {**base.meta, "regime": regime, "factor": factor})
