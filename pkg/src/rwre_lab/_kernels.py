"""Compiled Monte Carlo kernels.

Random numbers come from a splitmix64 counter generator seeded per replica, so
results are bit-reproducible and independent of scheduling.  Discrete laws are
sampled with alias tables: one 64-bit draw gives the column (high word) and the
acceptance coin (low word).
"""

from __future__ import annotations

import numpy as np
from numba import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
LOW32 = np.uint64(0xFFFFFFFF)
INV53 = 1.0 / 9007199254740992.0


def build_alias(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vose alias table; thresholds stored as 32-bit integers in uint64."""
    p = np.asarray(p, float)
    n = len(p)
    q = p * n / p.sum()
    alias = np.arange(n, dtype=np.int64)
    thr = np.ones(n)
    small = [i for i in range(n) if q[i] < 1.0]
    large = [i for i in range(n) if q[i] >= 1.0]
    while small and large:
        s = small.pop()
        g = large.pop()
        thr[s] = q[s]
        alias[s] = g
        q[g] = q[g] + q[s] - 1.0
        (small if q[g] < 1.0 else large).append(g)
    for i in small + large:
        thr[i] = 1.0
    t32 = np.minimum(np.round(thr * 4294967296.0), 4294967296.0).astype(np.uint64)
    return t32, alias


def build_alias_rows(P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    P = np.atleast_2d(P)
    th = np.empty(P.shape, np.uint64)
    al = np.empty(P.shape, np.int64)
    for i in range(P.shape[0]):
        th[i], al[i] = build_alias(P[i])
    return th, al


@njit(inline="always")
def _next(state):
    state = state + GOLDEN
    z = state
    z = (z ^ (z >> np.uint64(30))) * MIX1
    z = (z ^ (z >> np.uint64(27))) * MIX2
    return state, z ^ (z >> np.uint64(31))


@njit(inline="always")
def _alias(z, thr, alias, n):
    col = np.int64(((z >> np.uint64(32)) * np.uint64(n)) >> np.uint64(32))
    if (z & LOW32) < thr[col]:
        return col
    return alias[col]


@njit(inline="always")
def _grid_index(D, radius, width):
    """Flat index of D inside the box [-radius, radius]^d, or -1."""
    idx = 0
    for i in range(D.shape[0]):
        c = D[i] + radius
        if c < 0 or c >= width:
            return -1
        idx = idx * width + c
    return idx


@njit(cache=True)
def uniforms(seed, n):
    out = np.empty(n)
    s = np.uint64(seed)
    for i in range(n):
        s, z = _next(s)
        out[i] = (z >> np.uint64(11)) * INV53
    return out


@njit(cache=True)
def alias_draws(seed, thr, alias, n):
    out = np.empty(n, np.int64)
    s = np.uint64(seed)
    m = thr.shape[0]
    for i in range(n):
        s, z = _next(s)
        out[i] = _alias(z, thr, alias, m)
    return out


# ---------------------------------------------------------------------------
# difference chain


@njit(cache=True)
def diff_counts(seeds, y0, checkpoints, steps, far_thr, far_al, near_r, near_grid, near_thr, near_al, f_r, f_grid):
    """Cumulative sums of f(D_r), r = 1..checkpoint, for the difference chain."""
    R = seeds.shape[0]
    C = checkpoints.shape[0]
    d = y0.shape[0]
    q = steps.shape[0]
    nw = 2 * near_r + 1
    fw = 2 * f_r + 1
    out = np.zeros((R, C))
    D = np.empty(d, np.int64)
    T = checkpoints[C - 1]
    for k in range(R):
        s = np.uint64(seeds[k])
        for i in range(d):
            D[i] = y0[i]
        acc = 0.0
        c = 0
        for r in range(1, T + 1):
            s, z = _next(s)
            g = _grid_index(D, near_r, nw)
            row = -1
            if g >= 0:
                row = near_grid[g]
            if row >= 0:
                j = _alias(z, near_thr[row], near_al[row], q)
            else:
                j = _alias(z, far_thr, far_al, q)
            for i in range(d):
                D[i] += steps[j, i]
            gf = _grid_index(D, f_r, fw)
            if gf >= 0:
                acc += f_grid[gf]
            while c < C and checkpoints[c] == r:
                out[k, c] = acc
                c += 1
    return out


@njit(cache=True)
def diff_positions(seeds, y0, checkpoints, steps, far_thr, far_al, near_r, near_grid, near_thr, near_al):
    """Difference-chain states at the checkpoint times."""
    R = seeds.shape[0]
    C = checkpoints.shape[0]
    d = y0.shape[0]
    q = steps.shape[0]
    nw = 2 * near_r + 1
    out = np.zeros((R, C, d), np.int64)
    D = np.empty(d, np.int64)
    T = checkpoints[C - 1]
    for k in range(R):
        s = np.uint64(seeds[k])
        for i in range(d):
            D[i] = y0[i]
        c = 0
        while c < C and checkpoints[c] == 0:
            out[k, c] = D
            c += 1
        for r in range(1, T + 1):
            s, z = _next(s)
            g = _grid_index(D, near_r, nw)
            row = -1
            if g >= 0:
                row = near_grid[g]
            if row >= 0:
                j = _alias(z, near_thr[row], near_al[row], q)
            else:
                j = _alias(z, far_thr, far_al, q)
            for i in range(d):
                D[i] += steps[j, i]
            while c < C and checkpoints[c] == r:
                for i in range(d):
                    out[k, c, i] = D[i]
                c += 1
    return out


@njit(cache=True)
def diff_exp_functional(seeds, y0, horizon, steps, far_thr, far_al, near_r, near_grid, near_thr, near_al,
                        near_u, f_r, f_grid, nmax):
    """Per replica: exp(sum_{s>=1} u(X_s)) and sum_s f(X_s) * T_nmax(sum_{1<=r<s} u(X_r)).

    T_n is the exponential series truncated at order n.  Also returns the last
    time the chain visited the interaction window.
    """
    R = seeds.shape[0]
    d = y0.shape[0]
    q = steps.shape[0]
    nw = 2 * near_r + 1
    fw = 2 * f_r + 1
    res = np.zeros(R)
    ser = np.zeros(R)
    last = np.zeros(R, np.int64)
    D = np.empty(d, np.int64)
    for k in range(R):
        s = np.uint64(seeds[k])
        for i in range(d):
            D[i] = y0[i]
        U = 0.0
        S = 0.0
        lv = 0
        for r in range(1, horizon + 1):
            s, z = _next(s)
            g = _grid_index(D, near_r, nw)
            row = -1
            if g >= 0:
                row = near_grid[g]
            if row >= 0:
                j = _alias(z, near_thr[row], near_al[row], q)
            else:
                j = _alias(z, far_thr, far_al, q)
            for i in range(d):
                D[i] += steps[j, i]
            gf = _grid_index(D, f_r, fw)
            if gf >= 0:
                fv = f_grid[gf]
                if fv != 0.0:
                    term = 1.0
                    tot = 1.0
                    for n in range(1, nmax + 1):
                        term *= U / n
                        tot += term
                    S += fv * tot
            g = _grid_index(D, near_r, nw)
            if g >= 0:
                row = near_grid[g]
                if row >= 0:
                    U += near_u[row]
                    lv = r
        res[k] = np.exp(U)
        ser[k] = S
        last[k] = lv
    return res, ser, last


# ---------------------------------------------------------------------------
# pair chain


@njit(cache=True)
def pair_functional(seeds, x1, x2, offs, far_thr, far_al, near_r, near_grid, near_thr, near_al, near_u,
                    f_r, f_grid, scales, horizons, subtract, phi_kind, phi_center, phi_width, drift, A,
                    mode, tilt, log_m):
    """Additive functionals sum_{r=1}^{H_k} W_r f(D_r) (phi(A(R1_r - r drift)/sqrt(N_k)) - sub_k).

    mode 0: W = 1; mode 1: W = exp(sum_{r'<r} u(D_r')) (tilted importance);
    mode 2: W = exp(tilt.(R1_r - x1 + R2_r - x2) - 2 r log_m) (explicit tilting).
    phi_kind 0: Gaussian bump; 1: constant 1.
    """
    R = seeds.shape[0]
    K = scales.shape[0]
    d = x1.shape[0]
    m = offs.shape[0]
    nw = 2 * near_r + 1
    fw = 2 * f_r + 1
    T = 0
    for k in range(K):
        if horizons[k] > T:
            T = horizons[k]
    out = np.zeros((R, K))
    R1 = np.empty(d, np.int64)
    R2 = np.empty(d, np.int64)
    D = np.empty(d, np.int64)
    xm = np.empty(d)
    inv_w2 = 1.0 / (phi_width * phi_width)
    for rep in range(R):
        s = np.uint64(seeds[rep])
        for i in range(d):
            R1[i] = x1[i]
            R2[i] = x2[i]
        logw = 0.0
        for r in range(1, T + 1):
            # one pair step, written out: a helper call costs array refcounting per step
            for i in range(d):
                D[i] = R1[i] - R2[i]
            g = _grid_index(D, near_r, nw)
            row = -1
            if g >= 0:
                row = near_grid[g]
            if row >= 0:
                s, z = _next(s)
                j = _alias(z, near_thr[row], near_al[row], m * m)
                a = j // m
                b = j - a * m
            else:
                s, z = _next(s)
                a = _alias(z, far_thr, far_al, m)
                s, z = _next(s)
                b = _alias(z, far_thr, far_al, m)
            for i in range(d):
                R1[i] += offs[a, i]
                R2[i] += offs[b, i]
            if mode == 1 and row >= 0:
                logw += near_u[row]
            for i in range(d):
                D[i] = R1[i] - R2[i]
            gf = _grid_index(D, f_r, fw)
            if gf < 0:
                continue
            fv = f_grid[gf]
            if fv == 0.0:
                continue
            if mode == 2:
                e = -2.0 * r * log_m
                for i in range(d):
                    e += tilt[i] * (R1[i] - x1[i] + R2[i] - x2[i])
                w = np.exp(e)
            elif mode == 1:
                w = np.exp(logw)
            else:
                w = 1.0
            for k in range(K):
                if r > horizons[k]:
                    continue
                if phi_kind == 1:
                    ph = 1.0
                else:
                    sc = 1.0 / np.sqrt(scales[k])
                    q2 = 0.0
                    for i in range(d):
                        v = 0.0
                        for j in range(d):
                            v += A[i, j] * (R1[j] - r * drift[j])
                        v = v * sc - phi_center[i]
                        q2 += v * v
                    ph = np.exp(-0.5 * q2 * inv_w2)
                out[rep, k] += w * fv * (ph - subtract[k])
    return out


@njit(cache=True)
def pair_positions(seeds, x1, x2, checkpoints, offs, far_thr, far_al, near_r, near_grid, near_thr, near_al, near_u):
    """Positions of both walkers and the accumulated u-weight at checkpoints."""
    R = seeds.shape[0]
    C = checkpoints.shape[0]
    d = x1.shape[0]
    m = offs.shape[0]
    nw = 2 * near_r + 1
    pos = np.zeros((R, C, 2, d), np.int64)
    logw = np.zeros((R, C))
    R1 = np.empty(d, np.int64)
    R2 = np.empty(d, np.int64)
    D = np.empty(d, np.int64)
    T = checkpoints[C - 1]
    for rep in range(R):
        s = np.uint64(seeds[rep])
        for i in range(d):
            R1[i] = x1[i]
            R2[i] = x2[i]
        lw = 0.0
        c = 0
        while c < C and checkpoints[c] == 0:
            for i in range(d):
                pos[rep, c, 0, i] = R1[i]
                pos[rep, c, 1, i] = R2[i]
            c += 1
        for r in range(1, T + 1):
            # one pair step, written out: a helper call costs array refcounting per step
            for i in range(d):
                D[i] = R1[i] - R2[i]
            g = _grid_index(D, near_r, nw)
            row = -1
            if g >= 0:
                row = near_grid[g]
            if row >= 0:
                s, z = _next(s)
                j = _alias(z, near_thr[row], near_al[row], m * m)
                a = j // m
                b = j - a * m
            else:
                s, z = _next(s)
                a = _alias(z, far_thr, far_al, m)
                s, z = _next(s)
                b = _alias(z, far_thr, far_al, m)
            for i in range(d):
                R1[i] += offs[a, i]
                R2[i] += offs[b, i]
            if row >= 0:
                lw += near_u[row]
            while c < C and checkpoints[c] == r:
                for i in range(d):
                    pos[rep, c, 0, i] = R1[i]
                    pos[rep, c, 1, i] = R2[i]
                logw[rep, c] = lw
                c += 1
    return pos, logw
