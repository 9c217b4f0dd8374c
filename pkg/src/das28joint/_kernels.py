"""Compiled inner loops for the per-subject work of the sampler.

Visits are stored flat and sorted by subject; ``starts`` has length N + 1.
"""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def trajectory_ss(starts, t, y, a, b1, b2, k):
    n = len(starts) - 1
    out = np.zeros(n)
    for i in range(n):
        ai, b1i, b2i, ki = a[i], b1[i], b2[i], k[i]
        s = 0.0
        for j in range(starts[i], starts[i + 1]):
            tj = t[j]
            if tj < ki:
                r = y[j] - (ai + b1i * tj)
            else:
                r = y[j] - (ai + b1i * ki + b2i * (tj - ki))
            s += r * r
        out[i] = s
    return out


@njit(cache=True)
def design_sums(starts, t, y, kappa):
    """X'X (N,3,3) and X'y (N,3) for rows (1, min(t,k), max(t-k,0))."""
    n = len(starts) - 1
    xtx = np.zeros((n, 3, 3))
    xty = np.zeros((n, 3))
    for i in range(n):
        k = kappa[i]
        for j in range(starts[i], starts[i + 1]):
            tj = t[j]
            m1 = tj if tj < k else k
            m2 = tj - k if tj > k else 0.0
            yj = y[j]
            xtx[i, 0, 0] += 1.0
            xtx[i, 0, 1] += m1
            xtx[i, 0, 2] += m2
            xtx[i, 1, 1] += m1 * m1
            xtx[i, 1, 2] += m1 * m2
            xtx[i, 2, 2] += m2 * m2
            xty[i, 0] += yj
            xty[i, 1] += m1 * yj
            xty[i, 2] += m2 * yj
        xtx[i, 1, 0] = xtx[i, 0, 1]
        xtx[i, 2, 0] = xtx[i, 0, 2]
        xtx[i, 2, 1] = xtx[i, 1, 2]
    return xtx, xty


@njit(cache=True)
def _chol(p, L):
    d = p.shape[0]
    for j in range(d):
        s = p[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return False
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, d):
            s2 = p[i, j]
            for k in range(j):
                s2 -= L[i, k] * L[j, k]
            L[i, j] = s2 / L[j, j]
    return True


@njit(cache=True)
def precision_draw(prec, lin, z):
    """Rows of N(P^-1 b, P^-1) for stacked (B,d,d) P and (B,d) b, given N(0,I) z.

    Returns (draws, ok); ok is False if some P is not positive definite.
    """
    B, d = lin.shape
    out = np.empty((B, d))
    L = np.zeros((d, d))
    w = np.empty(d)
    for b in range(B):
        if not _chol(prec[b], L):
            return out, False
        for i in range(d):
            s = lin[b, i]
            for k in range(i):
                s -= L[i, k] * w[k]
            w[i] = s / L[i, i]
        for i in range(d - 1, -1, -1):
            s = w[i] + z[b, i]
            for k in range(i + 1, d):
                s -= L[k, i] * out[b, k]
            out[b, i] = s / L[i, i]
    return out, True


@njit(cache=True)
def precision_whiten(prec, z):
    """Rows of L^-T z where P = L L'; i.e. N(0, P^-1) draws from N(0,I) z."""
    B, d = z.shape
    out = np.empty((B, d))
    L = np.zeros((d, d))
    for b in range(B):
        if not _chol(prec[b], L):
            return out, False
        for i in range(d - 1, -1, -1):
            s = z[b, i]
            for k in range(i + 1, d):
                s -= L[k, i] * out[b, k]
            out[b, i] = s / L[i, i]
    return out, True


@njit(cache=True)
def precision_block(prec, lin, z):
    """Like precision_draw, plus b'P^-1 b and log|P| per row (for collapsed ratios)."""
    B, d = lin.shape
    out = np.empty((B, d))
    quad = np.empty(B)
    logdet = np.empty(B)
    L = np.zeros((d, d))
    w = np.empty(d)
    for b in range(B):
        if not _chol(prec[b], L):
            return out, quad, logdet, False
        q = 0.0
        ld = 0.0
        for i in range(d):
            s = lin[b, i]
            for k in range(i):
                s -= L[i, k] * w[k]
            w[i] = s / L[i, i]
            q += w[i] * w[i]
            ld += 2.0 * math.log(L[i, i])
        for i in range(d - 1, -1, -1):
            s = w[i] + z[b, i]
            for k in range(i + 1, d):
                s -= L[k, i] * out[b, k]
            out[b, i] = s / L[i, i]
        quad[b] = q
        logdet[b] = ld
    return out, quad, logdet, True
