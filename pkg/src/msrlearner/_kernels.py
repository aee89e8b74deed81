"""Compiled coordinate-descent inner loops.

Both kernels minimise a penalised least-squares problem on standardized
columns and update ``beta`` in place. They return the number of sweeps used,
or -1 when ``max_sweeps`` was exhausted.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _soft(z, t):
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


@njit(cache=True)
def cd_gram(G, c, beta, l1, l2, tol, max_sweeps):
    """Minimise 1/2 b'Gb - c'b + l1*|b|_1 + l2/2*|b|^2 by covariance updates."""
    p = beta.shape[0]
    Gb = np.zeros(p)
    for j in range(p):
        if beta[j] != 0.0:
            for k in range(p):
                Gb[k] += G[k, j] * beta[j]
    for sweep in range(1, max_sweeps + 1):
        dmax = 0.0
        for j in range(p):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            rj = c[j] - Gb[j] + gjj * beta[j]
            new = _soft(rj, l1) / (gjj + l2)
            d = new - beta[j]
            if d != 0.0:
                for k in range(p):
                    Gb[k] += G[k, j] * d
                beta[j] = new
                if abs(d) > dmax:
                    dmax = abs(d)
        if dmax < tol:
            return sweep
    return -1


@njit(cache=True)
def cd_weighted(Z, w, z, b0, beta, l1, l2, tol, max_sweeps):
    """Weighted problem (1/2n) sum w (z - b0 - Zb)^2 + penalty; intercept free.

    Returns ``(b0, sweeps)``.
    """
    n, p = Z.shape
    r = z - b0
    for j in range(p):
        if beta[j] != 0.0:
            for i in range(n):
                r[i] -= Z[i, j] * beta[j]
    wsum = 0.0
    for i in range(n):
        wsum += w[i]
    xwx = np.zeros(p)
    for j in range(p):
        s = 0.0
        for i in range(n):
            s += w[i] * Z[i, j] * Z[i, j]
        xwx[j] = s / n
    for sweep in range(1, max_sweeps + 1):
        dmax = 0.0
        s = 0.0
        for i in range(n):
            s += w[i] * r[i]
        d0 = s / wsum
        if d0 != 0.0:
            b0 += d0
            for i in range(n):
                r[i] -= d0
            if abs(d0) > dmax:
                dmax = abs(d0)
        for j in range(p):
            if xwx[j] <= 0.0:
                continue
            s = 0.0
            for i in range(n):
                s += w[i] * Z[i, j] * r[i]
            num = s / n + xwx[j] * beta[j]
            new = _soft(num, l1) / (xwx[j] + l2)
            d = new - beta[j]
            if d != 0.0:
                for i in range(n):
                    r[i] -= d * Z[i, j]
                beta[j] = new
                if abs(d) > dmax:
                    dmax = abs(d)
        if dmax < tol:
            return b0, sweep
    return b0, -1


@njit(cache=True)
def _log1pexp(x):
    if x > 0.0:
        return x + np.log1p(np.exp(-x))
    return np.log1p(np.exp(x))


@njit(cache=True)
def _expit(x):
    if x >= 0.0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def logistic_objective(Z, y, b0, beta, l1, l2):
    n, p = Z.shape
    s = 0.0
    for i in range(n):
        eta = b0
        for j in range(p):
            eta += Z[i, j] * beta[j]
        s += _log1pexp(eta) - y[i] * eta
    pen = 0.0
    for j in range(p):
        pen += l1 * abs(beta[j]) + 0.5 * l2 * beta[j] * beta[j]
    return s / n + pen


@njit(cache=True)
def irls_logistic(Z, y, b0, beta, l1, l2, tol, max_iter, max_sweeps):
    """Penalized IRLS with step halving; ``beta`` is updated in place.

    Returns ``(b0, iterations)``; iterations is -1 when IRLS ran out of
    iterations and -2 when an inner solve failed.
    """
    n, p = Z.shape
    obj = logistic_objective(Z, y, b0, beta, l1, l2)
    eta = np.empty(n)
    w = np.empty(n)
    z = np.empty(n)
    old = np.empty(p)
    for it in range(1, max_iter + 1):
        for i in range(n):
            e = b0
            for j in range(p):
                e += Z[i, j] * beta[j]
            pr = _expit(e)
            wi = pr * (1.0 - pr)
            if wi < 1e-5:
                wi = 1e-5
            eta[i] = e
            w[i] = wi
            z[i] = e + (y[i] - pr) / wi
        for j in range(p):
            old[j] = beta[j]
        b0_old = b0
        b0, sweeps = cd_weighted(Z, w, z, b0, beta, l1, l2, tol, max_sweeps)
        if sweeps < 0:
            return b0, -2
        new_obj = logistic_objective(Z, y, b0, beta, l1, l2)
        b0_full = b0
        full = beta.copy()
        step = 1.0
        while new_obj > obj + 1e-12 * max(1.0, abs(obj)) and step > 1e-6:
            step *= 0.5
            b0 = b0_old + step * (b0_full - b0_old)
            for j in range(p):
                beta[j] = old[j] + step * (full[j] - old[j])
            new_obj = logistic_objective(Z, y, b0, beta, l1, l2)
        change = abs(b0 - b0_old)
        for j in range(p):
            d = abs(beta[j] - old[j])
            if d > change:
                change = d
        obj = new_obj
        if change < tol:
            return b0, it
    return b0, -1
