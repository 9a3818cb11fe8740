"""Compiled per-column active-set QP kernel.

Each column solves::

    min 1/2 x^T G x + q^T x   s.t.  -1 <= (x[c+1] - x[c]) / h1 <= 1

with ``G`` symmetric tridiagonal SPD. Constraint ``c`` is stored as a state
per cell: 0 inactive, 1 lower bound active (``D1 x = -1``), 2 upper bound
active (``D1 x = +1``). As a row of ``A x >= d`` with ``d = -1`` the lower
bound reads ``a = +D1[c]`` and the upper bound ``a = -D1[c]``.
"""
from __future__ import annotations

import numpy as np
from numba import njit

OK = 0
MAX_ITER = 1
NOT_SPD = 2
SINGULAR_SCHUR = 3


@njit(cache=True, nogil=True)
def _factor(diag, off, piv, low):
    n = diag.size
    piv[0] = diag[0]
    if not piv[0] > 0.0:
        return False
    for i in range(n - 1):
        low[i] = off[i] / piv[i]
        piv[i + 1] = diag[i + 1] - low[i] * off[i]
        if not piv[i + 1] > 0.0:
            return False
    return True


@njit(cache=True, nogil=True)
def _solve(piv, low, rhs, out):
    n = rhs.size
    out[0] = rhs[0]
    for i in range(1, n):
        out[i] = rhs[i] - low[i - 1] * out[i - 1]
    for i in range(n):
        out[i] /= piv[i]
    for i in range(n - 2, -1, -1):
        out[i] -= low[i] * out[i + 1]


@njit(cache=True, nogil=True)
def _cholesky_solve(S, rhs, k):
    """Dense Cholesky solve of the leading ``k x k`` block in place; False if not SPD."""
    for j in range(k):
        s = S[j, j]
        for p in range(j):
            s -= S[j, p] * S[j, p]
        if not s > 0.0:
            return False
        S[j, j] = np.sqrt(s)
        for i in range(j + 1, k):
            t = S[i, j]
            for p in range(j):
                t -= S[i, p] * S[j, p]
            S[i, j] = t / S[j, j]
    for i in range(k):
        t = rhs[i]
        for p in range(i):
            t -= S[i, p] * rhs[p]
        rhs[i] = t / S[i, i]
    for i in range(k - 1, -1, -1):
        t = rhs[i]
        for p in range(i + 1, k):
            t -= S[p, i] * rhs[p]
        rhs[i] = t / S[i, i]
    return True


@njit(cache=True, nogil=True)
def qp_column(diag, off, q, x, h1, state, lam, max_iter, tol):
    """Solve one column in place; returns ``(status, iterations)``.

    ``x`` must be feasible on entry and is overwritten by the solution,
    ``state`` holds the initial and final working set, ``lam`` receives the
    multiplier of the active constraint of every cell (0 if inactive).
    """
    n = x.size
    m = n - 1
    piv = np.empty(n)
    low = np.empty(max(n - 1, 1))
    if not _factor(diag, off, piv, low):
        return NOT_SPD, 0
    g = np.empty(n)
    w = np.empty(n)
    p = np.empty(n)
    e = np.zeros(n)
    act = np.empty(m, dtype=np.int64)
    Y = np.empty((m, n))
    S = np.empty((m, m))
    rhs = np.empty(m)
    for c in range(m):
        lam[c] = 0.0
    for it in range(max_iter):
        # g = -(q + G x)
        for i in range(n):
            gi = q[i] + diag[i] * x[i]
            if i > 0:
                gi += off[i - 1] * x[i - 1]
            if i < n - 1:
                gi += off[i] * x[i + 1]
            g[i] = -gi
        _solve(piv, low, g, w)
        k = 0
        for c in range(m):
            if state[c] != 0:
                act[k] = c
                k += 1
        for j in range(k):
            c = act[j]
            s = 1.0 if state[c] == 1 else -1.0
            e[c] = -s / h1
            e[c + 1] = s / h1
            _solve(piv, low, e, Y[j])
            e[c] = 0.0
            e[c + 1] = 0.0
        for i in range(k):
            ci = act[i]
            si = 1.0 if state[ci] == 1 else -1.0
            for j in range(k):
                S[i, j] = si * (Y[j, ci + 1] - Y[j, ci]) / h1
            ax = si * (x[ci + 1] - x[ci]) / h1
            aw = si * (w[ci + 1] - w[ci]) / h1
            # rhs = A_I G^-1 g - h with h = d_I - A_I x = -1 - A_I x
            rhs[i] = aw + 1.0 + ax
        if k > 0 and not _cholesky_solve(S, rhs, k):
            return SINGULAR_SCHUR, it
        # lambda = -S^-1 rhs ; p = w + Y^T lambda
        pmax = 0.0
        xmax = 0.0
        for i in range(n):
            v = w[i]
            for j in range(k):
                v -= rhs[j] * Y[j, i]
            p[i] = v
            pmax = max(pmax, abs(v))
            xmax = max(xmax, abs(x[i]))
        if pmax <= tol * (1.0 + xmax):
            worst = 0.0
            drop = -1
            lmax = 0.0
            for j in range(k):
                lmax = max(lmax, abs(rhs[j]))
            for j in range(k):
                lj = -rhs[j]
                if lj < worst:
                    worst = lj
                    drop = act[j]
            if drop < 0 or worst >= -tol * (1.0 + lmax):
                for j in range(k):
                    lam[act[j]] = -rhs[j]
                return OK, it
            state[drop] = 0
            continue
        # ratio test over inactive constraints
        step = 1.0
        for c in range(m):
            if state[c] != 0:
                continue
            dp = (p[c + 1] - p[c]) / h1
            dx = (x[c + 1] - x[c]) / h1
            if dp < 0.0:
                t = (dx + 1.0) / -dp
                if t < step:
                    step = t
            elif dp > 0.0:
                t = (1.0 - dx) / dp
                if t < step:
                    step = t
        if step < 0.0:
            step = 0.0
        for i in range(n):
            x[i] += step * p[i]
        if step < 1.0:
            for c in range(m):
                if state[c] != 0:
                    continue
                dx = (x[c + 1] - x[c]) / h1
                dp = (p[c + 1] - p[c]) / h1
                if dp < 0.0 and dx <= -1.0 + tol:
                    state[c] = 1
                elif dp > 0.0 and dx >= 1.0 - tol:
                    state[c] = 2
    return MAX_ITER, max_iter


@njit(cache=True, nogil=True)
def qp_columns(diag, off, q, x, h1, state, lam, iters, status, start, stop, max_iter, tol):
    """Loop :func:`qp_column` over rows ``start:stop`` of column-major batches."""
    for j in range(start, stop):
        st, it = qp_column(diag[j], off[j], q[j], x[j], h1, state[j], lam[j], max_iter, tol)
        status[j] = st
        iters[j] = it
