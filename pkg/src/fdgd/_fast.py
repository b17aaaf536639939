"""Compiled inner loop for the quadratic-cost closed-loop simulation.

The multi-million-step certificate checks make a plain numpy step loop too
slow, so the quadratic tracking case gets a compiled kernel.  Summation
order is fixed by explicit loops (no fastmath), keeping runs bit-stable.
Falls back to a numpy implementation when numba is unavailable.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


# status codes returned by the chunk kernels
RAN_FULL = 0
CONVERGED = 1
DIVERGED = 2


@njit(cache=True)
def _quad_chunk_jit(
    x, U, A, B, C, D, has_D, Gt, yref, W, alpha, owner, eqc, eta, K, XS, US, YS, limit, du_tol
):
    n = x.shape[0]
    N = U.shape[0]
    m = U.shape[1]
    p = C.shape[0]
    su = np.empty(m)
    y = np.empty(p)
    gy = np.empty(m)
    xn = np.empty(n)
    Un = np.empty((N, m))
    status = RAN_FULL
    done = 0
    for t in range(K):
        for l in range(m):
            su[l] = U[owner[l], l]
        for i in range(p):
            s = 0.0
            for j in range(n):
                s += C[i, j] * x[j]
            if has_D:
                for j in range(m):
                    s += D[i, j] * su[j]
            y[i] = s
        for j in range(n):
            XS[t, j] = x[j]
        for i in range(N):
            for l in range(m):
                US[t, i, l] = U[i, l]
        for i in range(p):
            YS[t, i] = y[i]
        for l in range(m):
            s = 0.0
            for i in range(p):
                s += Gt[l, i] * (y[i] - yref[i])
            gy[l] = s
        du2 = 0.0
        for i in range(N):
            for l in range(m):
                s = 0.0
                for j in range(N):
                    s += W[i, j] * U[j, l]
                v = s - eta * (alpha[i] * U[i, l] + gy[l])
                d = v - U[i, l]
                du2 += d * d
                Un[i, l] = v
        for i in range(n):
            s = eqc[i]
            for j in range(n):
                s += A[i, j] * x[j]
            for j in range(m):
                s += B[i, j] * su[j]
            xn[i] = s
        for j in range(n):
            x[j] = xn[j]
        for i in range(N):
            for l in range(m):
                U[i, l] = Un[i, l]
        done = t + 1
        ok = True
        for j in range(n):
            v = x[j]
            if not (-limit <= v <= limit):
                ok = False
        for i in range(N):
            for l in range(m):
                v = U[i, l]
                if not (-limit <= v <= limit):
                    ok = False
        if not ok:
            status = DIVERGED
            break
        if du_tol > 0.0 and du2 < du_tol * du_tol:
            status = CONVERGED
            break
    return status, done


def quad_chunk(x, U, A, B, C, D, has_D, Gt, yref, W, alpha, owner, eqc, eta, K, XS, US, YS, limit, du_tol):
    """Run up to K quadratic-cost closed-loop steps, recording visited states.

    ``x`` (n,) and ``U`` (N, m) are advanced in place; rows 0..done-1 of the
    record buffers hold the states visited before each update.  Returns
    (status, done).
    """
    if HAVE_NUMBA:
        return _quad_chunk_jit(
            x, U, A, B, C, D, has_D, Gt, yref, W, alpha, owner, eqc, eta, K, XS, US, YS, limit, du_tol
        )
    return _quad_chunk_numpy(
        x, U, A, B, C, D, has_D, Gt, yref, W, alpha, owner, eqc, eta, K, XS, US, YS, limit, du_tol
    )


def _quad_chunk_numpy(
    x, U, A, B, C, D, has_D, Gt, yref, W, alpha, owner, eqc, eta, K, XS, US, YS, limit, du_tol
):
    m = U.shape[1]
    idx = np.arange(m)
    for t in range(K):
        su = U[owner, idx]
        y = C @ x
        if has_D:
            y = y + D @ su
        XS[t] = x
        US[t] = U
        YS[t] = y
        gy = Gt @ (y - yref)
        U_new = W @ U - eta * (alpha[:, None] * U + gy[None, :])
        x_new = A @ x + B @ su + eqc
        du2 = float(((U_new - U) ** 2).sum())
        x[:] = x_new
        U[:] = U_new
        if not (np.all(np.abs(x) <= limit) and np.all(np.abs(U) <= limit)):
            return DIVERGED, t + 1
        if du_tol > 0.0 and du2 < du_tol * du_tol:
            return CONVERGED, t + 1
    return RAN_FULL, K
