"""Fused loops for the block conjugate-gradient iteration.

Blocks are C-contiguous (n_nodes, n_columns) arrays so that each sparse row
touches contiguous memory.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def spmm_dot(indptr, indices, data, P, AP, pap):
    """AP = A @ P and pap[j] = sum_i P[i, j] * AP[i, j]."""
    n, k = P.shape
    for j in range(k):
        pap[j] = 0.0
    for i in range(n):
        for j in range(k):
            AP[i, j] = 0.0
        for q in range(indptr[i], indptr[i + 1]):
            c = indices[q]
            v = data[q]
            for j in range(k):
                AP[i, j] += v * P[c, j]
        for j in range(k):
            pap[j] += P[i, j] * AP[i, j]


@njit(cache=True)
def step(X, R, P, AP, alpha, dinv, rr, zsum, rzr, rsum):
    """Advance X and R; gather the column sums needed for the next direction."""
    n, k = X.shape
    for j in range(k):
        rr[j] = 0.0
        zsum[j] = 0.0
        rzr[j] = 0.0
        rsum[j] = 0.0
    for i in range(n):
        d = dinv[i]
        for j in range(k):
            X[i, j] += alpha[j] * P[i, j]
            r = R[i, j] - alpha[j] * AP[i, j]
            R[i, j] = r
            rr[j] += r * r
            zsum[j] += d * r
            rzr[j] += d * r * r
            rsum[j] += r


@njit(cache=True)
def new_direction(P, R, dinv, zmean, beta):
    """P = (dinv * R - zmean) + beta * P."""
    n, k = P.shape
    for i in range(n):
        d = dinv[i]
        for j in range(k):
            P[i, j] = d * R[i, j] - zmean[j] + beta[j] * P[i, j]


def jacobi_block_pcg(A, B, dinv, thresh, maxiter):
    """Projected Jacobi-PCG on all columns of ``B`` at once.

    Returns ``(X, iterations)``. Column ``j`` stops once its recursive
    residual norm drops below ``thresh[j]``; the caller verifies the true
    residual.
    """
    A = A.tocsr()
    indptr, indices, data = A.indptr, A.indices, A.data
    n, k = B.shape
    Xout = np.zeros((n, k))
    cols = np.arange(k)
    X = np.zeros((n, k))
    R = np.ascontiguousarray(B, dtype=float)
    thresh = np.array(thresh, dtype=float)
    Z = dinv[:, None] * R
    zmean = Z.mean(axis=0)
    P = np.ascontiguousarray(Z - zmean)
    rz = (R * P).sum(axis=0)
    AP = np.empty_like(P)
    pap = np.empty(k)
    rr, zsum, rzr, rsum = (np.empty(k) for _ in range(4))
    it = 0
    while it < maxiter and len(cols):
        it += 1
        spmm_dot(indptr, indices, data, P, AP, pap)
        # Breakdown (no curvature left, or a vanishing preconditioned residual)
        # stops the column where it is; the caller judges the true residual.
        broken = ~(pap > 0) | ~(rz > 0)
        alpha = np.where(broken, 0.0, rz / np.where(broken, 1.0, pap))
        step(X, R, P, AP, alpha, dinv, rr, zsum, rzr, rsum)
        zmean = zsum / n
        rz_new = rzr - zmean * rsum
        done = (np.sqrt(rr) <= thresh) | broken | ~(rz_new > 0)
        if done.any():
            Xout[:, cols[done]] = X[:, done]
            keep = ~done
            cols = cols[keep]
            if not len(cols):
                break
            X, R, P = (np.ascontiguousarray(a[:, keep]) for a in (X, R, P))
            AP = np.empty_like(P)
            thresh, rz, rz_new, zmean = thresh[keep], rz[keep], rz_new[keep], zmean[keep]
            k = len(cols)
            pap = np.empty(k)
            rr, zsum, rzr, rsum = (np.empty(k) for _ in range(4))
        beta = rz_new / rz
        new_direction(P, R, dinv, zmean, beta)
        rz = rz_new
    if len(cols):
        Xout[:, cols] = X
    return Xout, it
