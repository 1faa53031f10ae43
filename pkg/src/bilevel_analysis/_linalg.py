"""Batched matrix-free Krylov solvers.

Arrays carry one leading batch axis; every batch element is an independent
system with its own step sizes. Converged elements are frozen so the result
for one element never depends on what else shares the batch. Operators are
called as ``apply_A(v, rows)`` where ``rows`` indexes the batch elements
present in ``v``.
"""

import numpy as np


def _dot(a, b):
    return np.einsum("bi,bi->b", a.reshape(a.shape[0], -1), b.reshape(b.shape[0], -1))


def _scale(coef, arr):
    return coef.reshape((-1,) + (1,) * (arr.ndim - 1)) * arr


def cg(apply_A, b, x0=None, tol=1e-10, maxiter=40):
    """Conjugate gradients for symmetric positive definite ``A``.

    Stops an element once ``||b - A x|| <= tol * ||b||``.

    Returns
    -------
    x : ndarray
    info : dict
        ``iters`` and ``rel_residual`` per batch element, ``converged`` mask.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    all_rows = np.arange(b.shape[0])
    bnorm = np.sqrt(_dot(b, b))
    r = b - apply_A(x, all_rows)
    rr = _dot(r, r)
    thresh = (tol * np.where(bnorm > 0, bnorm, 1.0)) ** 2
    iters = np.zeros(b.shape[0], dtype=int)
    active = rr > thresh
    p = r.copy()
    for _ in range(maxiter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        Ap = apply_A(p[idx], idx)
        alpha = rr[idx] / _dot(p[idx], Ap)
        x[idx] += _scale(alpha, p[idx])
        r[idx] -= _scale(alpha, Ap)
        rr_new = _dot(r[idx], r[idx])
        p[idx] = r[idx] + _scale(rr_new / rr[idx], p[idx])
        rr[idx] = rr_new
        iters[idx] += 1
        active[idx] = rr_new > thresh[idx]
    rel = np.sqrt(rr) / np.where(bnorm > 0, bnorm, 1.0)
    return x, {"iters": iters, "rel_residual": rel, "converged": ~active}


def cgls(apply_A, apply_At, b, x0=None, tol=1e-10, maxiter=2000, stall_tol=1e-13,
         stop_on="residual"):
    """CG on the normal equations ``A^T A x = A^T b`` (CGLS form).

    The true residual ``r = b - A x`` is carried along. With
    ``stop_on="residual"`` convergence means ``||r|| <= tol * ||b||``; when
    the normal-equation residual ``||A^T r||`` collapses while ``||r||``
    stays above tolerance the system is inconsistent and the element is
    marked ``stalled``. With ``stop_on="normal"`` (least-squares problems)
    convergence means ``||A^T r|| <= tol * ||b||``.
    """
    b = np.asarray(b, dtype=np.float64)
    all_rows = np.arange(b.shape[0])
    bnorm = np.sqrt(_dot(b, b))
    bsafe = np.where(bnorm > 0, bnorm, 1.0)
    if x0 is None:
        r = b.copy()
        s = apply_At(r, all_rows)
        x = np.zeros_like(s)
    else:
        x = np.array(x0, dtype=np.float64)
        r = b - apply_A(x, all_rows)
        s = apply_At(r, all_rows)
    p = s.copy()
    gamma = _dot(s, s)
    gamma0 = gamma.copy()
    rnorm = np.sqrt(_dot(r, r))
    iters = np.zeros(b.shape[0], dtype=int)
    stalled = np.zeros(b.shape[0], dtype=bool)
    normal = stop_on == "normal"

    def measure(rn, g):
        return np.sqrt(g) if normal else rn

    active = measure(rnorm, gamma) > tol * bsafe
    for _ in range(maxiter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        q = apply_A(p[idx], idx)
        qq = _dot(q, q)
        alpha = gamma[idx] / np.where(qq > 0, qq, 1.0)
        x[idx] += _scale(alpha, p[idx])
        r[idx] -= _scale(alpha, q)
        s_new = apply_At(r[idx], idx)
        g_new = _dot(s_new, s_new)
        p[idx] = s_new + _scale(g_new / np.where(gamma[idx] > 0, gamma[idx], 1.0), p[idx])
        gamma[idx] = g_new
        iters[idx] += 1
        rnorm[idx] = np.sqrt(_dot(r[idx], r[idx]))
        done = measure(rnorm[idx], g_new) <= tol * bsafe[idx]
        if normal:
            stall = np.zeros_like(done)
        else:
            stall = ~done & (g_new <= stall_tol**2 * np.where(gamma0[idx] > 0, gamma0[idx], 1.0))
        stalled[idx] = stall
        active[idx] = ~(done | stall)
    rel = measure(rnorm, gamma) / bsafe
    return x, {
        "iters": iters,
        "rel_residual": rel,
        "converged": rel <= tol,
        "stalled": stalled,
    }
