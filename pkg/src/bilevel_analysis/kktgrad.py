"""Exact gradient of the supervised training loss through the denoiser.

Once the sign pattern ``c = sign(W x*)`` is known, the denoised image is
the solution of an equality-constrained quadratic program whose KKT system
is linear::

    [ I       W^T S0^T ] [ x  ]   [ y - beta W^T S±^T 1 ]
    [ S0 W    0        ] [ nu ] = [ 0                   ]

``S0`` gathers the zero coefficients and ``S±^T 1`` is simply ``c`` itself,
so no selection matrix is ever formed: the multiplier ``nu`` lives in a
coefficient-shaped array that is zero outside the zero set of ``c``.

With ``z = (x*, nu)`` and ``q = A^{-1} (e, 0)`` where ``e = x* - x_true``,
differentiating the system gives, for the filter parameters ``theta``::

    dQ = -(S0^T q_nu)^T dW x* - (S0^T nu)^T dW q_x - beta c^T dW q_x

and each term is a :func:`~bilevel_analysis.imgops.filter_gradient` call.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from ._linalg import cgls
from .denoise import AdmmState, DenoiseConfig, admm_denoise
from .imgops import FilterBank, apply_adjoint, apply_analysis, filter_gradient

logger = logging.getLogger(__name__)

KKT_TOL = 1e-10
KKT_MAX_ITERS = 4000
# a solve that ends above this residual is treated as failed (rank deficient
# or too ill-conditioned to trust); between KKT_TOL and this it is usable
RANK_TOL = 1e-6
SIGN_THRESHOLD = 1e-8
SPLIT_TOL = 1e-4
CONSISTENCY_TOL = 1e-4


@dataclass
class SignPattern:
    """Elementwise sign of the analysis coefficients at the solution."""

    c: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c).astype(np.int8)

    @property
    def zero_mask(self):
        return self.c == 0

    def _count(self, cond):
        return np.sum(cond, axis=(-3, -2, -1)) if self.c.ndim >= 3 else int(np.sum(cond))

    @property
    def k(self):
        return int(np.prod(self.c.shape[-3:])) if self.c.ndim >= 3 else self.c.size

    @property
    def k_zero(self):
        return self._count(self.c == 0)

    @property
    def k_neg(self):
        return self._count(self.c < 0)

    @property
    def k_pos(self):
        return self._count(self.c > 0)


@dataclass
class KktVector:
    """Block vector ``(x, nu)``.

    ``nu`` is stored coefficient-shaped and must vanish off the zero set;
    :meth:`nu_values` returns the compact length-``k_zero`` block.
    """

    x: np.ndarray
    nu: np.ndarray

    def nu_values(self, c: SignPattern) -> np.ndarray:
        return self.nu[c.zero_mask]

    def dot(self, other: "KktVector") -> float:
        return float(np.vdot(self.x, other.x) + np.vdot(self.nu, other.nu))


def _pattern(c) -> SignPattern:
    return c if isinstance(c, SignPattern) else SignPattern(c)


def extract_sign_pattern(state: AdmmState, fb: FilterBank | None = None,
                         threshold: float | None = None) -> SignPattern:
    """Sign pattern from the exact zeros of the ADMM split variable.

    With ``threshold`` (and ``fb``) the pattern is instead read from
    ``W x`` with entries of magnitude at most ``threshold`` treated as zero.
    """
    if threshold is None:
        return SignPattern(np.sign(state.z))
    if fb is None:
        raise ValueError("thresholded sign extraction needs the filter bank")
    Wx = apply_analysis(fb, state.x)
    return SignPattern(np.where(np.abs(Wx) <= threshold, 0, np.sign(Wx)))


def kkt_apply(fb: FilterBank, c, v: KktVector) -> KktVector:
    """Multiply by the (symmetric) KKT matrix."""
    mask = _pattern(c).zero_mask
    N = v.x.shape[-1]
    return KktVector(
        x=v.x + apply_adjoint(fb, np.where(mask, v.nu, 0.0), N),
        nu=np.where(mask, apply_analysis(fb, v.x), 0.0),
    )


def kkt_rhs(fb: FilterBank, c, y, beta: float) -> KktVector:
    c = _pattern(c)
    y = np.asarray(y, dtype=np.float64)
    x = y - beta * apply_adjoint(fb, c.c.astype(np.float64), y.shape[-1])
    return KktVector(x=x, nu=np.zeros(c.c.shape))


def _pack(v: KktVector, B):
    return np.concatenate([v.x.reshape(B, -1), v.nu.reshape(B, -1)], axis=1)


def _unpack(flat, xshape, nushape):
    n = int(np.prod(xshape[1:]))
    return KktVector(flat[:, :n].reshape(xshape), flat[:, n:].reshape(nushape))


def _batched(arr, nd):
    arr = np.asarray(arr, dtype=np.float64)
    return (arr[None], True) if arr.ndim == nd else (arr, False)


def kkt_residual(fb: FilterBank, c, z: KktVector, b: KktVector) -> np.ndarray:
    """Relative residual ``||A z - b|| / ||b||`` per system."""
    Az = kkt_apply(fb, c, z)
    dx, dn = Az.x - b.x, Az.nu - b.nu
    num = np.sqrt(np.sum(dx * dx, axis=(-2, -1)) + np.sum(dn * dn, axis=(-3, -2, -1)))
    den = np.sqrt(np.sum(b.x * b.x, axis=(-2, -1)) + np.sum(b.nu * b.nu, axis=(-3, -2, -1)))
    return num / np.where(den > 0, den, 1.0)


def solve_kkt(fb: FilterBank, c, y, beta: float, tol: float = KKT_TOL,
              max_iters: int = KKT_MAX_ITERS, rhs: KktVector | None = None,
              x0: KktVector | None = None, method: str = "range", rank_tol: float = RANK_TOL):
    """Solve the KKT system ``A z = b`` matrix-free.

    ``method="normal"`` runs CG on ``A^T A z = A^T b`` (CGLS form, two
    :func:`kkt_apply` calls per iteration). ``method="range"`` uses that the
    second block of ``b`` is zero: with ``B = W^T S0^T`` the system is
    ``x = r - B nu`` where ``nu`` solves ``min ||B nu - r||``, a least-squares
    problem whose conditioning is that of ``S0 W`` rather than its square.
    Both stop once ``||A z - b|| <= tol ||b||``.

    ``rhs`` replaces the default right-hand side :func:`kkt_rhs`. Works on a
    single image or a batch; ``c`` must have the matching batch shape.

    Returns
    -------
    z : KktVector
    info : dict
        Per-system ``iters``, ``rel_residual`` (of ``A z = b``),
        ``converged`` (residual within ``tol``) and ``rank_flag`` (residual
        still above ``rank_tol`` after ``max_iters``).
    """
    c = _pattern(c)
    b = kkt_rhs(fb, c, y, beta) if rhs is None else rhs
    bx, single = _batched(b.x, 2)
    bnu = b.nu[None] if single else b.nu
    cc = c.c[None] if single else c.c
    if cc.shape != bnu.shape:
        raise ValueError(f"sign pattern of shape {c.c.shape} does not match the system")
    if method == "range" and np.any(bnu):
        method = "normal"
    B = bx.shape[0]
    xshape, nushape = bx.shape, bnu.shape
    N = xshape[-1]
    masks = cc == 0

    if method == "normal":
        def apply_A(flat, rows):
            v = _unpack(flat, (len(rows),) + xshape[1:], (len(rows),) + nushape[1:])
            return _pack(kkt_apply(fb, SignPattern(cc[rows]), v), len(rows))

        start = None
        if x0 is not None:
            start = _pack(KktVector(np.reshape(x0.x, xshape),
                                    np.where(masks, np.reshape(x0.nu, nushape), 0.0)), B)
        flat, info = cgls(apply_A, apply_A, _pack(KktVector(bx, bnu), B), x0=start,
                          tol=tol, maxiter=max_iters)
        z = _unpack(flat, xshape, nushape)
    elif method == "range":
        def apply_B(nu, rows):
            return apply_adjoint(fb, np.where(masks[rows], nu, 0.0), N)

        def apply_Bt(img, rows):
            return np.where(masks[rows], apply_analysis(fb, img), 0.0)

        start = None if x0 is None else np.where(masks, np.reshape(x0.nu, nushape), 0.0)
        nu, info = cgls(apply_B, apply_Bt, bx, x0=start, tol=tol, maxiter=max_iters,
                        stop_on="normal")
        z = KktVector(bx - apply_B(nu, np.arange(B)), nu)
    else:
        raise ValueError(f"unknown method {method!r}")

    info["rel_residual"] = kkt_residual(fb, SignPattern(cc), z, KktVector(bx, bnu))
    info["converged"] = info["rel_residual"] <= tol
    info["rank_flag"] = info["rel_residual"] > max(rank_tol, tol)
    if single:
        z = KktVector(z.x[0], z.nu[0])
    return z, info


def optimality_gap(fb: FilterBank, c, z: KktVector, beta: float):
    """How far a KKT solution is from minimizing the denoising cost.

    The x-block of the KKT solution for pattern ``c`` is the minimizer
    exactly when ``|nu| <= beta`` on the zero set and ``W x`` has the sign
    of ``c`` wherever ``c`` is nonzero. Returns per image the largest
    ``|nu| / beta - 1`` on the zero set and the largest ``-c W x / max|W x|``
    off it; both are <= 0 for a certified minimizer.
    """
    c = _pattern(c)
    cc, single = _batched(c.c, 3)
    nu = np.reshape(z.nu, cc.shape)
    Wx = apply_analysis(fb, np.reshape(z.x, cc.shape[:1] + z.x.shape[-2:]))
    mask = cc == 0
    axes = (-3, -2, -1)
    dual = np.max(np.where(mask, np.abs(nu) / beta - 1.0, -1.0), axis=axes)
    scale = np.maximum(np.max(np.abs(Wx), axis=axes), 1e-300)
    sign = np.max(np.where(mask, -np.inf, -cc * Wx), axis=axes) / scale
    sign = np.where(np.all(mask, axis=axes), -1.0, sign)
    return dual, sign


@dataclass
class GradResult:
    """Loss, gradient and solver diagnostics for one batch of training pairs.

    ``loss`` sums ``0.5 ||x* - x_true||^2`` over every pair; ``grad`` sums the
    per-pair gradients of pairs that were not rank flagged.
    """

    loss: float
    grad: np.ndarray
    diagnostics: list = field(default_factory=list)
    state: AdmmState | None = None
    x_star: np.ndarray | None = None
    pattern: SignPattern | None = None

    @property
    def n_used(self) -> int:
        return sum(not d["rank_flag"] for d in self.diagnostics)

    @property
    def flagged(self) -> bool:
        return any(d["rank_flag"] or d["accuracy_flag"] for d in self.diagnostics)

    def json_lines(self) -> str:
        return "".join(json.dumps(d) + "\n" for d in self.diagnostics)


def loss_and_gradient(fb: FilterBank, x_true, y, beta: float, warm: AdmmState | None = None,
                      denoise_cfg: DenoiseConfig | None = None, kkt_tol: float = KKT_TOL,
                      kkt_max_iters: int = KKT_MAX_ITERS, sign_threshold: float | None = None,
                      split_tol: float = SPLIT_TOL, consistency_tol: float = CONSISTENCY_TOL,
                      kkt_method: str = "range") -> GradResult:
    """Training loss and its exact gradient with respect to the filters.

    ``x_true`` and ``y`` are one image pair ``(N, N)`` or a stack of pairs
    ``(B, N, N)``. Steps: ADMM solve, sign pattern from the split variable,
    KKT solve for ``(x*, nu)``, adjoint KKT solve for ``q``, and assembly of
    the gradient from three filter-space vector-Jacobian products.

    A pair gets ``accuracy_flag`` when the ADMM split residual exceeds
    ``split_tol``, ADMM stopped short of its tolerance, or the KKT residual
    of ``(x_admm, nu)`` exceeds ``consistency_tol`` (the sign pattern read
    from ADMM does not reproduce its own solution).
    """
    if not beta > 0:
        raise ValueError("beta must be > 0")
    X, single = _batched(x_true, 2)
    Y, _ = _batched(y, 2)
    if X.shape != Y.shape:
        raise ValueError("x_true and y must have the same shape")

    state = admm_denoise(fb, Y, denoise_cfg, beta=beta, warm=warm)
    pattern = extract_sign_pattern(state, fb, sign_threshold)
    mask = pattern.zero_mask

    z, info_z = solve_kkt(fb, pattern, Y, beta, tol=kkt_tol, max_iters=kkt_max_iters,
                          method=kkt_method)
    e = z.x - X
    q, info_q = solve_kkt(fb, pattern, Y, beta, tol=kkt_tol, max_iters=kkt_max_iters,
                          rhs=KktVector(e, np.zeros(mask.shape)), method=kkt_method)

    rank_flag = info_z["rank_flag"] | info_q["rank_flag"]
    keep = (~rank_flag).astype(np.float64)[:, None, None, None]
    signs = pattern.c.astype(np.float64)
    grad = -(filter_gradient(keep * np.where(mask, q.nu, 0.0), z.x)
             + filter_gradient(keep * np.where(mask, z.nu, 0.0), q.x)
             + beta * filter_gradient(keep * signs, q.x))

    split_res = np.max(np.abs(apply_analysis(fb, state.x) - state.z), axis=(-3, -2, -1))
    mismatch = (np.linalg.norm((z.x - state.x).reshape(len(X), -1), axis=1)
                / np.maximum(np.linalg.norm(state.x.reshape(len(X), -1), axis=1), 1e-300))
    consistency = kkt_residual(fb, pattern, KktVector(state.x, z.nu),
                               kkt_rhs(fb, pattern, Y, beta))
    dual_excess, sign_violation = optimality_gap(fb, pattern, z, beta)
    diagnostics = []
    for t in range(len(X)):
        accuracy = bool(split_res[t] > split_tol or not state.converged[t]
                        or consistency[t] > consistency_tol)
        d = {
            "k_zero": int(pattern.k_zero[t]),
            "k": pattern.k,
            "admm_iters": int(state.iters_run[t]),
            "admm_residual": float(split_res[t]),
            "kkt_admm_mismatch": float(mismatch[t]),
            "kkt_consistency": float(consistency[t]),
            "dual_excess": float(dual_excess[t]),
            "sign_violation": float(sign_violation[t]),
            "cg_iters": [int(info_z["iters"][t]), int(info_q["iters"][t])],
            "kkt_residual": [float(info_z["rel_residual"][t]), float(info_q["rel_residual"][t])],
            "rank_flag": bool(rank_flag[t]),
            "accuracy_flag": accuracy,
        }
        if d["rank_flag"]:
            logger.warning("KKT solve stagnated (pair %d, k_zero=%d); gradient skipped",
                           t, d["k_zero"])
        diagnostics.append(d)

    loss = 0.5 * float(np.sum(e * e))
    if single:
        state, z_x, pattern = state[0], z.x[0], SignPattern(pattern.c[0])
    else:
        z_x = z.x
    return GradResult(loss=loss, grad=grad, diagnostics=diagnostics, state=state,
                      x_star=z_x, pattern=pattern)
