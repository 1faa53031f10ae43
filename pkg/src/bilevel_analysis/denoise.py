"""l1-analysis denoising by ADMM.

Solves ``min_x 0.5 ||x - y||^2 + beta ||W x||_1`` with the split ``z = W x``
and scaled dual ``u``::

    x <- (I + rho W^T W)^{-1} (y + rho W^T (z - u))     (inner CG)
    z <- soft(W x + u, beta / rho)
    u <- u + W x - z

``z`` is the output of soft thresholding, so it holds exact zeros; the
gradient code reads the sign pattern from it.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from ._linalg import cg
from .imgops import (
    FilterBank,
    apply_adjoint,
    apply_analysis,
    load_filterbank,
    make_dct_filterbank,
    make_tv_filterbank,
    sparse_matrix,
)

logger = logging.getLogger(__name__)


def soft_threshold(v, thresh):
    """Proximal operator of ``thresh * ||.||_1``."""
    return np.sign(v) * np.maximum(np.abs(v) - thresh, 0.0)


SCALE_FLOOR = 1e-3


@dataclass
class AdmmState:
    """Primal, split and scaled dual iterates, reusable as a warm start.

    Arrays carry the same leading batch axes as the ``y`` passed to
    :func:`admm_denoise`. ``iters_run``, ``converged`` and the residuals are
    per image; ``cost_history`` holds the summed cost per outer iteration.
    """

    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    rho: float
    iters_run: np.ndarray = None
    cost_history: list = field(default_factory=list)
    converged: np.ndarray = None
    primal_residual: np.ndarray = None
    dual_residual: np.ndarray = None
    cg_failures: int = 0

    @property
    def cg_flag(self) -> bool:
        return self.cg_failures > 0

    def __getitem__(self, idx) -> "AdmmState":
        """Per-image slice of a batched state."""
        def pick(a):
            return None if a is None else np.asarray(a)[idx]

        return AdmmState(
            x=self.x[idx].copy(),
            z=self.z[idx].copy(),
            u=self.u[idx].copy(),
            rho=self.rho,
            iters_run=pick(self.iters_run),
            converged=pick(self.converged),
            primal_residual=pick(self.primal_residual),
            dual_residual=pick(self.dual_residual),
            cg_failures=self.cg_failures,
        )

    @classmethod
    def stack(cls, states) -> "AdmmState":
        states = list(states)
        return cls(
            x=np.stack([s.x for s in states]),
            z=np.stack([s.z for s in states]),
            u=np.stack([s.u for s in states]),
            rho=states[0].rho,
        )


@dataclass
class DenoiseConfig:
    """Solver settings for :func:`admm_denoise`.

    ``tol`` is the relative primal/dual residual at which an image stops
    iterating. ``cost_tol`` stops an image once its cost changed by at most
    ``cost_tol`` (relative) over the last ``cost_window`` iterations, and
    ``pattern_window`` once the sign pattern of the split variable has not
    changed for that many iterations. An image stops when every enabled test
    holds; with all three off every outer iteration runs. ``x_solver`` selects how the
    x-update system is solved: ``"direct"`` reuses a sparse LU factor of
    ``I + rho W^T W``, ``"cg"`` runs at most ``inner_cg_iters`` CG steps to
    relative residual ``cg_tol``. ``relax`` is the over-relaxation factor
    (1 is plain ADMM).
    """

    beta: float = 0.1
    rho: float = 1.0
    outer_iters: int = 400
    inner_cg_iters: int = 40
    cg_tol: float = 1e-10
    tol: float = 0.0
    cost_tol: float = 0.0
    cost_window: int = 10
    pattern_window: int = 0
    x_solver: str = "direct"
    relax: float = 1.0
    warm: AdmmState | None = None

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not self.rho > 0:
            raise ValueError(f"rho must be > 0, got {self.rho}")
        if self.tol < 0 or self.cost_tol < 0 or self.cost_window < 1 or self.pattern_window < 0:
            raise ValueError("tolerances must be >= 0, cost_window >= 1, pattern_window >= 0")
        if self.outer_iters < 1 or self.inner_cg_iters < 0:
            raise ValueError("iteration counts must be positive")
        if self.x_solver not in ("direct", "cg"):
            raise ValueError(f"x_solver must be 'direct' or 'cg', got {self.x_solver!r}")
        if not 0 < self.relax < 2:
            raise ValueError("relax must lie in (0, 2)")


def denoise_cost(fb, x, y, beta):
    """Objective ``0.5 ||x - y||^2 + beta ||W x||_1`` per image."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    Wx = apply_analysis(fb, x)
    axes = tuple(range(-2, 0))
    return 0.5 * np.sum((x - y) ** 2, axis=axes) + beta * np.sum(
        np.abs(Wx), axis=(-3, -2, -1)
    )


_FACTOR_CACHE: OrderedDict = OrderedDict()
_FACTOR_CACHE_SIZE = 8


def _x_update_factor(fb: FilterBank, N: int, rho: float):
    """Sparse LU of ``I + rho W^T W``, memoized on (filters, N, rho)."""
    key = (fb.filters.tobytes(), fb.filters.shape, N, float(rho))
    lu = _FACTOR_CACHE.get(key)
    if lu is None:
        W = sparse_matrix(fb, N)
        lu = splu((sp.identity(N * N, format="csc") + rho * (W.T @ W)).tocsc())
        _FACTOR_CACHE[key] = lu
        if len(_FACTOR_CACHE) > _FACTOR_CACHE_SIZE:
            _FACTOR_CACHE.popitem(last=False)
    else:
        _FACTOR_CACHE.move_to_end(key)
    return lu


def _norm(a, nd):
    return np.sqrt(np.sum(a * a, axis=tuple(range(-nd, 0))))


def admm_denoise(fb: FilterBank, y, cfg: DenoiseConfig | None = None, **overrides) -> AdmmState:
    """Denoise ``y`` (shape ``(N, N)`` or ``(B, N, N)``) with analysis operator ``fb``.

    Keyword overrides are applied on top of ``cfg``. Returns the final
    :class:`AdmmState`; ``state.x`` is the denoised image(s).
    """
    cfg = replace(cfg or DenoiseConfig(), **overrides)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim not in (2, 3) or y.shape[-1] != y.shape[-2]:
        raise ValueError(f"expected square image(s), got shape {y.shape}")
    single = y.ndim == 2
    Y = y[None] if single else y
    B, N, _ = Y.shape
    if N < fb.f:
        raise ValueError(f"image side {N} smaller than filter size {fb.f}")
    rho, thresh = cfg.rho, cfg.beta / cfg.rho
    if cfg.beta == 0:
        # the minimizer is y itself; skip the factorization round-off
        z = apply_analysis(fb, Y)
        state = AdmmState(x=Y.copy(), z=z, u=np.zeros_like(z), rho=rho,
                          iters_run=np.zeros(B, dtype=int), cost_history=[],
                          converged=np.ones(B, dtype=bool), primal_residual=np.zeros(B),
                          dual_residual=np.zeros(B))
        return state[0] if single else state

    if cfg.warm is not None:
        w = cfg.warm
        x, z, u = (np.array(a, dtype=np.float64).reshape(s) for a, s in
                   ((w.x, Y.shape), (w.z, (B,) + fb.coeff_shape(N)), (w.u, (B,) + fb.coeff_shape(N))))
        if w.rho != rho:
            u *= w.rho / rho
    else:
        x = Y.copy()
        z = soft_threshold(apply_analysis(fb, x), thresh)
        u = np.zeros_like(z)

    iters_run = np.zeros(B, dtype=int)
    active = np.ones(B, dtype=bool)
    r_pri = np.full(B, np.inf)
    r_dual = np.full(B, np.inf)
    cost_history = []
    cost = denoise_cost(fb, x, Y, cfg.beta)
    # ring buffer of per-image costs for the stability test
    window = np.tile(cost, (cfg.cost_window, 1))
    cg_failures = 0
    stopping = cfg.tol > 0 or cfg.cost_tol > 0 or cfg.pattern_window > 0
    stable = np.zeros(B, dtype=int)
    if cfg.tol > 0:
        # solutions far below the data scale (x* = 0) are measured against the data
        floor_pri = np.maximum(SCALE_FLOOR * _norm(apply_analysis(fb, Y), 3), 1e-300)
        floor_dual = np.maximum(SCALE_FLOOR * _norm(Y, 2), 1e-300)
    lu = _x_update_factor(fb, N, rho) if cfg.x_solver == "direct" else None
    # with residual checks W^T z and W^T u are needed anyway, so carry them
    # and spend one adjoint per iteration instead of three
    track = cfg.tol > 0
    if track:
        WTz, WTu = np.split(apply_adjoint(fb, np.concatenate([z, u]), N), 2)

    def normal_op(v, _rows):
        return v + rho * apply_adjoint(fb, apply_analysis(fb, v), N)

    for it in range(cfg.outer_iters):
        n_active = int(np.count_nonzero(active))
        if n_active == 0:
            break
        # a slice keeps the common all-active case free of gather/scatter copies
        idx = slice(None) if n_active == B else np.flatnonzero(active)
        xa, za, ua, ya = x[idx], z[idx], u[idx], Y[idx]

        if track:
            rhs = ya + rho * (WTz[idx] - WTu[idx])
        else:
            rhs = ya + rho * apply_adjoint(fb, za - ua, N)
        if lu is not None:
            xa = lu.solve(rhs.reshape(n_active, -1).T).T.reshape(rhs.shape)
        else:
            xa, info = cg(normal_op, rhs, x0=xa, tol=cfg.cg_tol, maxiter=cfg.inner_cg_iters)
            if cfg.inner_cg_iters and not info["converged"].all():
                cg_failures += 1
        Wx = apply_analysis(fb, xa)
        Wr = Wx if cfg.relax == 1.0 else cfg.relax * Wx + (1.0 - cfg.relax) * za
        z_old = za.copy()
        za = soft_threshold(Wr + ua, thresh)
        ua = ua + Wr - za
        if not np.all(np.isfinite(xa)) or not np.all(np.isfinite(ua)):
            raise FloatingPointError(f"non-finite ADMM iterate at outer iteration {it}")

        x[idx], z[idx], u[idx] = xa, za, ua
        iters_run[idx] += 1
        cost[idx] = (0.5 * np.sum((xa - ya) ** 2, axis=(-2, -1))
                     + cfg.beta * np.sum(np.abs(Wx), axis=(-3, -2, -1)))
        cost_history.append(float(np.sum(cost)))
        r_pri[idx] = _norm(Wx - za, 3)
        last = it == cfg.outer_iters - 1
        if track:
            WTz_new, WTu_new = np.split(apply_adjoint(fb, np.concatenate([za, ua]), N), 2)
            r_dual[idx] = rho * _norm(WTz_new - WTz[idx], 2)
            WTz[idx], WTu[idx] = WTz_new, WTu_new
        elif last:
            r_dual[idx] = rho * _norm(apply_adjoint(fb, za - z_old, N), 2)
        if stopping:
            done = np.ones(n_active, dtype=bool)
            if cfg.tol > 0:
                scale_pri = np.maximum(np.maximum(_norm(Wx, 3), _norm(za, 3)), floor_pri[idx])
                scale_dual = np.maximum(rho * _norm(WTu_new, 2), floor_dual[idx])
                done &= (r_pri[idx] <= cfg.tol * scale_pri) & (r_dual[idx] <= cfg.tol * scale_dual)
            if cfg.cost_tol > 0:
                slot = it % cfg.cost_window
                old = window[slot, idx].copy()
                window[slot, idx] = cost[idx]
                done &= iters_run[idx] >= cfg.cost_window
                done &= np.abs(cost[idx] - old) <= cfg.cost_tol * np.abs(cost[idx])
            if cfg.pattern_window > 0:
                same = np.all(np.sign(za) == np.sign(z_old), axis=(-3, -2, -1))
                stable[idx] = np.where(same, stable[idx] + 1, 0)
                done &= stable[idx] >= cfg.pattern_window
            active[np.flatnonzero(active)[done]] = False

    converged = ~active if stopping else np.ones(B, dtype=bool)
    if cg_failures:
        logger.debug("inner CG hit its iteration cap in %d outer iterations", cg_failures)
    state = AdmmState(
        x=x, z=z, u=u, rho=rho, iters_run=iters_run, cost_history=cost_history,
        converged=converged, primal_residual=r_pri, dual_residual=r_dual,
        cg_failures=cg_failures,
    )
    if single:
        state = state[0]
        state.cost_history = cost_history
    return state


def scalar_denoise(w: float, y: float, beta: float = 1.0) -> float:
    """Closed-form minimizer of ``0.5 (x - y)^2 + beta |w x|``."""
    shrink = beta * abs(w)
    if y >= 0:
        return y - shrink if y - shrink > 0 else 0.0
    return y + shrink if y + shrink < 0 else 0.0


def resolve_operator(kind) -> FilterBank:
    """Map ``'tv'``, ``'dct'``, a :class:`FilterBank` or a bank file to a bank."""
    if isinstance(kind, FilterBank):
        return kind
    if kind == "tv":
        return make_tv_filterbank()
    if kind == "dct":
        return make_dct_filterbank(include_dc=False)
    if isinstance(kind, (str, Path)) and Path(kind).is_file():
        return load_filterbank(kind)
    raise ValueError(f"unknown operator {kind!r}; expected 'tv', 'dct' or a filter-bank file")


def denoise_with_operator(kind, y, beta: float, cfg: DenoiseConfig | None = None) -> np.ndarray:
    fb = resolve_operator(kind)
    return admm_denoise(fb, y, cfg, beta=beta).x
