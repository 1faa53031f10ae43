"""Matrix-free convolutional analysis operator.

A :class:`FilterBank` holding ``K`` filters of size ``f x f`` defines the
linear map ``W`` from an ``N x N`` image to a ``K x M x M`` coefficient
stack with ``M = N - f + 1`` (valid correlation, no padding)::

    (W x)[c, i, j] = sum_{a, b} filters[c, a, b] * x[i + a, j + b]

All operators accept arbitrary leading batch dimensions, so a stack of
images of shape ``(..., N, N)`` maps to coefficients ``(..., K, M, M)``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import idctn

INLINE_LIMIT = 1024


@dataclass
class FilterBank:
    """Learnable parameters of the analysis operator.

    Parameters
    ----------
    filters : ndarray of shape (K, f, f)
        Filter coefficients, channel-major and row-major within a filter.
    provenance : dict
        Free-form record of where the bank came from (kept in saved files).
    """

    filters: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        filters = np.array(self.filters, dtype=np.float64)
        if filters.ndim == 2:
            filters = filters[None]
        if filters.ndim != 3 or filters.shape[1] != filters.shape[2]:
            raise ValueError(f"filters must have shape (K, f, f), got {filters.shape}")
        if filters.shape[0] < 1 or filters.shape[1] < 1:
            raise ValueError("filter bank needs K >= 1 and f >= 1")
        if not np.all(np.isfinite(filters)):
            raise ValueError("filter coefficients must be finite")
        self.filters = filters

    @property
    def K(self) -> int:
        return self.filters.shape[0]

    @property
    def f(self) -> int:
        return self.filters.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        """Flattened ``(K, f*f)`` filter matrix."""
        return self.filters.reshape(self.K, -1)

    @classmethod
    def from_matrix(cls, matrix, provenance=None) -> "FilterBank":
        matrix = np.asarray(matrix, dtype=np.float64)
        f = int(round(np.sqrt(matrix.shape[1])))
        if f * f != matrix.shape[1]:
            raise ValueError("matrix columns must be a perfect square")
        return cls(matrix.reshape(matrix.shape[0], f, f), dict(provenance or {}))

    def coeff_shape(self, N: int) -> tuple[int, int, int]:
        M = N - self.f + 1
        return (self.K, M, M)

    def copy(self) -> "FilterBank":
        return FilterBank(self.filters.copy(), dict(self.provenance))

    def __eq__(self, other):
        if not isinstance(other, FilterBank):
            return NotImplemented
        return np.array_equal(self.filters, other.filters)


def _as_filters(fb) -> np.ndarray:
    return fb.filters if isinstance(fb, FilterBank) else np.asarray(fb, dtype=np.float64)


def apply_analysis(fb, img) -> np.ndarray:
    """Apply ``W``: valid correlation of ``img`` with every filter.

    Parameters
    ----------
    fb : FilterBank or ndarray of shape (K, f, f)
    img : ndarray of shape (..., N, N)

    Returns
    -------
    ndarray of shape (..., K, N - f + 1, N - f + 1)
    """
    filters = _as_filters(fb)
    img = np.asarray(img, dtype=np.float64)
    f = filters.shape[-1]
    if img.ndim < 2 or img.shape[-1] < f or img.shape[-2] < f:
        raise ValueError(f"image of shape {img.shape} is smaller than filter size {f}")
    patches = sliding_window_view(img, (f, f), axis=(-2, -1))
    out = np.tensordot(patches, filters, axes=([-2, -1], [1, 2]))
    return np.moveaxis(out, -1, -3)


def apply_adjoint(fb, coeffs, N: int | None = None) -> np.ndarray:
    """Apply ``W^T`` to a coefficient stack of shape ``(..., K, M, M)``."""
    filters = _as_filters(fb)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    K, f, _ = filters.shape
    if coeffs.ndim < 3 or coeffs.shape[-3] != K:
        raise ValueError(f"coefficients of shape {coeffs.shape} do not match K={K}")
    M = coeffs.shape[-1]
    if N is None:
        N = M + f - 1
    elif N - f + 1 != M or coeffs.shape[-2] != M:
        raise ValueError(f"coefficients of shape {coeffs.shape} do not match N={N}, f={f}")
    spread = np.tensordot(coeffs, filters, axes=([-3], [0]))  # (..., M, M, f, f)
    out = np.zeros(coeffs.shape[:-3] + (N, N))
    for a in range(f):
        for b in range(f):
            out[..., a:a + M, b:b + M] += spread[..., a, b]
    return out


def filter_gradient(u, v) -> np.ndarray:
    """Vector-Jacobian product of ``theta -> u^T W_theta v``.

    ``u`` has shape ``(..., K, M, M)`` and ``v`` shape ``(..., N, N)``. The
    result has shape ``(K, f, f)`` with ``f = N - M + 1``; leading batch
    dimensions are summed.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim < 3 or v.ndim < 2 or u.shape[:-3] != v.shape[:-2]:
        raise ValueError(f"incompatible shapes {u.shape} and {v.shape}")
    M = u.shape[-1]
    f = v.shape[-1] - M + 1
    if f < 1 or u.shape[-2] != M or v.shape[-2] != v.shape[-1]:
        raise ValueError(f"incompatible shapes {u.shape} and {v.shape}")
    patches = sliding_window_view(v, (M, M), axis=(-2, -1))  # (..., f, f, M, M)
    nb = u.ndim - 3
    batch = tuple(range(nb))
    return np.tensordot(
        u, patches, axes=(batch + (nb + 1, nb + 2), batch + (nb + 2, nb + 3))
    )


def sparse_matrix(fb, N: int):
    """``W`` as a CSR matrix of shape ``(K * M * M, N * N)`` (row-major images)."""
    filters = _as_filters(fb)
    K, f, _ = filters.shape
    M = N - f + 1
    if M < 1:
        raise ValueError(f"image side {N} smaller than filter size {f}")
    k, i, j, a, b = np.meshgrid(np.arange(K), np.arange(M), np.arange(M),
                                np.arange(f), np.arange(f), indexing="ij")
    rows = ((k * M + i) * M + j).ravel()
    cols = ((i + a) * N + (j + b)).ravel()
    return sp.csr_matrix((filters[k, a, b].ravel(), (rows, cols)), shape=(K * M * M, N * N))


def make_tv_filterbank() -> FilterBank:
    """Horizontal and vertical first differences (anisotropic TV)."""
    filters = np.array([[[1.0, -1.0], [0.0, 0.0]], [[1.0, 0.0], [-1.0, 0.0]]])
    return FilterBank(filters, {"kind": "tv"})


def make_dct_filterbank(include_dc: bool = True, size: int = 3) -> FilterBank:
    """Orthonormal 2-D DCT-II basis on ``size x size`` blocks.

    Filters are ordered by frequency index (row-major over ``(p, q)``), so
    the constant filter comes first and is dropped when ``include_dc`` is
    false.
    """
    basis = []
    for p in range(size):
        for q in range(size):
            coef = np.zeros((size, size))
            coef[p, q] = 1.0
            # inverse orthonormal DCT of a unit coefficient is the basis image
            basis.append(idctn(coef, type=2, norm="ortho"))
    filters = np.stack(basis)
    if not include_dc:
        filters = filters[1:]
    return FilterBank(filters, {"kind": "dct", "include_dc": include_dc})


def save_filterbank(fb: FilterBank, path) -> Path:
    """Write a filter bank as JSON, with a binary sidecar for large banks.

    Banks with at most ``INLINE_LIMIT`` coefficients are stored inline. Larger
    banks store little-endian float64 data in ``<path>.f64`` next to the header.
    """
    path = Path(path)
    header = {
        "K": fb.K,
        "f": fb.f,
        "layout": "channel-major,row-major",
        "dtype": "<f8",
        "provenance": fb.provenance,
    }
    if fb.filters.size <= INLINE_LIMIT:
        header["coefficients"] = fb.filters.ravel().tolist()
    else:
        sidecar = path.with_name(path.name + ".f64")
        fb.filters.astype("<f8").tofile(sidecar)
        header["data_file"] = sidecar.name
    path.write_text(json.dumps(header, indent=2))
    return path


def load_filterbank(path) -> FilterBank:
    path = Path(path)
    header = json.loads(path.read_text())
    K, f = int(header["K"]), int(header["f"])
    if "coefficients" in header:
        data = np.asarray(header["coefficients"], dtype=np.float64)
    else:
        sidecar = path.with_name(header["data_file"])
        expected = K * f * f * 8
        size = os.path.getsize(sidecar)
        if size != expected:
            raise ValueError(
                f"{sidecar}: truncated or oversized data, expected {expected} bytes, "
                f"found {size} (failure at byte offset {min(size, expected)})"
            )
        data = np.fromfile(sidecar, dtype="<f8")
    if data.size != K * f * f:
        raise ValueError(f"{path}: expected {K * f * f} coefficients, found {data.size}")
    return FilterBank(data.reshape(K, f, f), header.get("provenance", {}))
