"""Denoising metrics, error and response maps, and PGM rendering.

SNR is aggregated over a whole image set rather than averaged per image::

    snr = 10 log10(sum x^2) - 10 log10(sum (xhat - x)^2)

A perfect reconstruction has infinite SNR. That case is returned as the
:data:`INFINITE_SNR` sentinel, which orders above every float but refuses
arithmetic, so it cannot leak into sums or means.
"""

from __future__ import annotations

import csv
import functools
import io
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imgops import apply_analysis

# display ranges for rendered maps
IMAGE_RANGE = (0.0, 1.0)
ERROR_RANGE = (0.0, 0.2)
RESPONSE_RANGE = (0.0, 2.0)
FILTER_RANGE = (-0.7, 0.7)


@functools.total_ordering
class _InfiniteSNR:
    """Sentinel for an exactly zero reconstruction error."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "INFINITE_SNR"

    def __str__(self):
        return "inf dB"

    def __eq__(self, other):
        return other is self

    def __lt__(self, other):
        return False

    def __gt__(self, other):
        return other is not self

    def __hash__(self):
        return hash("INFINITE_SNR")

    def __reduce__(self):
        return (_InfiniteSNR, ())


INFINITE_SNR = _InfiniteSNR()


def is_infinite(value) -> bool:
    return value is INFINITE_SNR


def _stack(images, name) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if arr.ndim == 2:
        arr = arr[None]
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _pair(recons, truths):
    recons = _stack(recons, "recons")
    truths = _stack(truths, "truths")
    if recons.shape != truths.shape:
        raise ValueError(f"shape mismatch: recons {recons.shape} vs truths {truths.shape}")
    return recons, truths


def _snr_from_sums(signal, error):
    if error == 0:
        return INFINITE_SNR
    return float(10 * np.log10(signal) - 10 * np.log10(error))


def snr(recons, truths):
    """Aggregate SNR in dB over a set of images.

    Parameters
    ----------
    recons, truths : array_like of shape (T, N, N) or (N, N)

    Returns
    -------
    float or INFINITE_SNR
    """
    recons, truths = _pair(recons, truths)
    return _snr_from_sums(np.sum(truths**2), np.sum((recons - truths) ** 2))


def per_image_snr(recons, truths) -> list:
    recons, truths = _pair(recons, truths)
    return [_snr_from_sums(np.sum(t**2), np.sum((r - t) ** 2)) for r, t in zip(recons, truths)]


def psnr_offset(truths) -> float:
    """Offset that turns aggregate SNR into PSNR with peak 1.0."""
    truths = _stack(truths, "truths")
    return float(10 * np.log10(truths.size) - 10 * np.log10(np.sum(truths**2)))


def error_map(recon, truth) -> np.ndarray:
    recon, truth = np.asarray(recon, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if recon.shape != truth.shape:
        raise ValueError(f"shape mismatch: {recon.shape} vs {truth.shape}")
    return np.abs(recon - truth)


def response_map(fb, img) -> np.ndarray:
    """Summed absolute filter responses on the valid ``(N-f+1)^2`` grid."""
    return np.sum(np.abs(apply_analysis(fb, img)), axis=-3)


def _json_db(value):
    return None if is_infinite(value) else value


@dataclass
class MetricReport:
    """Testing-set metrics for one method.

    ``snr_db`` is ``None`` in serialized form when the error is exactly zero,
    with ``snr_infinite`` set.
    """

    method: str
    snr_db: object
    per_image_snr: list
    psnr_offset_db: float
    beta: float | None = None
    timing_s: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def psnr_db(self):
        if is_infinite(self.snr_db):
            return INFINITE_SNR
        return self.snr_db + self.psnr_offset_db

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_db"] = _json_db(self.snr_db)
        d["snr_infinite"] = is_infinite(self.snr_db)
        d["per_image_snr"] = [_json_db(v) for v in self.per_image_snr]
        d["psnr_db"] = _json_db(self.psnr_db)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    CSV_FIELDS = ("method", "beta", "snr_db", "psnr_db", "psnr_offset_db", "timing_s")

    def csv_row(self) -> dict:
        d = self.to_dict()
        row = {k: d[k] for k in self.CSV_FIELDS}
        if d["snr_infinite"]:
            row["snr_db"] = row["psnr_db"] = "inf"
        return row


def evaluate(method, recons, truths, beta=None, timing_s=None, **extra) -> MetricReport:
    recons, truths = _pair(recons, truths)
    return MetricReport(
        method=str(method),
        snr_db=snr(recons, truths),
        per_image_snr=per_image_snr(recons, truths),
        psnr_offset_db=psnr_offset(truths),
        beta=None if beta is None else float(beta),
        timing_s=timing_s,
        extra=dict(extra),
    )


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MetricReport.CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.csv_row())
    return buf.getvalue()


def format_table(reports) -> str:
    """Plain-text table of methods with SNR and PSNR."""
    def db(v):
        return "inf" if is_infinite(v) else f"{v:.2f}"

    lines = [f"{'method':<24}{'beta':>10}{'SNR (dB)':>10}{'PSNR (dB)':>11}"]
    for r in reports:
        beta = "-" if r.beta is None else f"{r.beta:.4g}"
        lines.append(f"{r.method:<24}{beta:>10}{db(r.snr_db):>10}{db(r.psnr_db):>11}")
    return "\n".join(lines)


def to_uint8(img, vmin, vmax) -> np.ndarray:
    """Clamp to ``[vmin, vmax]`` and map linearly onto 0..255."""
    img = np.asarray(img, dtype=np.float64)
    scaled = (np.clip(img, vmin, vmax) - vmin) / (vmax - vmin)
    return np.floor(scaled * 255 + 0.5).astype(np.uint8)


def write_pgm(path, img, vrange=IMAGE_RANGE) -> Path:
    """Write a binary 8-bit PGM after clamping to ``vrange``."""
    path = Path(path)
    data = to_uint8(img, *vrange)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (data.shape[1], data.shape[0]))
        fh.write(data.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM as written by :func:`write_pgm`."""
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+255\s", raw)
    if m is None:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    data = raw[m.end(): m.end() + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def filter_tiles(fb, scale: int = 8, gap: int = 1) -> np.ndarray:
    """Lay filters out side by side, each pixel blown up to ``scale``."""
    filters = fb.filters
    K, f, _ = filters.shape
    side = f * scale
    canvas = np.zeros((side, K * side + (K - 1) * gap))
    for k in range(K):
        tile = np.kron(filters[k], np.ones((scale, scale)))
        canvas[:, k * (side + gap): k * (side + gap) + side] = tile
    return canvas


def render_filters(fb, path, scale: int = 8) -> Path:
    return write_pgm(path, filter_tiles(fb, scale), FILTER_RANGE)


def render_response(fb, img, path) -> Path:
    return write_pgm(path, response_map(fb, img), RESPONSE_RANGE)


def render_error(recon, truth, path) -> Path:
    return write_pgm(path, error_map(recon, truth), ERROR_RANGE)
