"""Dead-leaves images, Gaussian noise and dataset persistence.

Random numbers come from numpy's Philox4x64 counter-based generator keyed by
``SeedSequence(seed, spawn_key=(stream, index))``, and normals are drawn
by Box-Muller from its uniforms, so regenerated data is bit-identical
across platforms.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import write_pgm

RECT_MIN = 4
RECT_MAX = 32
BACKGROUND = 0.5

_IMAGE_STREAM = 0
_NOISE_STREAM = 1
_SPLIT_CODES = {"train": 0, "test": 1}


def philox(seed: int, *key: int) -> np.random.Generator:
    """Independent Philox stream for ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def box_muller(rng, size) -> np.ndarray:
    """Standard normals from pairs of uniforms."""
    n = int(np.prod(size))
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1], keeps log finite
    u2 = rng.random(m)
    radius = np.sqrt(-2.0 * np.log(u1))
    normals = np.concatenate([radius * np.cos(2 * np.pi * u2), radius * np.sin(2 * np.pi * u2)])
    return normals[:n].reshape(size)


def dead_leaves(seed: int = 0, n_rects: int = 100, N: int = 64, rng=None) -> np.ndarray:
    """Paint ``n_rects`` occluding rectangles with uniform intensities.

    Corners are uniform over the canvas, widths and heights uniform integers
    in ``[RECT_MIN, RECT_MAX]`` clipped at the border; later rectangles
    cover earlier ones. ``rng`` (anything with ``integers`` and ``random``)
    overrides the seeded stream.
    """
    if n_rects < 1 or N < 8:
        raise ValueError("need n_rects >= 1 and N >= 8")
    if rng is None:
        rng = philox(seed, _IMAGE_STREAM)
    img = np.full((N, N), BACKGROUND)
    for _ in range(n_rects):
        top, left = rng.integers(0, N, size=2)
        height, width = rng.integers(RECT_MIN, RECT_MAX + 1, size=2)
        img[top:top + height, left:left + width] = rng.random()
    return img


def noise_realization(shape, sigma: float, seed: int) -> np.ndarray:
    return sigma * box_muller(philox(seed, _NOISE_STREAM), shape)


def add_noise(img, sigma: float = 0.1, seed: int = 0) -> np.ndarray:
    """Return ``img`` plus i.i.d. zero-mean Gaussian noise of std ``sigma`` (no clipping)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    img = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    return img + noise_realization(img.shape, sigma, seed)


@dataclass
class Dataset:
    """Clean/noisy image pairs with their generation metadata."""

    clean: np.ndarray
    noisy: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.clean = np.asarray(self.clean, dtype=np.float64)
        self.noisy = np.asarray(self.noisy, dtype=np.float64)
        if self.clean.shape != self.noisy.shape or self.clean.ndim != 3:
            raise ValueError("clean and noisy must be matching (T, N, N) stacks")

    def __len__(self):
        return self.clean.shape[0]

    @property
    def pairs(self):
        return list(zip(self.clean, self.noisy))

    def subset(self, idx) -> "Dataset":
        idx = np.atleast_1d(idx)
        return Dataset(self.clean[idx], self.noisy[idx], dict(self.meta, T=len(idx)))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.meta == other.meta and np.array_equal(self.clean, other.clean)
                and np.array_equal(self.noisy, other.noisy))


def image_seed(seed: int, split: str, index: int) -> int:
    """Per-image seed derived from the dataset seed, split and index."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(_SPLIT_CODES[split], int(index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def make_dataset(seed: int = 0, T: int = 10, split: str = "train", N: int = 64,
                 sigma: float = 0.1, n_rects: int = 100) -> Dataset:
    if T < 1:
        raise ValueError("T must be >= 1")
    if split not in _SPLIT_CODES:
        raise ValueError(f"split must be one of {sorted(_SPLIT_CODES)}")
    clean, noisy = [], []
    for t in range(T):
        s = image_seed(seed, split, t)
        img = dead_leaves(s, n_rects=n_rects, N=N)
        clean.append(img)
        noisy.append(add_noise(img, sigma, s))
    meta = {"N": N, "T": T, "sigma": sigma, "n_rects": n_rects, "seed": int(seed), "split": split}
    return Dataset(np.stack(clean), np.stack(noisy), meta)


def save_dataset(ds: Dataset, directory, previews: bool = False) -> Path:
    """Write ``meta.json`` plus one raw little-endian float64 file per image."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "meta.json").write_text(json.dumps(ds.meta, indent=2, sort_keys=True))
    for t in range(len(ds)):
        ds.clean[t].astype("<f8").tofile(directory / f"clean_{t:04d}.f64")
        ds.noisy[t].astype("<f8").tofile(directory / f"noisy_{t:04d}.f64")
        if previews:
            write_pgm(directory / f"clean_{t:04d}.pgm", ds.clean[t])
            write_pgm(directory / f"noisy_{t:04d}.pgm", ds.noisy[t])
    return directory


def _read_image(path, N):
    expected = N * N * 8
    size = os.path.getsize(path)
    if size < expected:
        raise ValueError(f"{path}: truncated at byte offset {size}, expected {expected} bytes")
    if size > expected:
        raise ValueError(f"{path}: unexpected data from byte offset {expected} (size {size})")
    return np.fromfile(path, dtype="<f8").reshape(N, N)


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"{meta_path} not found")
    meta = json.loads(meta_path.read_text())
    N, T = int(meta["N"]), int(meta["T"])
    clean = [_read_image(directory / f"clean_{t:04d}.f64", N) for t in range(T)]
    noisy = [_read_image(directory / f"noisy_{t:04d}.f64", N) for t in range(T)]
    return Dataset(np.stack(clean), np.stack(noisy), meta)
