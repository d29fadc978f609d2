"""Ground-truth density pyramids and the multi-scale density loss."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

NUM_LEVELS = 3
DEFAULT_WEIGHTS = (2.0, 0.5, 0.05)
SIGMA_FALLBACK = 15.0
SIGMA_MIN, SIGMA_MAX = 1.0, 25.0


@dataclass
class DensityPyramid:
    levels: list[np.ndarray]

    @property
    def count(self) -> float:
        return count_from_map(self.levels[0])

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [lv.shape for lv in self.levels]


@dataclass(frozen=True)
class LossWeights:
    omega: tuple[float, ...] = DEFAULT_WEIGHTS

    def __post_init__(self):
        if any(w <= 0 for w in self.omega):
            raise ValueError(f"loss weights must be positive, got {self.omega}")


def adaptive_sigma(points, k: int = 3, beta: float = 0.3, fallback: float = SIGMA_FALLBACK,
                   sigma_min: float = SIGMA_MIN, sigma_max: float = SIGMA_MAX) -> np.ndarray:
    """Geometry-adaptive kernel widths: beta times the mean distance to the k nearest others."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        raise ValueError("adaptive_sigma: need at least one point")
    if n == 1:
        return np.array([fallback])
    kk = min(k, n - 1)
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    nearest = np.sort(d, axis=1)[:, :kk]
    return np.clip(beta * nearest.mean(axis=1), sigma_min, sigma_max)


def gaussian_kernel(x: float, y: float, sigma: float, shape: tuple[int, int]) -> tuple[slice, slice, np.ndarray]:
    """Unit-mass Gaussian centred at (x, y), truncated at 4 sigma and clipped to ``shape``."""
    h, w = shape
    r = 4.0 * sigma
    x0, x1 = max(int(np.ceil(x - r)), 0), min(int(np.floor(x + r)), w - 1)
    y0, y1 = max(int(np.ceil(y - r)), 0), min(int(np.floor(y + r)), h - 1)
    gx = np.arange(x0, x1 + 1) - x
    gy = np.arange(y0, y1 + 1) - y
    d2 = gy[:, None] ** 2 + gx[None, :] ** 2
    ker = np.where(d2 <= r * r, np.exp(-d2 / (2 * sigma * sigma)), 0.0)
    mass = ker.sum()
    if mass <= 0:
        # the point is inside the frame, so its nearest pixel is within 4 sigma >= 4 px
        raise ValueError(f"empty kernel support at ({x}, {y})")
    return slice(y0, y1 + 1), slice(x0, x1 + 1), ker / mass


def sum_pool2(grid: np.ndarray) -> np.ndarray:
    h, w = grid.shape
    return grid.reshape(h // 2, 2, w // 2, 2).sum(axis=(1, 3))


def build_density_pyramid(points, shape: tuple[int, int], sigmas: Sequence[float] | None = None,
                          levels: int = NUM_LEVELS) -> DensityPyramid:
    """Level 1 splats one unit-mass kernel per point; coarser levels sum-pool 2x2."""
    h, w = shape
    if h % (1 << (levels - 1)) or w % (1 << (levels - 1)):
        raise ShapeError(f"build_density_pyramid: shape {shape} not divisible by {1 << (levels - 1)}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    grid = np.zeros((h, w))
    if len(pts):
        bad = (pts[:, 0] < -0.5) | (pts[:, 0] > w - 0.5) | (pts[:, 1] < -0.5) | (pts[:, 1] > h - 0.5)
        if bad.any():
            x, y = pts[np.argmax(bad)]
            raise ValueError(f"point ({x}, {y}) outside frame {w}x{h}")
        if sigmas is None:
            sigmas = adaptive_sigma(pts)
        for (x, y), s in zip(pts, sigmas):
            sy, sx, ker = gaussian_kernel(x, y, float(s), (h, w))
            grid[sy, sx] += ker
    out = [grid]
    for _ in range(levels - 1):
        out.append(sum_pool2(out[-1]))
    return DensityPyramid(out)


def density_loss(pred: Sequence[Tensor], gt: Sequence[np.ndarray],
                 weights: LossWeights | Sequence[float] = LossWeights()) -> Tensor:
    """Weighted pixel-wise squared error summed over levels.

    ``pred[l]`` and ``gt[l]`` hold every frame of the batch along the leading
    axis (``[F, H_l, W_l]``, or ``[F, 1, H_l, W_l]``). The sum is divided by
    ``F * L``, which for one frame pair (F = 2) is exactly the per-pair loss
    and for K pairs is its batch mean.
    """
    omega = weights.omega if isinstance(weights, LossWeights) else tuple(weights)
    if len(pred) != len(gt) or len(pred) != len(omega):
        raise ShapeError(f"density_loss: {len(pred)} predicted levels, {len(gt)} target levels, "
                         f"{len(omega)} weights")
    frames = pred[0].shape[0]
    terms = []
    for p, g, wl in zip(pred, gt, omega):
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ShapeError(f"density_loss: prediction {p.shape} vs target {g.shape}")
        terms.append(T.mul_scalar(T.total(T.square(T.sub(p, Tensor(g)))), wl))
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return T.mul_scalar(acc, 1.0 / (frames * len(pred)))


def count_from_map(grid) -> float:
    return float(np.asarray(grid.data if isinstance(grid, Tensor) else grid).sum())


# ---------------------------------------------------------------- DMAP files

def save_density_map(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(b"DMAP" + struct.pack("<II", h, w))
        fh.write(grid.astype("<f4").tobytes())


def load_density_map(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != b"DMAP":
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    h, w = struct.unpack("<II", raw[4:12])
    data = np.frombuffer(raw[12:], dtype="<f4")
    if data.size != h * w:
        raise ValueError(f"{path}: expected {h * w} values, found {data.size}")
    return data.reshape(h, w).astype(np.float64)
