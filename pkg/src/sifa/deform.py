"""Motion-guided deformable sampling.

Implements the frame-pair preprocessing chain (temporal difference ->
motion saliency map -> offset estimation) and the bilinear re-sampling of
keys/values at fractional grid positions. Everything here is the per-query
reference path; the vectorized training path in `autodiff`/`blocks`
computes the same quantities for whole frames at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Conv2dParams, ShapeError, Tensor, conv2d, sigmoid, sub, mul


@dataclass
class MotionSaliencyMap:
    """Elementwise sigmoid(frame difference) gating of the next frame."""

    values: Tensor  # (C, H, W)


@dataclass
class OffsetField:
    """Per-location 2D displacements for each of the k*k grid points.

    Channel layout is fixed: channel 2g holds the row displacement of grid
    point g and channel 2g+1 the column displacement, with grid points
    enumerated row-major over the k x k window.
    """

    values: Tensor  # (2*k*k, H, W)
    k: int

    def __post_init__(self):
        if self.values.rank != 3:
            raise ShapeError("offset field must be rank 3")
        expected = 2 * self.k * self.k
        if self.values.shape[0] != expected:
            raise ShapeError(
                f"offset field needs {expected} channels for k={self.k}, "
                f"got {self.values.shape[0]}")

    def at(self, g: int, x: int, y: int) -> tuple:
        """(row, col) displacement of grid point g at query location (x, y)."""
        v = self.values.data
        return float(v[2 * g, x, y]), float(v[2 * g + 1, x, y])


@dataclass
class NeighborSet:
    """Sampled keys/values and their fractional source positions.

    Keys and values are the same tensors unless a key/value projection is
    configured upstream; none is by default.
    """

    keys: Tensor    # (C, k*k)
    vals: Tensor    # (C, k*k)
    coords: list    # k*k (row, col) pairs, row-major grid order


def temporal_difference(f_t: Tensor, f_next: Tensor) -> Tensor:
    """Elementwise next-minus-current frame difference."""
    return sub(f_next, f_t)


def motion_saliency(delta: Tensor, f_next: Tensor) -> MotionSaliencyMap:
    """Gate the next frame by sigmoid of the temporal difference."""
    return MotionSaliencyMap(values=mul(sigmoid(delta), f_next))


def estimate_offsets(source: Tensor, estimator: Conv2dParams, k: int) -> OffsetField:
    """Predict per-grid-point displacements with a same-size convolution."""
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"region size k must be odd and >= 1, got {k}")
    if estimator.out_channels != 2 * k * k:
        raise ShapeError(
            f"estimator must output 2*k*k={2 * k * k} channels, "
            f"got {estimator.out_channels}")
    return OffsetField(values=conv2d(source, estimator), k=k)


def grid_points(k: int) -> list:
    """Row-major (row, col) grid displacements spanning the centered window."""
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"region size k must be odd and >= 1, got {k}")
    r = (k - 1) // 2
    return [(a, b) for a in range(-r, r + 1) for b in range(-r, r + 1)]


def bilinear_sample(frame: Tensor, pos) -> np.ndarray:
    """Sample all channels of a (C, H, W) frame at one fractional position.

    Uses the product of 1D triangular kernels max(0, 1-|.|); values outside
    the frame are treated as zero, so the result decays smoothly to zero as
    the position leaves the frame.
    """
    r, c = float(pos[0]), float(pos[1])
    if not (math.isfinite(r) and math.isfinite(c)):
        raise ValueError(f"non-finite sample position {pos}")
    data = frame.data
    _, h, w = data.shape
    r0 = math.floor(r)
    c0 = math.floor(c)
    fr = r - r0
    fc = c - c0
    out = np.zeros(data.shape[0], dtype=data.dtype)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        rr = r0 + dr
        if wr == 0.0 or not 0 <= rr < h:
            continue
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            cc = c0 + dc
            if wc == 0.0 or not 0 <= cc < w:
                continue
            out += (wr * wc) * data[:, rr, cc]
    return out


def extract_neighbors(frame: Tensor, query_pos, k: int,
                      offsets: OffsetField | None = None) -> NeighborSet:
    """Sample the k*k (optionally deformed) neighborhood around a query.

    Grid point g at displacement (a, b) is sampled at
    (x + a + da_g, y + b + db_g) where (da_g, db_g) comes from the offset
    field at the query location, or is zero when no field is given.
    """
    if frame.rank != 3:
        raise ShapeError("frame must be rank 3 (C,H,W)")
    x, y = int(query_pos[0]), int(query_pos[1])
    _, h, w = frame.shape
    if not (0 <= x < h and 0 <= y < w):
        raise ShapeError(f"query position {query_pos} out of bounds for {h}x{w}")
    if offsets is not None and offsets.k != k:
        raise ShapeError(f"offset field built for k={offsets.k}, requested k={k}")
    grid = grid_points(k)
    coords = []
    cols = []
    for g, (a, b) in enumerate(grid):
        da, db = offsets.at(g, x, y) if offsets is not None else (0.0, 0.0)
        pos = (x + a + da, y + b + db)
        coords.append(pos)
        cols.append(bilinear_sample(frame, pos))
    kt = Tensor(np.stack(cols, axis=1))
    return NeighborSet(keys=kt, vals=kt, coords=coords)
