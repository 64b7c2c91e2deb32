"""Axis-aligned BEV grids.

A :class:`Raster` is a 2-D array of scalars with row index along +y and
column index along +x.  ``origin`` is the position of the center of cell
``(0, 0)``; cell ``(r, c)`` is centered at ``origin + (c, r) * resolution``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .pose import Point2

# Tolerance used when snapping window edges to cell centers.
_SNAP = 1e-9


class EmptyCropError(ValueError):
    pass


@dataclass(frozen=True)
class Window:
    """Closed axis-aligned rectangle ``[xmin, xmax] x [ymin, ymax]``."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax >= self.xmin and self.ymax >= self.ymin):
            raise ValueError(f"empty window {self}")

    @property
    def width_m(self) -> float:
        return self.xmax - self.xmin

    @property
    def height_m(self) -> float:
        return self.ymax - self.ymin

    def expand(self, dx: float, dy: float | None = None) -> "Window":
        dy = dx if dy is None else dy
        return Window(self.xmin - dx, self.ymin - dy, self.xmax + dx, self.ymax + dy)

    def shape(self, resolution: float) -> tuple[int, int]:
        """``(height, width)`` in cells of a grid anchored at the lower-left corner."""
        w = int(math.floor(self.width_m / resolution + _SNAP)) + 1
        h = int(math.floor(self.height_m / resolution + _SNAP)) + 1
        return h, w


@dataclass(eq=False)
class Raster:
    origin: Point2
    resolution: float
    values: np.ndarray

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError("raster values must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("raster values must be finite")

    @classmethod
    def zeros(cls, window: Window, resolution: float, dtype=np.float64) -> "Raster":
        return cls(Point2(window.xmin, window.ymin), resolution, np.zeros(window.shape(resolution), dtype))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def extent(self) -> Window:
        ox, oy = self.origin.x, self.origin.y
        return Window(ox, oy, ox + (self.width - 1) * self.resolution, oy + (self.height - 1) * self.resolution)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(xs, ys)``: 1-D center coordinates of columns and rows."""
        xs = self.origin.x + np.arange(self.width) * self.resolution
        ys = self.origin.y + np.arange(self.height) * self.resolution
        return xs, ys

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return (
            self.origin == other.origin
            and self.resolution == other.resolution
            and self.values.dtype == other.values.dtype
            and np.array_equal(self.values, other.values)
        )

    def crop(self, window: Window) -> "Raster":
        return crop(self, window)


def _index_range(lo: float, hi: float, origin: float, res: float) -> tuple[int, int]:
    i0 = int(math.ceil((lo - origin) / res - _SNAP))
    i1 = int(math.floor((hi - origin) / res + _SNAP))
    return i0, i1


def crop(r: Raster, window: Window) -> Raster:
    """Sub-raster on the source grid covering ``window``; outside cells are 0."""
    c0, c1 = _index_range(window.xmin, window.xmax, r.origin.x, r.resolution)
    r0, r1 = _index_range(window.ymin, window.ymax, r.origin.y, r.resolution)
    if c1 < 0 or r1 < 0 or c0 > r.width - 1 or r0 > r.height - 1 or c1 < c0 or r1 < r0:
        raise EmptyCropError(f"window {window} does not overlap raster extent {r.extent}")
    out = np.zeros((r1 - r0 + 1, c1 - c0 + 1), dtype=r.values.dtype)
    sr0, sr1 = max(r0, 0), min(r1, r.height - 1)
    sc0, sc1 = max(c0, 0), min(c1, r.width - 1)
    out[sr0 - r0 : sr1 - r0 + 1, sc0 - c0 : sc1 - c0 + 1] = r.values[sr0 : sr1 + 1, sc0 : sc1 + 1]
    origin = Point2(r.origin.x + c0 * r.resolution, r.origin.y + r0 * r.resolution)
    return Raster(origin, r.resolution, out)


@dataclass(eq=False)
class SparseRaster:
    """Raster stored as sorted ``(row, col, value)`` triples of its nonzero cells.

    The map-wide sign layer is far too large to hold densely at 5cm, so it
    lives in this form and is only densified per crop.
    """

    origin: Point2
    resolution: float
    shape: tuple[int, int]
    rows: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    cols: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        self.shape = (int(self.shape[0]), int(self.shape[1]))
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        if not (rows.shape == cols.shape == vals.shape):
            raise ValueError("rows, cols and values must have equal length")
        keep = vals != 0
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
        if rows.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= self.shape[0] or cols.max() >= self.shape[1]):
            raise ValueError("sparse cell index out of range")
        order = np.lexsort((cols, rows))
        self.rows, self.cols, self.values = rows[order], cols[order], vals[order]

    @property
    def height(self) -> int:
        return self.shape[0]

    @property
    def width(self) -> int:
        return self.shape[1]

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def __eq__(self, other):
        if not isinstance(other, SparseRaster):
            return NotImplemented
        return (
            self.origin == other.origin
            and self.resolution == other.resolution
            and self.shape == other.shape
            and np.array_equal(self.rows, other.rows)
            and np.array_equal(self.cols, other.cols)
            and np.array_equal(self.values, other.values)
        )

    def cell_points(self) -> np.ndarray:
        """Map-frame centers of the nonzero cells, ``(N, 2)``."""
        return np.stack(
            [self.origin.x + self.cols * self.resolution, self.origin.y + self.rows * self.resolution], axis=1
        )

    def to_dense(self) -> Raster:
        out = np.zeros(self.shape)
        out[self.rows, self.cols] = self.values
        return Raster(self.origin, self.resolution, out)

    def crop(self, window: Window) -> Raster:
        c0, c1 = _index_range(window.xmin, window.xmax, self.origin.x, self.resolution)
        r0, r1 = _index_range(window.ymin, window.ymax, self.origin.y, self.resolution)
        if c1 < 0 or r1 < 0 or c0 > self.width - 1 or r0 > self.height - 1 or c1 < c0 or r1 < r0:
            raise EmptyCropError(f"window {window} does not overlap sparse raster")
        out = np.zeros((r1 - r0 + 1, c1 - c0 + 1))
        m = (self.rows >= r0) & (self.rows <= r1) & (self.cols >= c0) & (self.cols <= c1)
        out[self.rows[m] - r0, self.cols[m] - c0] = self.values[m]
        origin = Point2(self.origin.x + c0 * self.resolution, self.origin.y + r0 * self.resolution)
        return Raster(origin, self.resolution, out)
