"""Per-hypothesis likelihoods for lane, sign and GPS observations.

Hypotheses live on a :class:`SearchGrid` of (lateral, longitudinal, heading)
offsets around an anchor pose.  Lane and sign terms rotate the vehicle-frame
observation raster once per heading hypothesis and correlate it against the
map rendered in the anchor frame, which scores every translational offset at
once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from numba import njit
from scipy import fft as sfft

from .pose import Point2, Pose2, compose_arrays, transform_point
from .raster import Raster, Window
from .semantic_map import DEFAULT_TRUNCATION, SemanticMap, rasterize_lanes_in_frame


class ResolutionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class SearchGrid:
    anchor: Pose2 = Pose2()
    lat_range: float = 0.75
    lon_range: float = 7.5
    theta_range: float = math.radians(2.0)
    lat_step: float = 0.05
    lon_step: float = 0.05
    theta_step: float = math.radians(1.0)

    def __post_init__(self):
        if min(self.lat_step, self.lon_step, self.theta_step) <= 0:
            raise ValueError("grid steps must be positive")
        if min(self.lat_range, self.lon_range, self.theta_range) < 0:
            raise ValueError("grid ranges must be non-negative")

    @property
    def half_cells(self) -> tuple[int, int, int]:
        return (
            int(round(self.lat_range / self.lat_step)),
            int(round(self.lon_range / self.lon_step)),
            int(round(self.theta_range / self.theta_step)),
        )

    @property
    def shape(self) -> tuple[int, int, int]:
        """``(n_lat, n_lon, n_theta)``; always odd so the anchor is a node."""
        return tuple(2 * h + 1 for h in self.half_cells)

    @property
    def size(self) -> int:
        a, b, c = self.shape
        return a * b * c

    def offsets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        hl, hn, ht = self.half_cells
        return (
            np.arange(-hl, hl + 1) * self.lat_step,
            np.arange(-hn, hn + 1) * self.lon_step,
            np.arange(-ht, ht + 1) * self.theta_step,
        )

    def with_anchor(self, anchor: Pose2) -> "SearchGrid":
        return replace(self, anchor=anchor)

    def cell_poses(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Map-frame ``(x, y, theta)`` of every cell, each shaped like the grid."""
        lat, lon, th = self.offsets()
        LAT, LON, TH = np.meshgrid(lat, lon, th, indexing="ij")
        a = self.anchor
        return compose_arrays(a.x, a.y, a.theta, LON, LAT, TH)

    def cell_offset(self, index) -> Pose2:
        """Anchor-relative offset ``(lon, lat, dtheta)`` of a cell index."""
        lat, lon, th = self.offsets()
        i, j, k = index
        return Pose2(lon[j], lat[i], th[k])


@dataclass(eq=False)
class LikelihoodGrid:
    grid: SearchGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values shape {self.values.shape} != grid shape {self.grid.shape}")

    @classmethod
    def uniform(cls, grid: SearchGrid) -> "LikelihoodGrid":
        return cls(grid, np.full(grid.shape, 1.0 / grid.size))

    def is_uniform(self) -> bool:
        return bool(np.ptp(self.values) == 0.0)

    def argmax(self) -> tuple[int, int, int]:
        return tuple(int(i) for i in np.unravel_index(np.argmax(self.values), self.values.shape))

    def entropy(self) -> float:
        p = self.values[self.values > 0]
        return float(-(p * np.log(p)).sum())


@dataclass(frozen=True)
class GpsFix:
    position: Point2
    timestamp: float = 0.0


# -- rotation ---------------------------------------------------------------------


@njit(cache=True)
def _snap(a):
    n = np.floor(a + 0.5)
    return n if abs(a - n) < 1e-9 else a


@njit(cache=True)
def _rotate_bilinear(src, ox, oy, res, c, s, out):
    h, w = src.shape
    for r in range(h):
        y = oy + r * res
        # source location R(-theta) p in fractional cell units, linear along the row
        ub = (c * ox + s * y - ox) / res
        vb = (-s * ox + c * y - oy) / res
        for q in range(w):
            u = _snap(ub + c * q)
            v = _snap(vb - s * q)
            if not (u > -1.0 and u < w and v > -1.0 and v < h):
                continue
            u0, v0 = int(math.floor(u)), int(math.floor(v))
            fu, fv = u - u0, v - v0
            if u0 >= 0 and v0 >= 0 and u0 + 1 < w and v0 + 1 < h:
                top = src[v0, u0] * (1.0 - fu) + src[v0, u0 + 1] * fu
                bot = src[v0 + 1, u0] * (1.0 - fu) + src[v0 + 1, u0 + 1] * fu
                out[r, q] = top * (1.0 - fv) + bot * fv
                continue
            acc = 0.0
            for dv in range(2):
                vv = v0 + dv
                if vv < 0 or vv >= h:
                    continue
                wv = fv if dv else 1.0 - fv
                for du in range(2):
                    uu = u0 + du
                    if uu < 0 or uu >= w:
                        continue
                    acc += wv * (fu if du else 1.0 - fu) * src[vv, uu]
            out[r, q] = acc


def rotate_raster(obs: Raster, theta: float) -> Raster:
    """Rotate ``obs`` by ``theta`` about its frame origin with bilinear resampling.

    Output cell ``p`` takes the bilinear sample of ``obs`` at ``R(-theta) p``,
    with cells outside the source counting as zero.
    """
    if abs(theta) > math.pi + 1e-12:
        raise ValueError("rotation angle must lie in [-pi, pi]")
    if theta == 0.0:
        return Raster(obs.origin, obs.resolution, obs.values.copy())
    out = np.zeros(obs.values.shape, dtype=obs.values.dtype)
    _rotate_bilinear(
        np.ascontiguousarray(obs.values), obs.origin.x, obs.origin.y, obs.resolution,
        math.cos(theta), math.sin(theta), out,
    )
    return Raster(obs.origin, obs.resolution, out)


# -- correlation ------------------------------------------------------------------


def _check_operands(obs: Raster, map_crop: Raster, lat_cells: int, lon_cells: int):
    if not math.isclose(obs.resolution, map_crop.resolution, rel_tol=1e-12, abs_tol=0.0):
        raise ResolutionMismatch(f"resolution {obs.resolution} != {map_crop.resolution}")
    if lat_cells < 1 or lon_cells < 1:
        raise ValueError("need at least one shift per axis")
    if map_crop.height < obs.height + lat_cells - 1 or map_crop.width < obs.width + lon_cells - 1:
        raise ValueError(
            f"map crop {map_crop.values.shape} too small for obs {obs.values.shape} "
            f"with {lat_cells}x{lon_cells} shifts"
        )


def correlate_spatial(obs: Raster, map_crop: Raster, lat_cells: int, lon_cells: int) -> np.ndarray:
    """``score[i, j] = sum(obs * map_crop[i:i+h, j:j+w])`` by direct summation."""
    _check_operands(obs, map_crop, lat_cells, lon_cells)
    o = np.asarray(obs.values, dtype=np.float64)
    m = np.asarray(map_crop.values, dtype=np.float64)
    h, w = o.shape
    out = np.empty((lat_cells, lon_cells))
    for i in range(lat_cells):
        for j in range(lon_cells):
            out[i, j] = np.einsum("ij,ij->", o, m[i : i + h, j : j + w])
    return out


class FftCorrelator:
    """Cross-correlates many observations against one map crop.

    The map spectrum is computed once.  Padding to at least the map size is
    enough: every requested lag ``(i, j)`` touches only map cells
    ``< (h + i, w + j) <= map shape``, so no circular wrap reaches them.
    """

    def __init__(
        self, map_crop: Raster, lat_cells: int, lon_cells: int, workers: int | None = None, dtype=np.float64
    ):
        self.map_crop = map_crop
        self.dtype = np.dtype(dtype)
        self.lat_cells = lat_cells
        self.lon_cells = lon_cells
        self.workers = workers
        mh, mw = map_crop.values.shape
        self.fshape = (sfft.next_fast_len(mh, real=True), sfft.next_fast_len(mw, real=True))
        self._spec = sfft.rfft2(np.asarray(map_crop.values, dtype=self.dtype), s=self.fshape, workers=workers)

    def correlate(self, obs: Raster) -> np.ndarray:
        _check_operands(obs, self.map_crop, self.lat_cells, self.lon_cells)
        g = sfft.rfft2(np.asarray(obs.values, dtype=self.dtype), s=self.fshape, workers=self.workers)
        # inverse transform only the rows holding requested lags
        rows = sfft.ifft(self._spec * np.conj(g), axis=0, workers=self.workers)[: self.lat_cells]
        full = sfft.irfft(rows, n=self.fshape[1], axis=1, workers=self.workers)
        return full[:, : self.lon_cells].astype(np.float64)


def correlate_fft(obs: Raster, map_crop: Raster, lat_cells: int, lon_cells: int) -> np.ndarray:
    """Same contract as :func:`correlate_spatial`, computed in the frequency domain."""
    _check_operands(obs, map_crop, lat_cells, lon_cells)
    return FftCorrelator(map_crop, lat_cells, lon_cells).correlate(obs)


# -- likelihoods ------------------------------------------------------------------


def scores_to_likelihood(scores: np.ndarray, temperature: float) -> np.ndarray:
    """Exponential weighting ``exp(score / T)`` normalized over the grid."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    z = (scores - scores.max()) / temperature
    p = np.exp(z)
    return p / p.sum()


def match_window(obs: Raster, grid: SearchGrid) -> Window:
    """Anchor-frame window the map must cover to score every grid offset."""
    hl, hn, _ = grid.half_cells
    ext = obs.extent
    return Window(
        ext.xmin - hn * grid.lon_step, ext.ymin - hl * grid.lat_step,
        ext.xmax + hn * grid.lon_step, ext.ymax + hl * grid.lat_step,
    )


def _check_grid_resolution(obs: Raster, grid: SearchGrid):
    for step in (grid.lat_step, grid.lon_step):
        if not math.isclose(step, obs.resolution, rel_tol=1e-9):
            raise ResolutionMismatch(
                f"grid step {step} must equal the observation resolution {obs.resolution}"
            )


def match_scores(obs: Raster, map_crop: Raster, grid: SearchGrid, workers: int | None = None) -> np.ndarray:
    """Raw correlation scores over the full ``(lat, lon, theta)`` grid.

    Single-precision observations are correlated in single precision; the
    rounding is far below what the score temperatures resolve.
    """
    n_lat, n_lon, _ = grid.shape
    _, _, th = grid.offsets()
    scores = np.zeros(grid.shape)
    if not obs.values.any() or not map_crop.values.any():
        return scores
    dtype = np.float32 if obs.values.dtype == np.float32 else np.float64
    corr = FftCorrelator(map_crop, n_lat, n_lon, workers=workers, dtype=dtype)
    for k, theta in enumerate(th):
        scores[:, :, k] = corr.correlate(rotate_raster(obs, float(theta)))
    return scores


def lane_likelihood(
    obs_lane: Raster,
    semantic_map: SemanticMap,
    grid: SearchGrid,
    temperature: float,
    truncation: float = DEFAULT_TRUNCATION,
    workers: int | None = None,
) -> LikelihoodGrid:
    _check_grid_resolution(obs_lane, grid)
    crop = rasterize_lanes_in_frame(
        semantic_map.lanes, grid.anchor, match_window(obs_lane, grid), obs_lane.resolution, truncation
    )
    scores = match_scores(obs_lane, crop, grid, workers)
    return LikelihoodGrid(grid, scores_to_likelihood(scores, temperature))


def sign_likelihood(
    obs_sign: Raster,
    semantic_map: SemanticMap,
    grid: SearchGrid,
    temperature: float,
    workers: int | None = None,
) -> LikelihoodGrid:
    _check_grid_resolution(obs_sign, grid)
    if not math.isclose(semantic_map.signs.resolution, obs_sign.resolution, rel_tol=1e-9):
        raise ResolutionMismatch("sign map and observation resolutions differ")
    crop = semantic_map.signs.in_frame(grid.anchor, match_window(obs_sign, grid))
    scores = match_scores(obs_sign, crop, grid, workers)
    return LikelihoodGrid(grid, scores_to_likelihood(scores, temperature))


def gps_likelihood(fix: GpsFix, utm_to_map: Pose2, grid: SearchGrid, sigma: float) -> LikelihoodGrid:
    """``exp(-|g - t|^2 / sigma^2)`` with ``g`` the fix mapped into the map frame."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    g = transform_point(utm_to_map, fix.position)
    x, y, _ = grid.cell_poses()
    # translation does not depend on the heading offset; use one slice
    d2 = (g.x - x[:, :, :1]) ** 2 + (g.y - y[:, :, :1]) ** 2
    logp = -d2 / (sigma * sigma)
    p = np.exp(logp - logp.max())
    p = np.broadcast_to(p, grid.shape)
    return LikelihoodGrid(grid, p / p.sum())
