"""Sparse HD map: lane-boundary polylines plus a traffic-sign occupancy layer.

Also holds the inverse truncated distance rasterizer used both to render the
map side of lane matching and (by the simulator) the detector output, and
the versioned binary map file format.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pose import Point2, Pose2, inverse_transform_points
from .raster import Raster, SparseRaster, Window

MAP_MAGIC = b"SLMP"
MAP_VERSION = 1
DEFAULT_RESOLUTION = 0.05
DEFAULT_TRUNCATION = 1.0
DEFAULT_SIGN_THRESHOLD = 0.5
MIB = float(1 << 20)


class MapFormatError(ValueError):
    """Malformed map file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class MapVersionError(MapFormatError):
    pass


# -- types --------------------------------------------------------------------


@dataclass(eq=False)
class LaneGraph:
    boundaries: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        out = []
        for i, line in enumerate(self.boundaries):
            arr = np.array(line, dtype=np.float64).reshape(-1, 2)
            if len(arr) < 2:
                raise ValueError(f"polyline {i} has fewer than 2 vertices")
            if np.any(np.all(np.diff(arr, axis=0) == 0, axis=1)):
                raise ValueError(f"polyline {i} repeats a vertex")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"polyline {i} has non-finite vertices")
            out.append(arr)
        self.boundaries = out
        self._segments = None

    def __eq__(self, other):
        if not isinstance(other, LaneGraph):
            return NotImplemented
        return len(self.boundaries) == len(other.boundaries) and all(
            np.array_equal(a, b) for a, b in zip(self.boundaries, other.boundaries)
        )

    def segments(self) -> np.ndarray:
        """All boundary segments as an ``(M, 4)`` array of ``ax, ay, bx, by``."""
        if self._segments is None:
            parts = [np.hstack([b[:-1], b[1:]]) for b in self.boundaries]
            self._segments = np.vstack(parts) if parts else np.zeros((0, 4))
        return self._segments

    def vertex_count(self) -> int:
        return sum(len(b) for b in self.boundaries)


@dataclass(eq=False)
class SignMap:
    raster: SparseRaster

    @property
    def resolution(self) -> float:
        return self.raster.resolution

    def __eq__(self, other):
        if not isinstance(other, SignMap):
            return NotImplemented
        return self.raster == other.raster

    def crop(self, window: Window) -> Raster:
        return self.raster.crop(window)

    def in_frame(self, pose: Pose2, window: Window) -> Raster:
        """Sign occupancy resampled into the frame of ``pose`` over ``window``.

        Nonzero map cells are carried over by nearest-cell splatting with max
        aggregation; the layer is sparse so this is exact up to cell snapping.
        """
        out = Raster.zeros(window, self.resolution)
        if self.raster.nnz == 0:
            return out
        # cheap map-frame prefilter: circle around the window's center
        cx, cy = 0.5 * (window.xmin + window.xmax), 0.5 * (window.ymin + window.ymax)
        c, s = math.cos(pose.theta), math.sin(pose.theta)
        mx, my = pose.x + c * cx - s * cy, pose.y + s * cx + c * cy
        radius = 0.5 * math.hypot(window.width_m, window.height_m) + 2 * self.resolution
        pts = self.raster.cell_points()
        near = (np.abs(pts[:, 0] - mx) <= radius) & (np.abs(pts[:, 1] - my) <= radius)
        if not near.any():
            return out
        local = inverse_transform_points(pose, pts[near])
        vals = self.raster.values[near]
        cols = np.rint((local[:, 0] - window.xmin) / self.resolution).astype(np.int64)
        rows = np.rint((local[:, 1] - window.ymin) / self.resolution).astype(np.int64)
        ok = (rows >= 0) & (rows < out.height) & (cols >= 0) & (cols < out.width)
        np.maximum.at(out.values, (rows[ok], cols[ok]), vals[ok])
        return out


@dataclass(frozen=True)
class MapFrame:
    """Frame metadata; ``utm_to_map`` maps UTM coordinates into the map frame."""

    utm_to_map: Pose2 = Pose2()
    name: str = ""


@dataclass(eq=False)
class SemanticMap:
    lanes: LaneGraph
    signs: SignMap
    frame: MapFrame = MapFrame()

    def __eq__(self, other):
        if not isinstance(other, SemanticMap):
            return NotImplemented
        return self.lanes == other.lanes and self.signs == other.signs and self.frame == other.frame

    def bounds(self) -> Window | None:
        pts = [b for b in self.lanes.boundaries]
        if self.signs.raster.nnz:
            pts.append(self.signs.raster.cell_points())
        if not pts:
            return None
        allp = np.vstack(pts)
        return Window(*allp.min(axis=0), *allp.max(axis=0))

    def area_km2(self, margin: float = 0.0) -> float:
        """Area of the map's bounding box (optionally grown by ``margin`` meters)."""
        w = self.bounds()
        if w is None:
            return 0.0
        w = w.expand(margin)
        return w.width_m * w.height_m / 1e6


# -- lane rasterization ----------------------------------------------------------


def segment_distance(px, py, ax, ay, bx, by):
    """Euclidean distance from points ``(px, py)`` to segment ``a-b``."""
    ux, uy = bx - ax, by - ay
    wx, wy = px - ax, py - ay
    den = ux * ux + uy * uy
    # a segment too short to square (underflow) is treated as its start point
    t = np.clip((wx * ux + wy * uy) / den, 0.0, 1.0) if den > 0 else 0.0
    dx = wx - t * ux
    dy = wy - t * uy
    return np.sqrt(dx * dx + dy * dy)


def _rasterize_segments(segs: np.ndarray, window: Window, resolution: float, truncation: float) -> Raster:
    out = Raster.zeros(window, resolution)
    vals = out.values
    h, w = vals.shape
    ox, oy = window.xmin, window.ymin
    if len(segs) == 0:
        return out
    lo_x = np.minimum(segs[:, 0], segs[:, 2]) - truncation
    hi_x = np.maximum(segs[:, 0], segs[:, 2]) + truncation
    lo_y = np.minimum(segs[:, 1], segs[:, 3]) - truncation
    hi_y = np.maximum(segs[:, 1], segs[:, 3]) + truncation
    # one spare cell on each side so rounding never drops a cell with ramp > 0
    c0 = np.maximum(np.ceil((lo_x - ox) / resolution) - 1, 0).astype(np.int64)
    c1 = np.minimum(np.floor((hi_x - ox) / resolution) + 1, w - 1).astype(np.int64)
    r0 = np.maximum(np.ceil((lo_y - oy) / resolution) - 1, 0).astype(np.int64)
    r1 = np.minimum(np.floor((hi_y - oy) / resolution) + 1, h - 1).astype(np.int64)
    hits = np.nonzero((c1 >= c0) & (r1 >= r0))[0]
    xs = ox + np.arange(w) * resolution
    ys = oy + np.arange(h) * resolution
    for k in hits:
        ax, ay, bx, by = segs[k]
        px = xs[c0[k] : c1[k] + 1][None, :]
        py = ys[r0[k] : r1[k] + 1][:, None]
        d = segment_distance(px, py, ax, ay, bx, by)
        ramp = np.maximum(0.0, (truncation - d) / truncation)
        block = vals[r0[k] : r1[k] + 1, c0[k] : c1[k] + 1]
        np.maximum(block, ramp, out=block)
    return out


def rasterize_lanes(
    lanes: LaneGraph, window: Window, resolution: float = DEFAULT_RESOLUTION, truncation: float = DEFAULT_TRUNCATION
) -> Raster:
    """Inverse truncated distance raster of the lane boundaries over ``window``.

    Cell value is ``max(0, (truncation - d) / truncation)`` with ``d`` the
    distance from the cell center to the nearest boundary segment.
    """
    if resolution <= 0 or truncation <= 0:
        raise ValueError("resolution and truncation must be positive")
    return _rasterize_segments(lanes.segments(), window, resolution, truncation)


def rasterize_lanes_in_frame(
    lanes: LaneGraph,
    pose: Pose2,
    window: Window,
    resolution: float = DEFAULT_RESOLUTION,
    truncation: float = DEFAULT_TRUNCATION,
) -> Raster:
    """Like :func:`rasterize_lanes` but ``window`` is given in the frame of ``pose``."""
    return rasterize_segments_in_frame(lanes.segments(), pose, window, resolution, truncation)


def rasterize_segments_in_frame(
    segs: np.ndarray,
    pose: Pose2,
    window: Window,
    resolution: float = DEFAULT_RESOLUTION,
    truncation: float = DEFAULT_TRUNCATION,
) -> Raster:
    """Inverse truncated distance raster of map-frame segments ``(M, 4)`` seen from ``pose``."""
    if len(segs):
        cx, cy = 0.5 * (window.xmin + window.xmax), 0.5 * (window.ymin + window.ymax)
        c, s = math.cos(pose.theta), math.sin(pose.theta)
        mx, my = pose.x + c * cx - s * cy, pose.y + s * cx + c * cy
        reach = 0.5 * math.hypot(window.width_m, window.height_m) + truncation
        near = (
            (np.minimum(segs[:, 0], segs[:, 2]) <= mx + reach)
            & (np.maximum(segs[:, 0], segs[:, 2]) >= mx - reach)
            & (np.minimum(segs[:, 1], segs[:, 3]) <= my + reach)
            & (np.maximum(segs[:, 1], segs[:, 3]) >= my - reach)
        )
        sel = segs[near]
        a = inverse_transform_points(pose, sel[:, :2])
        b = inverse_transform_points(pose, sel[:, 2:])
        segs = np.hstack([a, b])
    return _rasterize_segments(segs, window, resolution, truncation)


# -- sign rasterization ------------------------------------------------------------


def rasterize_signs(
    sign_points,
    window: Window,
    resolution: float = DEFAULT_RESOLUTION,
    threshold: float = DEFAULT_SIGN_THRESHOLD,
) -> SignMap:
    """Rasterize ``(Point2, confidence)`` pairs, max-reducing per cell.

    Points below ``threshold`` confidence or outside ``window`` are dropped.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    shape = window.shape(resolution)
    cells: dict[tuple[int, int], float] = {}
    for p, conf in sign_points:
        if not 0.0 <= conf <= 1.0:
            raise ValueError(f"confidence {conf} outside [0, 1]")
        if conf < threshold or conf == 0.0:
            continue
        c = int(round((p.x - window.xmin) / resolution))
        r = int(round((p.y - window.ymin) / resolution))
        if 0 <= r < shape[0] and 0 <= c < shape[1]:
            key = (r, c)
            if conf > cells.get(key, 0.0):
                cells[key] = conf
    keys = sorted(cells)
    rows = np.array([k[0] for k in keys], dtype=np.int64)
    cols = np.array([k[1] for k in keys], dtype=np.int64)
    vals = np.array([cells[k] for k in keys], dtype=np.float64)
    return SignMap(SparseRaster(Point2(window.xmin, window.ymin), resolution, shape, rows, cols, vals))


def empty_map(resolution: float = DEFAULT_RESOLUTION) -> SemanticMap:
    return SemanticMap(LaneGraph([]), SignMap(SparseRaster(Point2(0.0, 0.0), resolution, (1, 1))))


# -- serialization ---------------------------------------------------------------

_HEAD = struct.Struct("<4sHH3dH")
_SIGN_HEAD = struct.Struct("<3dIIIQ")
_U32 = struct.Struct("<I")
_CELL = np.dtype([("row", "<u4"), ("col", "<u4"), ("value", "<f8")])


def serialize_map(m: SemanticMap) -> bytes:
    name = m.frame.name.encode("utf-8")
    T = m.frame.utm_to_map
    sr = m.signs.raster
    parts = [
        _HEAD.pack(MAP_MAGIC, MAP_VERSION, 0, T.x, T.y, T.theta, len(name)),
        name,
        _SIGN_HEAD.pack(sr.resolution, sr.origin.x, sr.origin.y, sr.height, sr.width, len(m.lanes.boundaries), sr.nnz),
    ]
    for line in m.lanes.boundaries:
        parts.append(_U32.pack(len(line)))
        parts.append(np.ascontiguousarray(line, dtype="<f8").tobytes())
    cells = np.empty(sr.nnz, dtype=_CELL)
    cells["row"], cells["col"], cells["value"] = sr.rows, sr.cols, sr.values
    parts.append(cells.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise MapFormatError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct, what: str):
        return st.unpack(self.take(st.size, what))


def deserialize_map(buf: bytes) -> SemanticMap:
    rd = _Reader(buf)
    magic, version, _flags, tx, ty, tt, name_len = rd.unpack(_HEAD, "header")
    if magic != MAP_MAGIC:
        raise MapFormatError(f"bad magic {magic!r}", 0)
    if version != MAP_VERSION:
        raise MapVersionError(f"unsupported map version {version} (expected {MAP_VERSION})", 4)
    at = rd.pos
    try:
        name = rd.take(name_len, "frame name").decode("utf-8")
    except UnicodeDecodeError:
        raise MapFormatError("frame name is not valid UTF-8", at) from None
    res, ox, oy, h, w, n_lines, n_cells = rd.unpack(_SIGN_HEAD, "sign header")
    if not res > 0:
        raise MapFormatError("non-positive sign resolution", rd.pos - _SIGN_HEAD.size)
    lines = []
    for i in range(n_lines):
        at = rd.pos
        (n,) = rd.unpack(_U32, f"vertex count of polyline {i}")
        arr = np.frombuffer(rd.take(16 * n, f"vertices of polyline {i}"), dtype="<f8").reshape(n, 2)
        try:
            lines.append(LaneGraph([arr]).boundaries[0])
        except ValueError as exc:
            raise MapFormatError(str(exc), at) from None
    at = rd.pos
    cells = np.frombuffer(rd.take(_CELL.itemsize * n_cells, "sign cells"), dtype=_CELL)
    if rd.pos != len(buf):
        raise MapFormatError(f"{len(buf) - rd.pos} trailing bytes", rd.pos)
    try:
        sr = SparseRaster(
            Point2(ox, oy), res, (h, w),
            cells["row"].astype(np.int64), cells["col"].astype(np.int64), cells["value"].astype(np.float64),
        )
    except ValueError as exc:
        raise MapFormatError(str(exc), at) from None
    lanes = LaneGraph(lines)
    return SemanticMap(lanes, SignMap(sr), MapFrame(Pose2(tx, ty, tt), name))


def save_map(m: SemanticMap, path) -> int:
    data = serialize_map(m)
    Path(path).write_bytes(data)
    return len(data)


def load_map(path) -> SemanticMap:
    return deserialize_map(Path(path).read_bytes())


def storage_report(m: SemanticMap, area_km2: float) -> dict:
    if not area_km2 > 0:
        raise ValueError("area_km2 must be positive")
    n = len(serialize_map(m))
    return {"bytes": n, "area_km2": area_km2, "MiB_per_km2": n / MIB / area_km2}


def dense_raster_bytes(area_km2: float, resolution: float = DEFAULT_RESOLUTION, bytes_per_cell: int = 1) -> int:
    """Size of a dense 8-bit intensity-style raster covering ``area_km2``."""
    cells = area_km2 * 1e6 / (resolution * resolution)
    return int(math.ceil(cells)) * bytes_per_cell
