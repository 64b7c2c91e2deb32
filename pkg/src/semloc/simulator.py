"""Synthetic highway snippets and noisy sensor streams.

Stands in for a recorded dataset and the learned lane / sign detectors: the
"detections" are renders of the true map in the true vehicle frame with
configurable corruption.  Every random draw comes from a generator keyed by
``(seed, channel, frame index)`` so channels are independent and a decimated
stream sees exactly the same draws as the full-rate one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bayes_filter import MotionIncrement
from .observation import GpsFix
from .pose import Point2, Pose2, inverse_compose, transform_point, transform_points
from .raster import Raster, Window
from .semantic_map import (
    DEFAULT_RESOLUTION,
    DEFAULT_SIGN_THRESHOLD,
    DEFAULT_TRUNCATION,
    LaneGraph,
    MapFrame,
    SemanticMap,
    rasterize_segments_in_frame,
    rasterize_signs,
)

# RNG channels
_ODOM, _GPS, _LANE, _SIGN, _BIAS, _FALSE_POS, _INIT = range(1, 8)
_MIN_VAR = 1e-10


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    length_m: float = 2000.0
    lane_count: int = 3
    lane_width_m: float = 3.7
    sign_spacing_m: float = 250.0
    max_curvature: float = 1.0 / 500.0
    speed_range: tuple[float, float] = (25.0, 30.0)
    rate_hz: float = 10.0
    vertex_spacing_m: float = 2.0
    margin_m: float = 80.0
    lane_drift_m: float = 0.3
    sign_width_range: tuple[float, float] = (1.2, 2.4)
    resolution: float = DEFAULT_RESOLUTION
    sign_threshold: float = DEFAULT_SIGN_THRESHOLD

    def validate(self):
        if self.lane_count < 1:
            raise ScenarioError("lane_count must be at least 1")
        if not self.length_m > 0:
            raise ScenarioError("length_m must be positive")
        if not self.lane_width_m > 0 or not self.sign_spacing_m > 0:
            raise ScenarioError("lane width and sign spacing must be positive")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise ScenarioError("speed_range must satisfy 0 < lo <= hi")
        if not self.rate_hz > 0 or not self.vertex_spacing_m > 0 or not self.resolution > 0:
            raise ScenarioError("rate, vertex spacing and resolution must be positive")
        if not 0 <= self.lane_drift_m < self.lane_width_m / 2:
            raise ScenarioError("lane drift must stay inside the lane")
        if not 0 <= self.max_curvature < 0.1:
            raise ScenarioError("max_curvature out of range")


@dataclass(frozen=True)
class NoiseConfig:
    gps_sigma_m: float = 2.0
    gps_dropout_prob: float = 0.05
    odom_vel_noise: float = 0.2  # m/s, longitudinal
    odom_lat_noise: float = 0.05  # m/s
    odom_yaw_noise: float = 0.002  # rad/s
    odom_bias: float = 0.005  # max |scale error|; per-run draw in [0.4, 1] x this
    odom_yaw_bias: float = 1e-4  # max |yaw-rate bias| rad/s
    lane_detect_noise_sigma: float = 0.1
    lane_dropout_prob: float = 0.1
    sign_detect_prob: float = 0.9
    sign_false_positive_rate: float = 0.0  # expected false blobs per frame
    sign_position_jitter_m: float = 0.1
    quantization_levels: int = 255  # detector output quantization; 0 disables

    def validate(self):
        for name in ("gps_dropout_prob", "lane_dropout_prob", "sign_detect_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ScenarioError(f"{name} must lie in [0, 1]")
        for name in (
            "gps_sigma_m", "odom_vel_noise", "odom_lat_noise", "odom_yaw_noise", "odom_bias",
            "odom_yaw_bias", "lane_detect_noise_sigma", "sign_false_positive_rate", "sign_position_jitter_m",
        ):
            if getattr(self, name) < 0:
                raise ScenarioError(f"{name} must be non-negative")
        if self.quantization_levels < 0:
            raise ScenarioError("quantization_levels must be non-negative")

    @classmethod
    def noiseless(cls) -> "NoiseConfig":
        return cls(
            gps_sigma_m=0.0, gps_dropout_prob=0.0, odom_vel_noise=0.0, odom_lat_noise=0.0, odom_yaw_noise=0.0,
            odom_bias=0.0, odom_yaw_bias=0.0, lane_detect_noise_sigma=0.0, lane_dropout_prob=0.0,
            sign_detect_prob=1.0, sign_false_positive_rate=0.0, sign_position_jitter_m=0.0, quantization_levels=0,
        )


@dataclass(frozen=True)
class SensorConfig:
    """BEV observation extent in the vehicle frame (x forward, y left)."""

    lon_min: float = -20.0
    lon_max: float = 40.0
    lat_half: float = 15.0
    resolution: float = DEFAULT_RESOLUTION
    truncation: float = DEFAULT_TRUNCATION
    dropout_chunk_segments: int = 5

    @property
    def window(self) -> Window:
        return Window(self.lon_min, -self.lat_half, self.lon_max, self.lat_half)


@dataclass(eq=False)
class Sign:
    center: Point2
    points: np.ndarray  # (N, 2) map frame
    confidence: np.ndarray  # (N,)


@dataclass(eq=False)
class Scenario:
    map: SemanticMap
    truth: list[Pose2]
    signs: list[Sign]
    meta: dict = field(default_factory=dict)

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(len(self.truth)) / self.meta["rate_hz"]


@dataclass(eq=False)
class ObservationFrame:
    index: int
    timestamp: float
    motion: MotionIncrement
    gps: GpsFix | None
    lane_obs: Raster | None
    sign_obs: Raster | None

    def __eq__(self, other):
        if not isinstance(other, ObservationFrame):
            return NotImplemented
        return (
            self.index == other.index
            and self.timestamp == other.timestamp
            and self.motion == other.motion
            and self.gps == other.gps
            and self.lane_obs == other.lane_obs
            and self.sign_obs == other.sign_obs
        )


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *keys])


# -- scenario ---------------------------------------------------------------------


def _centerline(cfg: ScenarioConfig, rng: np.random.Generator, ds: float):
    s = np.arange(-cfg.margin_m, cfg.length_m + cfg.margin_m + ds, ds)
    n_modes = 4
    wavelengths = rng.uniform(300.0, 1500.0, n_modes)
    phases = rng.uniform(0, 2 * np.pi, n_modes)
    amps = rng.uniform(0.2, 1.0, n_modes)
    shape = (amps[:, None] * np.sin(2 * np.pi * s[None, :] / wavelengths[:, None] + phases[:, None])).sum(0)
    kappa = cfg.max_curvature * rng.uniform(0.3, 1.0) * shape / amps.sum()
    theta0 = rng.uniform(-np.pi, np.pi)
    heading = theta0 + np.concatenate([[0.0], np.cumsum(0.5 * (kappa[1:] + kappa[:-1]) * ds)])
    x = np.concatenate([[0.0], np.cumsum(0.5 * (np.cos(heading[1:]) + np.cos(heading[:-1])) * ds)])
    y = np.concatenate([[0.0], np.cumsum(0.5 * (np.sin(heading[1:]) + np.sin(heading[:-1])) * ds)])
    return s, x, y, heading, kappa


def gen_scenario(cfg: ScenarioConfig = ScenarioConfig(), seed: int = 0) -> Scenario:
    """Deterministic synthetic highway snippet for ``(cfg, seed)``."""
    cfg.validate()
    rng = _rng(seed, 0)
    ds = 0.5
    s, cx, cy, heading, kappa = _centerline(cfg, rng, ds)
    nx, ny = -np.sin(heading), np.cos(heading)

    # lane boundaries
    step = max(1, int(round(cfg.vertex_spacing_m / ds)))
    idx = np.arange(0, len(s), step)
    if idx[-1] != len(s) - 1:
        idx = np.append(idx, len(s) - 1)
    offsets = (np.arange(cfg.lane_count + 1) - cfg.lane_count / 2.0) * cfg.lane_width_m
    boundaries = [np.stack([cx[idx] + o * nx[idx], cy[idx] + o * ny[idx]], axis=1) for o in offsets]
    lanes = LaneGraph(boundaries)

    # ground truth drive
    ego = int(rng.integers(cfg.lane_count))
    lane_center = (ego + 0.5 - cfg.lane_count / 2.0) * cfg.lane_width_m
    drift_amp = cfg.lane_drift_m * rng.uniform(0.3, 1.0)
    drift_wl = rng.uniform(300.0, 800.0)
    drift_ph = rng.uniform(0, 2 * np.pi)
    v_lo, v_hi = cfg.speed_range
    v_mid, v_amp = 0.5 * (v_lo + v_hi), 0.5 * (v_hi - v_lo)
    v_period = rng.uniform(30.0, 90.0)
    v_ph = rng.uniform(0, 2 * np.pi)
    dt = 1.0 / cfg.rate_hz

    truth = []
    t, pos = 0.0, 0.0
    while pos <= cfg.length_m:
        k = 2 * np.pi / drift_wl
        lat = lane_center + drift_amp * math.sin(k * pos + drift_ph)
        dlat = drift_amp * k * math.cos(k * pos + drift_ph)
        px = np.interp(pos, s, cx)
        py = np.interp(pos, s, cy)
        th = np.interp(pos, s, heading)
        kap = np.interp(pos, s, kappa)
        truth.append(
            Pose2(px - lat * math.sin(th), py + lat * math.cos(th), th + math.atan2(dlat, 1.0 - kap * lat))
        )
        v = v_mid + v_amp * math.sin(2 * np.pi * t / v_period + v_ph)
        t += dt
        pos += v * dt

    # signs: exponential gaps, clipped, placed off the road edge
    road_half = cfg.lane_count * cfg.lane_width_m / 2.0
    signs = []
    mean = cfg.sign_spacing_m
    at = rng.uniform(0.0, mean)
    while at <= cfg.length_m:
        side = -1.0 if rng.random() < 0.8 else 1.0
        gap_out = rng.uniform(1.5, 4.0)
        width = rng.uniform(*cfg.sign_width_range)
        th = np.interp(at, s, heading)
        bx, by = np.interp(at, s, cx), np.interp(at, s, cy)
        tvec = np.array([math.cos(th), math.sin(th)])
        nvec = np.array([-math.sin(th), math.cos(th)])
        lat0 = side * (road_half + gap_out)
        along = np.arange(0.0, width + 1e-9, cfg.resolution) * side
        rows = []
        for thick in (0.0, cfg.resolution):
            rows.append(np.array([bx, by]) + np.outer(lat0 + along, nvec) + thick * tvec)
        pts = np.vstack(rows)
        conf = rng.uniform(0.6, 1.0, len(pts))
        center = pts.mean(axis=0)
        signs.append(Sign(Point2(*center), pts, conf))
        at += float(np.clip(rng.exponential(mean), 0.2 * mean, 3.0 * mean))

    all_pts = np.vstack(boundaries + [sg.points for sg in signs])
    lo = np.floor(all_pts.min(axis=0)) - 5.0
    hi = np.ceil(all_pts.max(axis=0)) + 5.0
    window = Window(lo[0], lo[1], hi[0], hi[1])
    sign_points = [(Point2(*p), float(c)) for sg in signs for p, c in zip(sg.points, sg.confidence)]
    sign_map = rasterize_signs(sign_points, window, cfg.resolution, cfg.sign_threshold)

    utm = Pose2(
        float(rng.uniform(3e5, 7e5)), float(rng.uniform(4.0e6, 5.5e6)), float(rng.uniform(-0.02, 0.02))
    )
    frame = MapFrame(utm_to_map=utm.inverse(), name=f"synthetic-{seed}")
    meta = {
        "seed": int(seed),
        "length_m": cfg.length_m,
        "lane_count": cfg.lane_count,
        "lane_width_m": cfg.lane_width_m,
        "sign_spacing_m": cfg.sign_spacing_m,
        "rate_hz": cfg.rate_hz,
        "ego_lane": ego,
        "ego_lane_offset_m": lane_center,
    }
    return Scenario(SemanticMap(lanes, sign_map, frame), truth, signs, meta)


# -- sensors ------------------------------------------------------------------------


def _quantize(values: np.ndarray, levels: int) -> np.ndarray:
    if levels <= 0:
        return values
    return (np.rint(values * levels).astype(np.float32) / np.float32(levels)).astype(np.float32)


class _SensorModel:
    def __init__(self, sc: Scenario, noise: NoiseConfig, seed: int, sensor: SensorConfig):
        noise.validate()
        self.sc = sc
        self.noise = noise
        self.seed = int(seed)
        self.sensor = sensor
        self.dt = 1.0 / sc.meta["rate_hz"]
        brng = _rng(seed, _BIAS)
        self.scale_bias = noise.odom_bias * brng.uniform(0.4, 1.0) * brng.choice([-1.0, 1.0])
        self.yaw_bias = noise.odom_yaw_bias * brng.uniform(0.4, 1.0) * brng.choice([-1.0, 1.0])
        segs, chunk_ids = [], []
        base = 0
        for line in sc.map.lanes.boundaries:
            seg = np.hstack([line[:-1], line[1:]])
            segs.append(seg)
            chunk_ids.append(base + np.arange(len(seg)) // max(1, sensor.dropout_chunk_segments))
            base = int(chunk_ids[-1].max()) + 1
        self.segments = np.vstack(segs) if segs else np.zeros((0, 4))
        self.chunk_ids = np.concatenate(chunk_ids) if chunk_ids else np.zeros(0, np.int64)
        self.n_chunks = base
        self.utm_from_map = sc.map.frame.utm_to_map.inverse()
        self.sign_centers = (
            np.array([[sg.center.x, sg.center.y] for sg in sc.signs]) if sc.signs else np.zeros((0, 2))
        )

    def odometry(self, i: int) -> MotionIncrement:
        """Noisy increment from truth pose ``i-1`` to ``i``."""
        n, dt = self.noise, self.dt
        true = inverse_compose(self.sc.truth[i], self.sc.truth[i - 1])
        r = _rng(self.seed, _ODOM, i)
        e = r.standard_normal(3)
        sx, sy, st = n.odom_vel_noise * dt, n.odom_lat_noise * dt, n.odom_yaw_noise * dt
        delta = Pose2(
            true.x * (1.0 + self.scale_bias) + sx * e[0],
            true.y + sy * e[1],
            true.theta + self.yaw_bias * dt + st * e[2],
        )
        cov = np.diag([max(sx * sx, _MIN_VAR), max(sy * sy, _MIN_VAR), max(st * st, _MIN_VAR)])
        return MotionIncrement(delta, cov)

    def gps(self, i: int) -> GpsFix | None:
        n = self.noise
        r = _rng(self.seed, _GPS, i)
        drop, e = r.random(), r.standard_normal(2)
        if drop < n.gps_dropout_prob:
            return None
        p = self.sc.truth[i]
        noisy = Point2(p.x + n.gps_sigma_m * e[0], p.y + n.gps_sigma_m * e[1])
        return GpsFix(transform_point(self.utm_from_map, noisy), i * self.dt)

    def lane(self, i: int) -> Raster:
        n, sensor = self.noise, self.sensor
        r = _rng(self.seed, _LANE, i)
        keep = r.random(self.n_chunks) >= n.lane_dropout_prob
        segs = self.segments[keep[self.chunk_ids]]
        obs = rasterize_segments_in_frame(segs, self.sc.truth[i], sensor.window, sensor.resolution, sensor.truncation)
        vals = obs.values
        if n.lane_detect_noise_sigma > 0:
            vals = np.clip(vals + n.lane_detect_noise_sigma * r.standard_normal(vals.shape), 0.0, 1.0)
        return Raster(obs.origin, obs.resolution, _quantize(vals, n.quantization_levels))

    def sign(self, i: int) -> Raster:
        n, sensor = self.noise, self.sensor
        win = sensor.window
        out = np.zeros(win.shape(sensor.resolution))
        pose = self.sc.truth[i]
        r = _rng(self.seed, _SIGN, i)
        if len(self.sign_centers):
            local_c = _to_frame(pose, self.sign_centers)
            draws = r.random(len(self.sc.signs))
            jit = r.standard_normal((len(self.sc.signs), 2)) * n.sign_position_jitter_m
            for k, sg in enumerate(self.sc.signs):
                cxl, cyl = local_c[k]
                if not (win.xmin <= cxl <= win.xmax and win.ymin <= cyl <= win.ymax):
                    continue
                if draws[k] >= n.sign_detect_prob:
                    continue
                pts = _to_frame(pose, sg.points) + jit[k]
                _splat(out, pts, sg.confidence, win, sensor.resolution)
        if n.sign_false_positive_rate > 0:
            fr = _rng(self.seed, _FALSE_POS, i)
            for _ in range(fr.poisson(n.sign_false_positive_rate)):
                c = np.array([fr.uniform(win.xmin, win.xmax), fr.uniform(win.ymin, win.ymax)])
                ang = fr.uniform(0, np.pi)
                length = fr.uniform(0.5, 2.0)
                along = np.arange(0.0, length, sensor.resolution)
                pts = c + np.outer(along, [math.cos(ang), math.sin(ang)])
                _splat(out, pts, fr.uniform(0.5, 1.0, len(pts)), win, sensor.resolution)
        origin = Point2(win.xmin, win.ymin)
        return Raster(origin, sensor.resolution, _quantize(out, n.quantization_levels))


def _to_frame(pose: Pose2, pts: np.ndarray) -> np.ndarray:
    return transform_points(pose.inverse(), pts)


def _splat(out: np.ndarray, pts: np.ndarray, conf: np.ndarray, win: Window, res: float):
    cols = np.rint((pts[:, 0] - win.xmin) / res).astype(np.int64)
    rows = np.rint((pts[:, 1] - win.ymin) / res).astype(np.int64)
    ok = (rows >= 0) & (rows < out.shape[0]) & (cols >= 0) & (cols < out.shape[1])
    np.maximum.at(out, (rows[ok], cols[ok]), np.asarray(conf)[ok])


def _identity_motion() -> MotionIncrement:
    return MotionIncrement(Pose2(), np.eye(3) * _MIN_VAR)


def iter_frames(
    sc: Scenario,
    noise: NoiseConfig = NoiseConfig(),
    seed: int = 0,
    sensor: SensorConfig = SensorConfig(),
    stride: int = 1,
    render: bool = True,
):
    """Yield observation frames at truth indices ``0, stride, 2*stride, ...``.

    Odometry between emitted frames is chained from the full-rate increments.
    With ``render=False`` the lane and sign rasters are left out (``None``).
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    model = _SensorModel(sc, noise, seed, sensor)
    motion = _identity_motion()
    for i in range(len(sc.truth)):
        if i > 0:
            inc = model.odometry(i)
            motion = inc if motion is None else motion.then(inc)
        if i % stride:
            continue
        yield ObservationFrame(
            index=i,
            timestamp=i * model.dt,
            motion=motion,
            gps=model.gps(i),
            lane_obs=model.lane(i) if render else None,
            sign_obs=model.sign(i) if render else None,
        )
        motion = None


def simulate_sensors(
    sc: Scenario,
    noise: NoiseConfig = NoiseConfig(),
    seed: int = 0,
    sensor: SensorConfig = SensorConfig(),
    stride: int = 1,
) -> list[ObservationFrame]:
    return list(iter_frames(sc, noise, seed, sensor, stride))


def dead_reckon(start: Pose2, frames) -> list[Pose2]:
    """Integrate the frames' motion increments from ``start``."""
    out = []
    pose = start
    for f in frames:
        pose = pose @ f.motion.delta
        out.append(pose)
    return out


def initial_pose(sc: Scenario, first: ObservationFrame) -> Pose2:
    """Starting pose for every method: first GPS fix (if any) with the true heading."""
    truth = sc.truth[first.index]
    if first.gps is None:
        return truth
    p = transform_point(sc.map.frame.utm_to_map, first.gps.position)
    return Pose2(p.x, p.y, truth.theta)
