"""Histogram Bayes filter over a pose grid that follows the vehicle.

Each step places a fresh grid at the dead-reckoned pose (previous estimate
composed with the motion increment), pushes the previous belief through the
Gaussian motion model, multiplies in whatever observation likelihoods are
available and reads out a soft-argmax pose.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .observation import (
    LikelihoodGrid,
    SearchGrid,
    gps_likelihood,
    lane_likelihood,
    sign_likelihood,
)
from .pose import Pose2, compose, compose_arrays, inverse_compose, inverse_compose_arrays

log = logging.getLogger(__name__)


@dataclass(eq=False)
class MotionIncrement:
    """Relative motion in the previous vehicle frame with its 3x3 covariance."""

    delta: Pose2
    covariance: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=np.float64)
        if cov.shape != (3, 3):
            raise ValueError("covariance must be 3x3")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-15):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("covariance must be positive definite")
        self.covariance = cov

    def __eq__(self, other):
        if not isinstance(other, MotionIncrement):
            return NotImplemented
        return self.delta == other.delta and np.array_equal(self.covariance, other.covariance)

    def then(self, other: "MotionIncrement") -> "MotionIncrement":
        """Chain two increments, propagating covariance to first order."""
        a, b = self.delta, other.delta
        c, s = math.cos(a.theta), math.sin(a.theta)
        ja = np.array([[1.0, 0.0, -s * b.x - c * b.y], [0.0, 1.0, c * b.x - s * b.y], [0.0, 0.0, 1.0]])
        jb = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        cov = ja @ self.covariance @ ja.T + jb @ other.covariance @ jb.T
        return MotionIncrement(compose(a, b), 0.5 * (cov + cov.T))


@dataclass(eq=False)
class BeliefGrid:
    grid: SearchGrid
    values: np.ndarray
    leakage: float = 0.0
    degraded: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values shape {self.values.shape} != grid shape {self.grid.shape}")

    @classmethod
    def uniform(cls, grid: SearchGrid) -> "BeliefGrid":
        return cls(grid, np.full(grid.shape, 1.0 / grid.size))

    def total(self) -> float:
        return float(self.values.sum())


@dataclass(frozen=True)
class FilterConfig:
    alpha: float = 1.0
    sigma_gps: float = 2.8
    lane_temperature: float = 120.0
    sign_temperature: float = 4.0
    motion_window: int | None = None
    motion_nsigma: float = 3.0
    prune: float = 1e-12
    # added in quadrature to the reported motion covariance: a fixed floor
    # (lon m, lat m, heading rad) plus a part proportional to distance travelled
    motion_sigma_floor: tuple[float, float, float] = (0.02, 0.02, math.radians(0.3))
    motion_sigma_per_m: tuple[float, float] = (0.004, 0.001)
    # lanes on a curve trade heading for longitudinal offset (about 8.7 m per
    # degree at 1/500 curvature), so the filter uses quarter-degree heading cells
    grid: SearchGrid = SearchGrid(theta_range=math.radians(0.5), theta_step=math.radians(0.25))
    use_lane: bool = True
    use_sign: bool = True
    use_gps: bool = True
    truncation: float = 1.0
    # re-anchor on the translation lattice only; heading follows the estimate
    snap_heading: bool = False
    # half-width (m) of the one-off lateral search that picks the lane before
    # the first step; 0 starts directly at the given anchor
    acquire_lat_range: float = 6.0

    def __post_init__(self):
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        for name in ("sigma_gps", "lane_temperature", "sign_temperature", "motion_nsigma", "truncation"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.prune < 1:
            raise ValueError("prune must lie in [0, 1)")
        if self.motion_window is not None and self.motion_window < 0:
            raise ValueError("motion_window must be non-negative")
        if self.acquire_lat_range < 0:
            raise ValueError("acquire_lat_range must be non-negative")


# -- prediction -------------------------------------------------------------------


def _window_half_widths(grid: SearchGrid, cov: np.ndarray, window: int | None, nsigma: float):
    n_lat, n_lon, n_th = grid.shape
    if window is not None:
        return min(window, n_lat - 1), min(window, n_lon - 1), min(window, n_th - 1)
    s_lon, s_lat, s_th = np.sqrt(np.diag(cov))
    w_lat = int(math.ceil(nsigma * s_lat / grid.lat_step)) + 1
    w_lon = int(math.ceil(nsigma * s_lon / grid.lon_step)) + 1
    w_th = int(math.ceil(nsigma * s_th / grid.theta_step)) + 1
    return min(w_lat, n_lat - 1), min(w_lon, n_lon - 1), min(w_th, n_th - 1)


@njit(cache=True)
def _wrap(a):
    out = a - 2.0 * math.pi * math.floor((a + math.pi) / (2.0 * math.pi))
    if out <= -math.pi:
        out += 2.0 * math.pi
    return out


@njit(cache=True)
def _push(b, floor, px, py, pt, X, Y, T, anchor, steps, half, win, info, out):
    """Scatter every previous cell's mass onto a box of new cells around its
    propagated mean, weighted by the Gaussian motion density.

    Along a grid row the exponent is quadratic in the column index, so the
    density is evaluated with one ``exp`` at the row's peak and geometric
    updates walking outwards from it.
    """
    n_lat, n_lon, n_th = b.shape
    ax, ay, at = anchor
    c1, s1 = math.cos(at), math.sin(at)
    for i in range(n_lat):
        for j in range(n_lon):
            for k in range(n_th):
                w = b[i, j, k]
                if w <= floor:
                    continue
                mx, my, mt = px[i, j, k], py[i, j, k], pt[i, j, k]
                dx, dy = mx - ax, my - ay
                ic = min(max(int(np.rint((-s1 * dx + c1 * dy) / steps[0])) + half[0], 0), n_lat - 1)
                jc = min(max(int(np.rint((c1 * dx + s1 * dy) / steps[1])) + half[1], 0), n_lon - 1)
                kc = min(max(int(np.rint(_wrap(mt - at) / steps[2])) + half[2], 0), n_th - 1)
                c, s = math.cos(mt), math.sin(mt)
                j0, j1 = max(jc - win[1], 0), min(jc + win[1] + 1, n_lon)
                for kk in range(max(kc - win[2], 0), min(kc + win[2] + 1, n_th)):
                    rt = _wrap(T[0, 0, kk] - mt)
                    for ii in range(max(ic - win[0], 0), min(ic + win[0] + 1, n_lat)):
                        # residual at the row start and its per-column increment
                        ddx, ddy = X[ii, j0, kk] - mx, Y[ii, j0, kk] - my
                        rx0, ry0 = c * ddx + s * ddy, -s * ddx + c * ddy
                        if j1 - j0 > 1:
                            ex, ey = X[ii, j0 + 1, kk] - X[ii, j0, kk], Y[ii, j0 + 1, kk] - Y[ii, j0, kk]
                        else:
                            ex, ey = 0.0, 0.0
                        drx, dry = c * ex + s * ey, -s * ex + c * ey
                        # q(j0 + m) = q0 + 2 m lin + m^2 quad
                        lin = (
                            info[0, 0] * rx0 * drx + info[1, 1] * ry0 * dry
                            + info[0, 1] * (rx0 * dry + ry0 * drx) + info[0, 2] * drx * rt + info[1, 2] * dry * rt
                        )
                        quad = info[0, 0] * drx * drx + info[1, 1] * dry * dry + 2.0 * info[0, 1] * drx * dry
                        if quad > 0.0:
                            m = min(max(int(np.rint(-lin / quad)), 0), j1 - j0 - 1)
                        else:
                            m = 0
                        rx, ry = rx0 + m * drx, ry0 + m * dry
                        q = (
                            info[0, 0] * rx * rx + info[1, 1] * ry * ry + info[2, 2] * rt * rt
                            + 2.0 * (info[0, 1] * rx * ry + info[0, 2] * rx * rt + info[1, 2] * ry * rt)
                        )
                        e0 = w * math.exp(-0.5 * q)
                        if e0 == 0.0:
                            continue
                        lin_m = lin + m * quad
                        h = math.exp(-quad)
                        # forward from the peak
                        e, g = e0, math.exp(-lin_m - 0.5 * quad)
                        for jj in range(j0 + m, j1):
                            out[ii, jj, kk] += e
                            e *= g
                            g *= h
                            if e == 0.0:
                                break
                        # backward
                        e, g = e0, math.exp(lin_m - 0.5 * quad)
                        for jj in range(j0 + m - 1, j0 - 1, -1):
                            e *= g
                            g *= h
                            if e == 0.0:
                                break
                            out[ii, jj, kk] += e


def predict(
    prev: BeliefGrid,
    inc: MotionIncrement,
    new_anchor: Pose2,
    window: int | None = None,
    nsigma: float = 3.0,
    prune: float = 0.0,
) -> BeliefGrid:
    """Motion update onto a grid anchored at ``new_anchor``.

    ``Bel(x) = sum_{x'} N(x (-) (x' (+) delta); 0, cov) Bel_prev(x')``.  Each
    previous cell ``x'`` only reaches a box of new cells around the one nearest
    to ``x' (+) delta``; the box half-width is ``window`` cells per axis, or
    ``nsigma`` standard deviations when ``window`` is None.  A window spanning
    the grid gives the full double sum.  Previous cells holding at most
    ``prune`` times the peak mass are skipped (0 keeps every cell).
    """
    g0 = prev.grid
    g1 = g0.with_anchor(new_anchor)
    a0, d = g0.anchor, inc.delta
    info = np.linalg.inv(inc.covariance)
    win = np.array(_window_half_widths(g0, inc.covariance, window, nsigma), dtype=np.int64)

    # previous cells pushed through the motion: P = (a0 (+) o') (+) delta
    lat, lon, th = g0.offsets()
    LAT, LON, TH = np.meshgrid(lat, lon, th, indexing="ij")
    qx, qy, qt = compose_arrays(a0.x, a0.y, a0.theta, LON, LAT, TH)
    px, py, pt = compose_arrays(qx, qy, qt, d.x, d.y, d.theta)
    X, Y, T = g1.cell_poses()
    b = prev.values
    acc = np.zeros(g1.shape)
    _push(
        b, prune * b.max(), px, py, pt, X, Y, T,
        np.array([new_anchor.x, new_anchor.y, new_anchor.theta]),
        np.array([g0.lat_step, g0.lon_step, g0.theta_step]),
        np.array(g0.half_cells, dtype=np.int64), win, info, acc,
    )

    # mass whose propagated mean leaves the new grid
    hl, hn, _ = g0.half_cells
    ex, ey, _ = inverse_compose_arrays(px, py, pt, new_anchor.x, new_anchor.y, new_anchor.theta)
    inside = (np.abs(ey) <= (hl + 0.5) * g0.lat_step) & (np.abs(ex) <= (hn + 0.5) * g0.lon_step)
    leakage = float(b[~inside].sum() / max(b.sum(), 1e-300))

    total = acc.sum()
    if not total > 0:
        log.warning("prediction left no mass on the grid; resetting to uniform")
        return BeliefGrid(g1, np.full(g1.shape, 1.0 / g1.size), leakage=1.0, degraded=True)
    return BeliefGrid(g1, acc / total, leakage=leakage)


# -- measurement update ---------------------------------------------------------


def update(prior: BeliefGrid, factors: list[LikelihoodGrid]) -> BeliefGrid:
    """Cellwise product of the prior and all factors, renormalized in log space."""
    for f in factors:
        if f.grid != prior.grid:
            raise ValueError("likelihood grid does not match the prior's grid")
    with np.errstate(divide="ignore"):
        logp = np.log(prior.values)
        for f in factors:
            logp = logp + np.log(f.values)
    top = logp.max()
    if not np.isfinite(top):
        log.warning("measurement update underflowed; keeping the prior")
        return BeliefGrid(prior.grid, prior.values.copy(), prior.leakage, degraded=True)
    p = np.exp(logp - top)
    return BeliefGrid(prior.grid, p / p.sum(), prior.leakage)


# -- readout ------------------------------------------------------------------------


def soft_argmax(bel: BeliefGrid, alpha: float = 1.0) -> Pose2:
    """Center of mass of ``Bel^alpha``; heading averaged on the unit circle."""
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    with np.errstate(divide="ignore"):
        logb = np.log(bel.values)
    w = np.exp(alpha * (logb - logb.max()))
    w /= w.sum()
    lat, lon, th = bel.grid.offsets()
    m_lat = float(np.einsum("ijk,i->", w, lat))
    m_lon = float(np.einsum("ijk,j->", w, lon))
    m_c = float(np.einsum("ijk,k->", w, np.cos(th)))
    m_s = float(np.einsum("ijk,k->", w, np.sin(th)))
    return compose(bel.grid.anchor, Pose2(m_lon, m_lat, math.atan2(m_s, m_c)))


# -- recursion ----------------------------------------------------------------------


@dataclass
class FilterState:
    belief: BeliefGrid
    estimate: Pose2
    steps: int = 0


@dataclass
class StepResult:
    estimate: Pose2
    belief: BeliefGrid
    diagnostics: dict = field(default_factory=dict)

    @property
    def state(self) -> FilterState:
        return FilterState(self.belief, self.estimate, self.diagnostics.get("step", 0))


def snap_to_grid(pose: Pose2, grid: SearchGrid, heading: bool = True) -> Pose2:
    """Pose of the grid node nearest to ``pose`` (offsets rounded to whole steps).

    Re-anchoring on a node keeps successive translation lattices aligned, so
    mass does not drift across cells from re-gridding alone.  With
    ``heading=False`` the heading offset is kept as is: the heading slices
    then stay centered on the estimate instead of on a fixed lattice.
    """
    o = inverse_compose(pose, grid.anchor)
    return compose(
        grid.anchor,
        Pose2(
            round(o.x / grid.lon_step) * grid.lon_step,
            round(o.y / grid.lat_step) * grid.lat_step,
            round(o.theta / grid.theta_step) * grid.theta_step if heading else o.theta,
        ),
    )


def init(anchor: Pose2, cfg: FilterConfig = FilterConfig()) -> FilterState:
    grid = cfg.grid.with_anchor(anchor)
    return FilterState(BeliefGrid.uniform(grid), anchor, 0)


def _factors(frame, semantic_map, grid: SearchGrid, cfg: FilterConfig) -> dict[str, LikelihoodGrid]:
    out = {}
    if cfg.use_lane and frame.lane_obs is not None:
        out["lane"] = lane_likelihood(frame.lane_obs, semantic_map, grid, cfg.lane_temperature, cfg.truncation)
    if cfg.use_sign and frame.sign_obs is not None:
        out["sign"] = sign_likelihood(frame.sign_obs, semantic_map, grid, cfg.sign_temperature)
    if cfg.use_gps and frame.gps is not None:
        out["gps"] = gps_likelihood(frame.gps, semantic_map.frame.utm_to_map, grid, cfg.sigma_gps)
    return out


def acquire(anchor: Pose2, frame, semantic_map, cfg: FilterConfig = FilterConfig()) -> Pose2:
    """Shift ``anchor`` sideways onto the most likely lane.

    A GPS fix can be off by more than half a lane, and the regular search grid
    is narrower than a lane, so a filter started at the fix may lock onto the
    neighbouring lane.  This scores the first frame over a lateral band of
    ``cfg.acquire_lat_range`` and moves the anchor to the lateral cell with
    the largest marginal posterior.  Longitudinal offset and heading are kept.
    """
    if cfg.acquire_lat_range <= 0 or not cfg.use_lane or frame.lane_obs is None:
        return anchor
    grid = replace(cfg.grid, lat_range=max(cfg.acquire_lat_range, cfg.grid.lat_range)).with_anchor(anchor)
    post = update(BeliefGrid.uniform(grid), list(_factors(frame, semantic_map, grid, cfg).values()))
    i = int(np.argmax(post.values.sum(axis=(1, 2))))
    hl, hn, ht = grid.half_cells
    return compose(anchor, Pose2(0.0, grid.cell_offset((i, hn, ht)).y, 0.0))


def effective_motion(inc: MotionIncrement, cfg: FilterConfig) -> MotionIncrement:
    """Inflate the reported motion covariance with the configured process noise."""
    dist = math.hypot(inc.delta.x, inc.delta.y)
    f_lon, f_lat, f_th = cfg.motion_sigma_floor
    k_lon, k_lat = cfg.motion_sigma_per_m
    extra = np.diag([f_lon**2 + (k_lon * dist) ** 2, f_lat**2 + (k_lat * dist) ** 2, f_th**2])
    return MotionIncrement(inc.delta, inc.covariance + extra)


def _peak(f: LikelihoodGrid) -> tuple[float, float, float]:
    o = f.grid.cell_offset(f.argmax())
    return (o.y, o.x, o.theta)


def step(state: FilterState, frame, semantic_map, cfg: FilterConfig) -> StepResult:
    """One recursion: recenter + predict, observation update, soft-argmax."""
    t0 = time.perf_counter()
    motion = effective_motion(frame.motion, cfg)
    anchor = compose(snap_to_grid(state.estimate, state.belief.grid, cfg.snap_heading), frame.motion.delta)
    prior = predict(state.belief, motion, anchor, cfg.motion_window, cfg.motion_nsigma, cfg.prune)
    t1 = time.perf_counter()
    factors = _factors(frame, semantic_map, prior.grid, cfg)
    t2 = time.perf_counter()
    post = update(prior, list(factors.values()))
    estimate = soft_argmax(post, cfg.alpha)
    t3 = time.perf_counter()
    diag = {
        "step": state.steps + 1,
        "anchor": anchor,
        "leakage": prior.leakage,
        "degraded": post.degraded or prior.degraded,
        "prior_sum": float(prior.values.sum()),
        "prior_min": float(prior.values.min()),
        "belief_sum": float(post.values.sum()),
        "belief_min": float(post.values.min()),
        "entropy": {name: f.entropy() for name, f in factors.items()},
        "peak": {name: _peak(f) for name, f in factors.items() if not f.is_uniform()},
        "timing": {"predict": t1 - t0, "likelihood": t2 - t1, "update": t3 - t2},
    }
    return StepResult(estimate, post, diag)


def run(frames, semantic_map, cfg: FilterConfig, anchor: Pose2):
    """Drive the filter over ``frames``; yields one :class:`StepResult` per frame."""
    state = None
    for frame in frames:
        if state is None:
            state = init(acquire(anchor, frame, semantic_map, cfg), cfg)
        res = step(state, frame, semantic_map, cfg)
        state = res.state
        yield res


def with_modalities(cfg: FilterConfig, lane: bool, sign: bool, gps: bool) -> FilterConfig:
    return replace(cfg, use_lane=lane, use_sign=sign, use_gps=gps)
