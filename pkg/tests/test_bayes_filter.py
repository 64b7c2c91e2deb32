import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semloc.bayes_filter import (
    BeliefGrid,
    FilterConfig,
    MotionIncrement,
    acquire,
    init,
    predict,
    snap_to_grid,
    soft_argmax,
    step,
    update,
)
from semloc.observation import GpsFix, LikelihoodGrid, SearchGrid
from semloc.pose import Point2, Pose2, compose, inverse_compose, inverse_compose_arrays
from semloc.raster import Window
from semloc.semantic_map import LaneGraph, SemanticMap, empty_map, rasterize_lanes_in_frame
from semloc.simulator import ObservationFrame

SMALL = SearchGrid(lat_range=0.25, lon_range=0.5, theta_range=math.radians(1.0))  # 11 x 21 x 3


def dense_predict(prev: BeliefGrid, inc: MotionIncrement, new_anchor: Pose2) -> np.ndarray:
    """Double loop over all (previous, new) cell pairs."""
    g1 = prev.grid.with_anchor(new_anchor)
    X, Y, T = g1.cell_poses()
    x0, y0, t0 = prev.grid.cell_poses()
    info = np.linalg.inv(inc.covariance)
    out = np.zeros(g1.shape)
    for idx in np.ndindex(prev.grid.shape):
        mean = compose(Pose2(x0[idx], y0[idx], t0[idx]), inc.delta)
        r = np.stack(inverse_compose_arrays(X, Y, T, mean.x, mean.y, mean.theta), axis=-1)
        out += prev.values[idx] * np.exp(-0.5 * np.einsum("...i,ij,...j->...", r, info, r))
    return out / out.sum()


def random_case(rng, grid=SMALL):
    g = grid.with_anchor(Pose2(*rng.normal(size=3)))
    b = rng.random(g.shape)
    a = rng.normal(size=(3, 3)) * 0.05
    cov = a @ a.T + np.diag([0.01, 0.01, 1e-4])
    inc = MotionIncrement(Pose2(*(rng.normal(size=3) * [1.0, 0.2, 0.02])), cov)
    new_anchor = compose(compose(g.anchor, inc.delta), Pose2(*(rng.normal(size=3) * [0.05, 0.05, 0.005])))
    return BeliefGrid(g, b / b.sum()), inc, new_anchor


def diag_inc(dx, s_lon=0.1, s_lat=0.1, s_th=math.radians(0.5)):
    return MotionIncrement(Pose2(dx, 0.0, 0.0), np.diag([s_lon**2, s_lat**2, s_th**2]))


# -- predict ---------------------------------------------------------------------


def test_predict_matches_dense_oracle(rng):
    for _ in range(10):
        prev, inc, a1 = random_case(rng)
        got = predict(prev, inc, a1, window=100)
        np.testing.assert_allclose(got.values, dense_predict(prev, inc, a1), rtol=0, atol=1e-12)


def test_predict_default_window_close_to_dense(rng):
    # the default 3-sigma window drops only the far tails of the kernel
    for _ in range(5):
        prev, inc, a1 = random_case(rng)
        np.testing.assert_allclose(predict(prev, inc, a1).values, dense_predict(prev, inc, a1), rtol=0, atol=1e-6)


def test_predict_single_hot_moves_twenty_cells():
    g = SearchGrid(lat_range=0.3, lon_range=1.5, theta_range=math.radians(1.0))
    hl, hn, ht = g.half_cells
    v = np.zeros(g.shape)
    v[hl, hn, ht] = 1.0
    prev = BeliefGrid(g, v)
    got = predict(prev, diag_inc(1.0), g.anchor, window=100)
    assert np.unravel_index(got.values.argmax(), g.shape) == (hl, hn + 20, ht)
    np.testing.assert_allclose(got.values, dense_predict(prev, diag_inc(1.0), g.anchor), atol=1e-12)
    # symmetric bump around the new peak
    row = got.values[hl, :, ht]
    np.testing.assert_allclose(row[hn + 20 - 5 : hn + 20], row[hn + 21 : hn + 26][::-1], rtol=1e-9)


def test_predict_identity_with_tiny_noise_keeps_belief(rng):
    prev, _, _ = random_case(rng)
    inc = MotionIncrement(Pose2(), np.diag([1e-8, 1e-8, 1e-10]))
    got = predict(prev, inc, prev.grid.anchor)
    np.testing.assert_allclose(got.values, prev.values, rtol=1e-9, atol=1e-15)


def test_predict_uniform_stays_uniform_away_from_edges():
    g = SearchGrid(lat_range=0.5, lon_range=1.0, theta_range=0.0)
    prev = BeliefGrid.uniform(g)
    inc = diag_inc(0.2, 0.05, 0.05, 1e-3)
    got = predict(prev, inc, compose(g.anchor, inc.delta), window=100).values[:, :, 0]
    inner = got[6:-6, 12:-12]
    assert np.ptp(inner) <= 1e-9 * inner.max()


def test_predict_window_truncation_is_close_to_full(rng):
    prev, inc, a1 = random_case(rng)
    full = predict(prev, inc, a1, window=100).values
    trunc = predict(prev, inc, a1, nsigma=4.0).values
    assert np.abs(full - trunc).max() <= 1e-3 * full.max()


def test_predict_reports_leakage():
    g = SearchGrid(lat_range=0.25, lon_range=0.5, theta_range=0.0)
    prev = BeliefGrid.uniform(g)
    got = predict(prev, diag_inc(0.25, 0.05, 0.05, 1e-3), g.anchor)
    # a 5-cell shift pushes the last 5 of 21 columns past the far edge
    assert got.leakage == pytest.approx(5 / 21, rel=1e-12)
    assert abs(got.total() - 1.0) <= 1e-12


@settings(max_examples=25)
@given(st.integers(0, 2**31))
def test_predict_is_normalized(seed):
    prev, inc, a1 = random_case(np.random.default_rng(seed))
    got = predict(prev, inc, a1, prune=1e-12)
    assert abs(got.values.sum() - 1.0) <= 1e-9 and got.values.min() >= 0.0


def test_motion_increment_validation():
    with pytest.raises(ValueError):
        MotionIncrement(Pose2(), np.eye(2))
    with pytest.raises(ValueError):
        MotionIncrement(Pose2(), np.diag([1.0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        MotionIncrement(Pose2(), np.array([[1, 0.5, 0], [0, 1, 0], [0, 0, 1.0]]))


def test_motion_chaining_composes_deltas():
    a = MotionIncrement(Pose2(1.0, 0.0, 0.1), np.diag([1e-4, 1e-4, 1e-6]))
    b = MotionIncrement(Pose2(1.0, 0.2, -0.05), np.diag([1e-4, 1e-4, 1e-6]))
    c = a.then(b)
    assert c.delta == compose(a.delta, b.delta)
    # lateral variance grows from the heading uncertainty times the lever arm
    assert c.covariance[1, 1] > a.covariance[1, 1] + b.covariance[1, 1]


# -- update ----------------------------------------------------------------------

G3 = SearchGrid(lat_range=0.0, lon_range=0.05, theta_range=0.0)  # 1 x 3 x 1


def three(v):
    return np.array(v, dtype=float).reshape(1, 3, 1)


def test_update_hand_product():
    post = update(BeliefGrid(G3, three([0.2, 0.5, 0.3])), [LikelihoodGrid(G3, three([0.5, 0.25, 0.25]))])
    # products 0.1, 0.125, 0.075 sum to 0.3
    np.testing.assert_allclose(post.values.ravel(), [1 / 3, 5 / 12, 1 / 4], rtol=1e-12)


def test_update_uniform_factor_keeps_prior(rng):
    prev, _, _ = random_case(rng)
    post = update(prev, [LikelihoodGrid.uniform(prev.grid)])
    np.testing.assert_allclose(post.values, prev.values, rtol=1e-12)
    assert update(prev, []).values == pytest.approx(prev.values)


def test_update_uniform_prior_returns_factor(rng):
    g = SMALL
    f = rng.random(g.shape)
    f /= f.sum()
    post = update(BeliefGrid.uniform(g), [LikelihoodGrid(g, f)])
    np.testing.assert_allclose(post.values, f, rtol=1e-12)


def test_update_underflow_keeps_prior():
    prior = BeliefGrid(G3, three([1.0, 0.0, 0.0]))
    post = update(prior, [LikelihoodGrid(G3, three([0.0, 0.5, 0.5]))])
    assert post.degraded and np.array_equal(post.values, prior.values)


def test_update_survives_tiny_factors():
    tiny = three([1e-200, 3e-200, 1e-200])
    post = update(BeliefGrid(G3, three([1e-150, 1e-150, 2e-150])), [LikelihoodGrid(G3, tiny)])
    np.testing.assert_allclose(post.values.ravel(), [1 / 6, 3 / 6, 2 / 6], rtol=1e-12)


def test_update_rejects_mismatched_grid():
    with pytest.raises(ValueError):
        update(BeliefGrid.uniform(G3), [LikelihoodGrid.uniform(G3.with_anchor(Pose2(1, 0, 0)))])


# -- soft argmax -----------------------------------------------------------------


@pytest.mark.parametrize("alpha", [1.0, 2.0, 7.5])
def test_soft_argmax_single_hot(alpha):
    g = SMALL.with_anchor(Pose2(10.0, -3.0, 0.7))
    v = np.zeros(g.shape)
    v[2, 15, 0] = 1.0
    got = soft_argmax(BeliefGrid(g, v), alpha)
    want = compose(g.anchor, g.cell_offset((2, 15, 0)))
    assert got.x == pytest.approx(want.x, abs=1e-12)
    assert got.y == pytest.approx(want.y, abs=1e-12)
    assert got.theta == pytest.approx(want.theta, abs=1e-12)


def test_soft_argmax_symmetric_pair_gives_midpoint():
    g = SearchGrid(lat_range=0.0, lon_range=0.5, theta_range=0.0)
    v = np.zeros(g.shape)
    v[0, 0, 0] = v[0, -1, 0] = 0.5  # -0.5 m and +0.5 m
    got = soft_argmax(BeliefGrid(g, v), 1.0)
    assert abs(got.x) <= 1e-9 and abs(got.y) <= 1e-9 and abs(got.theta) <= 1e-9


def test_soft_argmax_weighted_mean():
    g = SearchGrid(lat_range=0.0, lon_range=0.05, theta_range=0.0)
    bel = BeliefGrid(g, three([0.0, 0.25, 0.75]))
    assert soft_argmax(bel, 1.0).x == pytest.approx(0.0375, abs=1e-9)


def test_soft_argmax_alpha_sharpens():
    g = SearchGrid(lat_range=0.0, lon_range=0.05, theta_range=0.0)
    bel = BeliefGrid(g, three([0.0, 0.25, 0.75]))
    # weights 0.25^2 : 0.75^2 = 1 : 9
    assert soft_argmax(bel, 2.0).x == pytest.approx(0.045, abs=1e-9)
    with pytest.raises(ValueError):
        soft_argmax(bel, 0.5)


def test_soft_argmax_heading_is_circular():
    g = SearchGrid(Pose2(0, 0, math.pi), lat_range=0.0, lon_range=0.0, theta_range=0.2, theta_step=0.1)
    v = np.zeros(g.shape)
    v[0, 0, 0] = v[0, 0, -1] = 0.5  # pi - 0.2 and pi + 0.2
    assert abs(soft_argmax(BeliefGrid(g, v), 1.0).theta) == pytest.approx(math.pi, abs=1e-9)


# -- init and step ---------------------------------------------------------------


def test_init_uniform_at_anchor():
    a = Pose2(5.0, -2.0, 0.3)
    st_ = init(a)
    assert abs(st_.belief.total() - 1.0) <= 1e-12 and st_.belief.values.min() > 0
    got = soft_argmax(st_.belief, 1.0)
    assert got.x == pytest.approx(a.x, abs=1e-9) and got.y == pytest.approx(a.y, abs=1e-9)
    assert got.theta == pytest.approx(a.theta, abs=1e-12)


def test_init_cells_within_ranges():
    a = Pose2(100.0, 30.0, -2.5)
    g = init(a).belief.grid
    x, y, t = g.cell_poses()
    for idx in [(0, 0, 0), (30, 300, 4), (7, 150, 2)]:
        o = inverse_compose(Pose2(x[idx], y[idx], t[idx]), a)
        assert abs(o.x) <= g.lon_range + 1e-9 and abs(o.y) <= g.lat_range + 1e-9
        assert abs(o.theta) <= g.theta_range + 1e-9


def test_snap_to_grid_rounds_offsets():
    g = SMALL.with_anchor(Pose2(1.0, 2.0, 0.5))
    p = compose(g.anchor, Pose2(0.124, -0.026, math.radians(0.6)))
    s = inverse_compose(snap_to_grid(p, g), g.anchor)
    assert s.x == pytest.approx(0.10, abs=1e-9) and s.y == pytest.approx(-0.05, abs=1e-9)
    assert s.theta == pytest.approx(math.radians(1.0), abs=1e-12)


def blank_frame(i, delta, gps=None, lane=None):
    inc = MotionIncrement(delta, np.diag([1e-4, 1e-4, 1e-7]))
    return ObservationFrame(i, 0.1 * i, inc, gps, lane, None)


def test_prediction_only_step_follows_dead_reckoning():
    cfg = FilterConfig()
    start = Pose2(3.0, 4.0, 0.2)
    state = init(start, cfg)
    v = np.zeros(state.belief.grid.shape)
    hl, hn, ht = state.belief.grid.half_cells
    v[hl, hn, ht] = 1.0
    state.belief = BeliefGrid(state.belief.grid, v)
    est = start
    for i in range(5):
        delta = Pose2(2.5, 0.01, 0.001)
        res = step(state, blank_frame(i, delta), empty_map(), cfg)
        est = compose(est, delta)
        state = res.state
        # heading spread shortens the mean forward travel by ~d(1 - cos(1 deg)) per step
        assert res.estimate.x == pytest.approx(est.x, abs=1e-3)
        assert res.estimate.y == pytest.approx(est.y, abs=1e-3)
        assert res.estimate.theta == pytest.approx(est.theta, abs=1e-5)
        assert abs(res.diagnostics["belief_sum"] - 1.0) <= 1e-9 and res.diagnostics["belief_min"] >= 0


def test_gps_step_pulls_estimate_toward_fix():
    cfg = FilterConfig(sigma_gps=1.0)
    state = init(Pose2(), cfg)
    res = step(state, blank_frame(0, Pose2(1.0, 0, 0), GpsFix(Point2(3.0, 0.4))), empty_map(), cfg)
    # the uniform prior leaves the fix in charge; the lateral range clips the pull
    assert 1.0 < res.estimate.x <= 3.0 + 1e-9 and 0.0 < res.estimate.y < 0.4
    assert "gps" in res.diagnostics["entropy"] and "gps" in res.diagnostics["peak"]


def _three_lane_map():
    lanes = LaneGraph([[(-100.0, y), (100.0, y)] for y in (-5.55, -1.85, 1.85, 5.55)])
    return SemanticMap(lanes, empty_map().signs)


@pytest.mark.parametrize("wrong_by", [3.7, -3.7, 1.2, 0.0])
def test_acquire_picks_the_observed_lane(wrong_by):
    m = _three_lane_map()
    truth = Pose2(10.0, 0.3, 0.0)
    obs = rasterize_lanes_in_frame(m.lanes, truth, Window(-5, -8, 15, 8), 0.05)
    frame = blank_frame(0, Pose2(), lane=obs)
    got = acquire(Pose2(10.0, 0.3 + wrong_by, 0.0), frame, m, FilterConfig())
    assert got.y == pytest.approx(truth.y, abs=1e-9)
    assert got.x == 10.0 and got.theta == 0.0


def test_acquire_without_lanes_keeps_anchor():
    a = Pose2(1.0, 2.0, 0.1)
    assert acquire(a, blank_frame(0, Pose2()), empty_map(), FilterConfig()) == a
    frame = blank_frame(0, Pose2(), lane=rasterize_lanes_in_frame(_three_lane_map().lanes, a, Window(-5, -8, 15, 8), 0.05))
    assert acquire(a, frame, _three_lane_map(), FilterConfig(acquire_lat_range=0.0)) == a


def test_filter_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(alpha=0.5)
    with pytest.raises(ValueError):
        FilterConfig(sigma_gps=0.0)
    with pytest.raises(ValueError):
        FilterConfig(prune=1.0)
    with pytest.raises(ValueError):
        FilterConfig(acquire_lat_range=-1.0)
