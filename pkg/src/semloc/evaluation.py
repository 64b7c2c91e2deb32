"""Metrics, baselines and suite runs.

Errors are split into the ground-truth vehicle frame: longitudinal along the
true heading, lateral across it.  A suite run drives every requested method
over the same simulated frames in lockstep, so all methods see identical
sensor data for a given seed.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import bayes_filter as bf
from .config import DeterministicWeights, SuiteConfig
from .observation import lane_likelihood, sign_likelihood
from .pose import Pose2, compose, inverse_compose, transform_point, wrap_angle
from .semantic_map import dense_raster_bytes, storage_report
from .simulator import gen_scenario, initial_pose, iter_frames

FAIL_THRESHOLD_M = 1.0
PERCENTILES = (50, 95, 99)
SUM_TOL = 1e-9


class MethodError(ValueError):
    pass


# -- metrics ------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorSample:
    """Absolute lateral/longitudinal errors plus their signed values."""

    t: float
    lateral_m: float
    longitudinal_m: float
    heading_err_rad: float
    lateral_signed: float = 0.0
    longitudinal_signed: float = 0.0

    @property
    def total_m(self) -> float:
        return math.hypot(self.lateral_signed, self.longitudinal_signed)


def decompose_error(est: Pose2, gt: Pose2, t: float = 0.0) -> ErrorSample:
    dx, dy = est.x - gt.x, est.y - gt.y
    c, s = math.cos(gt.theta), math.sin(gt.theta)
    lon = c * dx + s * dy
    lat = -s * dx + c * dy
    return ErrorSample(t, abs(lat), abs(lon), wrap_angle(est.theta - gt.theta), lat, lon)


def smoothness_terms(est_traj, gt_traj) -> np.ndarray:
    """Per-step ``||(x*_t - x*_{t-1}) - (gt_t - gt_{t-1})||^2``, heading wrapped."""
    if len(est_traj) != len(gt_traj):
        raise ValueError(f"trajectory lengths differ: {len(est_traj)} vs {len(gt_traj)}")
    if len(est_traj) < 2:
        raise ValueError("need at least two poses")
    e = np.array([(p.x, p.y, p.theta) for p in est_traj])
    g = np.array([(p.x, p.y, p.theta) for p in gt_traj])
    de, dg = np.diff(e, axis=0), np.diff(g, axis=0)
    de[:, 2] = wrap_angle(de[:, 2])
    dg[:, 2] = wrap_angle(dg[:, 2])
    r = de - dg
    r[:, 2] = wrap_angle(r[:, 2])
    return (r * r).sum(axis=1)


def smoothness(est_traj, gt_traj) -> float:
    return float(smoothness_terms(est_traj, gt_traj).mean())


def percentile(values, p) -> float:
    """Nearest-rank percentile: the ``ceil(p/100 * n)``-th smallest value."""
    v = sorted(values)
    if not v:
        raise ValueError("percentile of an empty sample")
    frac = Fraction(str(p))
    if not 0 < frac <= 100:
        raise ValueError("percentile must lie in (0, 100]")
    rank = math.ceil(frac * len(v) / 100)
    return float(v[max(rank, 1) - 1])


def percentile_table(values, ps=PERCENTILES) -> dict:
    return {f"p{p}": percentile(values, p) for p in ps}


def failure_rate(snippet_reports) -> float:
    """Fraction of snippets whose maximum translational error exceeds 1 m."""
    reps = list(snippet_reports)
    if not reps:
        raise ValueError("need at least one snippet")
    return sum(1 for r in reps if _max_error(r) > FAIL_THRESHOLD_M) / len(reps)


def _max_error(r) -> float:
    if isinstance(r, dict):
        return r["max_error_m"]
    if hasattr(r, "max_error_m"):
        return r.max_error_m
    return float(r)


# -- methods ------------------------------------------------------------------------


@dataclass(frozen=True)
class Method:
    name: str
    kind: str  # "dynamics" | "filter" | "deterministic"
    lane: bool = False
    sign: bool = False
    gps: bool = False


_ALL = ("full", "probabilistic", "all")


def parse_method(name: str) -> Method:
    """Method names: ``dynamics``, ``deterministic``, ``full`` (alias
    ``probabilistic``/``all``) or any ``+``-joined subset of lane/sign/gps."""
    key = name.strip().lower()
    if key == "dynamics":
        return Method(key, "dynamics")
    if key == "deterministic":
        return Method(key, "deterministic", True, True, True)
    if key in _ALL:
        return Method(key, "filter", True, True, True)
    parts = key.split("+")
    if not parts or any(p not in ("lane", "sign", "gps") for p in parts) or len(set(parts)) != len(parts):
        raise MethodError(f"unknown method {name!r}")
    return Method(key, "filter", "lane" in parts, "sign" in parts, "gps" in parts)


def baseline_deterministic_step(
    prev: Pose2,
    frame,
    semantic_map,
    cfg: bf.FilterConfig,
    weights: DeterministicWeights = DeterministicWeights(),
) -> Pose2:
    """Weighted per-axis average of dead reckoning and per-modality argmax poses.

    Every source is expressed as a ``(lat, lon, theta)`` offset from the
    dead-reckoned pose; nothing but the previous estimate is carried over.
    """
    anchor = compose(prev, frame.motion.delta)
    grid = cfg.grid.with_anchor(anchor)
    cands = [((0.0, 0.0, 0.0), weights.dynamics)]
    if cfg.use_lane and frame.lane_obs is not None:
        lik = lane_likelihood(frame.lane_obs, semantic_map, grid, cfg.lane_temperature, cfg.truncation)
        if not lik.is_uniform():
            o = grid.cell_offset(lik.argmax())
            cands.append(((o.y, o.x, o.theta), weights.lane))
    if cfg.use_sign and frame.sign_obs is not None:
        lik = sign_likelihood(frame.sign_obs, semantic_map, grid, cfg.sign_temperature)
        if not lik.is_uniform():
            o = grid.cell_offset(lik.argmax())
            cands.append(((o.y, o.x, o.theta), weights.sign))
    if cfg.use_gps and frame.gps is not None:
        g = transform_point(semantic_map.frame.utm_to_map, frame.gps.position)
        local = transform_point(anchor.inverse(), g)
        cands.append(((local.y, local.x, 0.0), weights.gps))
    off = []
    for axis in range(3):
        wsum = sum(w[axis] for _, w in cands)
        off.append(sum(v[axis] * w[axis] for v, w in cands) / wsum if wsum > 0 else 0.0)
    return compose(anchor, Pose2(off[1], off[0], off[2]))


class _Hygiene:
    def __init__(self):
        self.checks = 0
        self.violations = 0
        self.max_sum_dev = 0.0
        self.min_value = math.inf
        self.degraded = 0
        self.max_leakage = 0.0

    def observe(self, diag: dict):
        for s_key, m_key in (("prior_sum", "prior_min"), ("belief_sum", "belief_min")):
            dev = abs(diag[s_key] - 1.0)
            self.checks += 1
            self.max_sum_dev = max(self.max_sum_dev, dev)
            self.min_value = min(self.min_value, diag[m_key])
            if dev > SUM_TOL or diag[m_key] < 0:
                self.violations += 1
        self.degraded += bool(diag["degraded"])
        self.max_leakage = max(self.max_leakage, diag["leakage"])

    def as_dict(self) -> dict:
        return {
            "checks": self.checks,
            "violations": self.violations,
            "max_sum_deviation": self.max_sum_dev,
            "min_value": 0.0 if self.min_value is math.inf else self.min_value,
            "degraded_steps": self.degraded,
            "max_leakage": self.max_leakage,
        }


class _Runner:
    def __init__(self, method: Method, start: Pose2, suite: SuiteConfig, semantic_map, first_frame=None):
        self.method = method
        self.map = semantic_map
        self.cfg = bf.with_modalities(suite.filter, method.lane, method.sign, method.gps)
        self.weights = suite.deterministic
        if method.kind != "dynamics" and first_frame is not None:
            start = bf.acquire(start, first_frame, semantic_map, self.cfg)
        self.estimate = start
        self.state = bf.init(start, self.cfg) if method.kind == "filter" else None
        self.hygiene = _Hygiene()
        self.seconds = 0.0
        self.snapshot = None

    def feed(self, frame) -> Pose2:
        t0 = time.perf_counter()
        kind = self.method.kind
        if kind == "dynamics":
            self.estimate = compose(self.estimate, frame.motion.delta)
        elif kind == "deterministic":
            self.estimate = baseline_deterministic_step(self.estimate, frame, self.map, self.cfg, self.weights)
        else:
            res = bf.step(self.state, frame, self.map, self.cfg)
            self.state = res.state
            self.estimate = res.estimate
            self.hygiene.observe(res.diagnostics)
        self.seconds += time.perf_counter() - t0
        return self.estimate


@dataclass
class SnippetResult:
    seed: int
    method: str
    samples: list
    estimates: list
    truth: list
    hygiene: dict
    seconds: float
    belief_snapshot: np.ndarray | None = None

    @property
    def max_error_m(self) -> float:
        return max(s.total_m for s in self.samples)

    def summary(self) -> dict:
        lat = [s.lateral_m for s in self.samples]
        lon = [s.longitudinal_m for s in self.samples]
        head = [abs(s.heading_err_rad) for s in self.samples]
        return {
            "seed": self.seed,
            "steps": len(self.samples),
            "lateral": percentile_table(lat),
            "longitudinal": percentile_table(lon),
            "heading": percentile_table(head),
            "smoothness": smoothness(self.estimates, self.truth),
            "max_error_m": self.max_error_m,
            "failed": self.max_error_m > FAIL_THRESHOLD_M,
            "hygiene": self.hygiene,
        }


def run_snippet(suite: SuiteConfig, seed: int, methods, snapshot: bool = False):
    """All ``methods`` on one seed.  Returns ``({method: SnippetResult}, map, stats)``."""
    ms = [parse_method(m) if isinstance(m, str) else m for m in methods]
    t0 = time.perf_counter()
    sc = gen_scenario(suite.scenario, seed)
    render = any(m.kind != "dynamics" for m in ms)
    frames = iter_frames(sc, suite.noise, seed, suite.sensor, suite.stride, render=render)
    runners = None
    samples = {m.name: [] for m in ms}
    est = {m.name: [] for m in ms}
    truth = []
    sim_seconds = 0.0
    k = 0
    while True:
        ts = time.perf_counter()
        frame = next(frames, None)
        sim_seconds += time.perf_counter() - ts
        if frame is None:
            break
        if runners is None:
            start = initial_pose(sc, frame)
            runners = [_Runner(m, start, suite, sc.map, frame) for m in ms]
        gt = sc.truth[frame.index]
        keep = k >= suite.burn_in
        if keep:
            truth.append(gt)
        for r in runners:
            p = r.feed(frame)
            if snapshot and k == suite.snapshot_step and r.state is not None:
                r.snapshot = r.state.belief.values.max(axis=2)
            if keep:
                samples[r.method.name].append(decompose_error(p, gt, frame.timestamp))
                est[r.method.name].append(p)
        k += 1
    if len(truth) < 2:
        raise ValueError(f"seed {seed}: fewer than two frames after burn-in")
    out = {}
    for r in runners:
        n = r.method.name
        out[n] = SnippetResult(seed, n, samples[n], est[n], truth, r.hygiene.as_dict(), r.seconds, r.snapshot)
    stats = {"simulate_seconds": sim_seconds, "total_seconds": time.perf_counter() - t0, "frames": k}
    return out, sc, stats


# -- reports ----------------------------------------------------------------------


@dataclass
class RunReport:
    suite: dict
    methods: dict
    storage: dict
    timing: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def to_json(self) -> str:
        """Machine-readable report; timing is left out so reruns are byte-identical."""
        body = {"suite": self.suite, "methods": self.methods, "storage": self.storage}
        return json.dumps(body, sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        lines = [f"suite {self.suite['name']}: {len(self.suite['seeds'])} snippets, stride {self.suite['stride']}"]
        hdr = f"{'method':<14}{'lat50':>8}{'lat95':>8}{'lat99':>8}{'lon50':>8}{'lon95':>8}{'lon99':>8}"
        hdr += f"{'sm.mean':>10}{'sm.max':>10}{'fail':>7}"
        lines += ["", hdr]
        for name, m in self.methods.items():
            la, lo, sm = m["lateral"], m["longitudinal"], m["smoothness"]
            lines.append(
                f"{name:<14}{la['p50']:8.3f}{la['p95']:8.3f}{la['p99']:8.3f}{lo['p50']:8.3f}{lo['p95']:8.3f}"
                f"{lo['p99']:8.3f}{sm['mean']:10.4f}{sm['max']:10.4f}{m['failure_rate']:7.2f}"
            )
        st = self.storage
        lines += [
            "",
            f"map storage: {st['MiB_per_km2_mean']:.3f} MiB/km2 mean, {st['MiB_per_km2_max']:.3f} max; "
            f"dense 5cm raster {st['dense_ratio_min']:.0f}x larger at least",
        ]
        if self.timing:
            lines += ["", f"wall time {self.timing.get('total_seconds', 0):.1f} s"]
            for name, sec in sorted(self.timing.get("methods", {}).items()):
                lines.append(f"  {name:<14}{sec:8.1f} s")
        return "\n".join(lines) + "\n"


def _aggregate(results: list[SnippetResult]) -> dict:
    lat = [s.lateral_m for r in results for s in r.samples]
    lon = [s.longitudinal_m for r in results for s in r.samples]
    head = [abs(s.heading_err_rad) for r in results for s in r.samples]
    snippets = [r.summary() for r in results]
    sm = [s["smoothness"] for s in snippets]
    hyg = {
        "checks": sum(s["hygiene"]["checks"] for s in snippets),
        "violations": sum(s["hygiene"]["violations"] for s in snippets),
        "max_sum_deviation": max((s["hygiene"]["max_sum_deviation"] for s in snippets), default=0.0),
        "min_value": min((s["hygiene"]["min_value"] for s in snippets), default=0.0),
        "degraded_steps": sum(s["hygiene"]["degraded_steps"] for s in snippets),
    }
    return {
        "lateral": percentile_table(lat),
        "longitudinal": percentile_table(lon),
        "heading": percentile_table(head),
        "smoothness": {"mean": float(np.mean(sm)), **percentile_table(sm), "max": max(sm)},
        "failure_rate": failure_rate(snippets),
        "hygiene": hyg,
        "snippets": snippets,
    }


def run_experiment(suite: SuiteConfig, methods=None, progress=None) -> RunReport:
    """Run every method over every seed of ``suite``."""
    names = list(methods or suite.methods)
    ms = [parse_method(n) for n in names]
    if len({m.name for m in ms}) != len(ms):
        raise MethodError("duplicate method")
    t0 = time.perf_counter()
    per = {m.name: [] for m in ms}
    storage = []
    timing = {"methods": {m.name: 0.0 for m in ms}, "simulate_seconds": 0.0}
    artifacts = {}
    for i, seed in enumerate(suite.seeds):
        res, sc, stats = run_snippet(suite, seed, ms, snapshot=(i == 0))
        for n, r in res.items():
            per[n].append(r)
            timing["methods"][n] += r.seconds
        timing["simulate_seconds"] += stats["simulate_seconds"]
        area = sc.map.area_km2()
        rep = storage_report(sc.map, area)
        rep["dense_bytes"] = dense_raster_bytes(area, sc.map.signs.resolution)
        storage.append(rep)
        if i == 0:
            artifacts["truth_xy"] = np.array([(p.x, p.y) for p in next(iter(res.values())).truth])
            for n, r in res.items():
                artifacts[f"est_xy/{n}"] = np.array([(p.x, p.y) for p in r.estimates])
                artifacts[f"lat_signed/{n}"] = np.array([s.lateral_signed for s in r.samples])
                artifacts[f"lon_signed/{n}"] = np.array([s.longitudinal_signed for s in r.samples])
                if r.belief_snapshot is not None:
                    artifacts[f"belief/{n}"] = r.belief_snapshot
        if progress:
            progress(seed, res)
    timing["total_seconds"] = time.perf_counter() - t0
    methods_out = {n: _aggregate(rs) for n, rs in per.items()}
    mib = [s["MiB_per_km2"] for s in storage]
    st = {
        "per_seed": storage,
        "MiB_per_km2_mean": float(np.mean(mib)),
        "MiB_per_km2_max": max(mib),
        "dense_ratio_min": min(s["dense_bytes"] / s["bytes"] for s in storage),
    }
    s_info = {
        "name": suite.name,
        "seeds": list(suite.seeds),
        "stride": suite.stride,
        "burn_in": suite.burn_in,
        "methods": names,
    }
    return RunReport(s_info, methods_out, st, timing, artifacts)


# -- acceptance gates ------------------------------------------------------------


def _per_seed(report: RunReport, method: str, axis: str) -> list[float]:
    return [s[axis]["p50"] for s in report.methods[method]["snippets"]]


def check_gates(report: RunReport, seed_fraction: float = 0.9) -> list[tuple[str, bool, str]]:
    """Trend gates that apply to the methods present in ``report``."""
    M = report.methods
    gates = []
    for name, m in M.items():
        h = m["hygiene"]
        if h["checks"]:
            gates.append((f"hygiene[{name}]", h["violations"] == 0, f"{h['violations']} violations"))
        for axis in ("lateral", "longitudinal"):
            p = m[axis]
            ok = p["p50"] <= p["p95"] <= p["p99"]
            gates.append((f"percentiles monotone[{name},{axis}]", ok, str(p)))
    if {"dynamics", "gps", "full"} <= M.keys():
        full_lat, gps_lat = M["full"]["lateral"]["p50"], M["gps"]["lateral"]["p50"]
        gates.append(("full lateral median <= 0.1 m", full_lat <= 0.1, f"{full_lat:.4f}"))
        gates.append(("full lateral 5x below gps", 5 * full_lat <= gps_lat, f"{full_lat:.4f} vs {gps_lat:.4f}"))
        for axis in ("lateral", "longitudinal"):
            dyn = M["dynamics"][axis]["p50"]
            others = max(m[axis]["p50"] for n, m in M.items() if n != "dynamics")
            gates.append((f"dynamics worst {axis}", dyn > others, f"{dyn:.3f} vs {others:.3f}"))
    if {"lane", "lane+sign", "lane+gps", "full"} <= M.keys():
        lon = {n: _per_seed(report, n, "longitudinal") for n in ("lane", "lane+sign", "lane+gps", "full")}
        lat = {n: _per_seed(report, n, "lateral") for n in ("lane", "full")}
        n = len(lon["full"])
        good = sum(
            lon["lane"][i] > lon["lane+sign"][i] > lon["full"][i]
            and lon["lane+gps"][i] > lon["full"][i]
            and lat["full"][i] <= lat["lane"][i]
            for i in range(n)
        )
        need = math.ceil(seed_fraction * n)
        gates.append(("ablation ordering per seed", good >= need, f"{good}/{n} seeds (need {need})"))
    prob = "probabilistic" if "probabilistic" in M else "full" if "full" in M else None
    if prob and "deterministic" in M:
        p, d = M[prob]["smoothness"]["max"], M["deterministic"]["smoothness"]["max"]
        gates.append(("probabilistic max smoothness <= 0.5x deterministic", p <= 0.5 * d, f"{p:.4f} vs {d:.4f}"))
    st = report.storage
    gates.append(("map storage <= 5 MiB/km2", st["MiB_per_km2_max"] <= 5.0, f"{st['MiB_per_km2_max']:.3f}"))
    gates.append(("dense raster >= 100x larger", st["dense_ratio_min"] >= 100, f"{st['dense_ratio_min']:.0f}x"))
    return gates


def dead_reckoning_endpoint_error(suite: SuiteConfig, seed: int, distance_m: float = 1000.0) -> float:
    """Translation error of pure dead reckoning after ``distance_m`` of travel."""
    sc = gen_scenario(suite.scenario, seed)
    pose = sc.truth[0]
    travelled = 0.0
    prev = sc.truth[0]
    for f in iter_frames(sc, suite.noise, seed, suite.sensor, 1, render=False):
        pose = compose(pose, f.motion.delta)
        gt = sc.truth[f.index]
        d = inverse_compose(gt, prev)
        travelled += math.hypot(d.x, d.y)
        prev = gt
        if travelled >= distance_m:
            return math.hypot(pose.x - gt.x, pose.y - gt.y)
    raise ValueError("snippet shorter than the requested distance")


def with_methods(suite: SuiteConfig, methods) -> SuiteConfig:
    return replace(suite, methods=tuple(methods))
