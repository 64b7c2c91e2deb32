"""Command-line entry point: ``semloc <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bayes_filter as bf
from .config import ConfigError, SuiteConfig, load_suite, parse_seeds
from .evaluation import (
    MethodError,
    baseline_deterministic_step,
    check_gates,
    decompose_error,
    parse_method,
    percentile_table,
    run_experiment,
)
from .framelog import FrameLogError, export_jsonl, iter_log, read_meta, record
from .pose import Pose2, compose
from .semantic_map import MIB, MapFormatError, dense_raster_bytes, load_map, save_map, storage_report
from .simulator import gen_scenario, initial_pose, iter_frames

log = logging.getLogger("semloc")


def _suite(path) -> SuiteConfig:
    return load_suite(path) if path else SuiteConfig()


def _suite_path(arg: str) -> Path:
    p = Path(arg)
    if p.is_dir():
        p = p / "suite.ini"
    return p


# -- map commands ---------------------------------------------------------------


def cmd_map_build(args) -> int:
    suite = _suite(args.scenario)
    seed = args.seed if args.seed is not None else suite.seeds[0]
    sc = gen_scenario(suite.scenario, seed)
    n = save_map(sc.map, args.out)
    print(f"wrote {args.out}: {n} bytes, {len(sc.map.lanes.boundaries)} boundaries, {sc.map.signs.raster.nnz} sign cells")
    return 0


def cmd_map_info(args) -> int:
    m = load_map(args.file)
    area = args.area_km2 if args.area_km2 else m.area_km2()
    if not area > 0:
        print("map has no extent; pass --area-km2", file=sys.stderr)
        return 2
    rep = storage_report(m, area)
    print(f"frame        {m.frame.name}")
    print(f"boundaries   {len(m.lanes.boundaries)} ({m.lanes.vertex_count} vertices)")
    print(f"sign cells   {m.signs.raster.nnz} at {m.signs.resolution} m")
    print(f"bytes        {rep['bytes']}")
    print(f"area         {rep['area_km2']:.4f} km2")
    print(f"storage      {rep['MiB_per_km2']:.4f} MiB/km2")
    if args.compare_dense:
        dense = dense_raster_bytes(area, m.signs.resolution)
        print(f"dense raster {dense / MIB / area:.1f} MiB/km2 (1 byte per {m.signs.resolution} m cell)")
        print(f"ratio        {dense / rep['bytes']:.1f}x")
    return 0


# -- simulation and localization -------------------------------------------------


def cmd_simulate(args) -> int:
    suite = _suite(args.scenario)
    seed = args.seed if args.seed is not None else suite.seeds[0]
    stride = args.stride or suite.stride
    sc = gen_scenario(suite.scenario, seed)
    out = Path(args.out)
    frames = list(iter_frames(sc, suite.noise, seed, suite.sensor, stride))
    start = initial_pose(sc, frames[0]) if frames else sc.truth[0]
    meta = {
        "seed": seed,
        "stride": stride,
        "init_pose": [start.x, start.y, start.theta],
        "truth": [[p.x, p.y, p.theta] for p in (sc.truth[f.index] for f in frames)],
    }
    n = record(frames, out, meta)
    print(f"wrote {out}: {n} frames")
    if args.map_out:
        save_map(sc.map, args.map_out)
        print(f"wrote {args.map_out}")
    if args.jsonl:
        export_jsonl(frames, args.jsonl)
        print(f"wrote {args.jsonl}")
    return 0


def cmd_localize(args) -> int:
    suite = _suite(args.config)
    method = parse_method(args.method)
    m = load_map(args.map)
    meta = read_meta(args.log)
    if args.init:
        start = Pose2(*(float(v) for v in args.init.split(",")))
    elif "init_pose" in meta:
        start = Pose2(*meta["init_pose"])
    else:
        print("log has no initial pose; pass --init x,y,theta", file=sys.stderr)
        return 2
    cfg = bf.with_modalities(suite.filter, method.lane, method.sign, method.gps)
    state = None
    est = start
    out = []
    for f in iter_log(args.log):
        if state is None:
            if method.kind != "dynamics":
                est = bf.acquire(start, f, m, cfg)
            state = bf.init(est, cfg)
        if method.kind == "dynamics":
            est = compose(est, f.motion.delta)
        elif method.kind == "deterministic":
            est = baseline_deterministic_step(est, f, m, cfg, suite.deterministic)
        else:
            res = bf.step(state, f, m, cfg)
            state, est = res.state, res.estimate
        out.append([f.timestamp, est.x, est.y, est.theta])
    result = {"method": method.name, "estimates": out}
    truth = meta.get("truth")
    if truth and len(truth) == len(out):
        errs = [decompose_error(Pose2(*e[1:]), Pose2(*g)) for e, g in zip(out, truth)]
        result["lateral"] = percentile_table([e.lateral_m for e in errs])
        result["longitudinal"] = percentile_table([e.longitudinal_m for e in errs])
        print(f"lateral {result['lateral']}  longitudinal {result['longitudinal']}")
    if args.out:
        Path(args.out).write_text(json.dumps(result, sort_keys=True) + "\n")
        print(f"wrote {args.out}")
    else:
        print(f"{len(out)} estimates; final pose {out[-1][1:] if out else None}")
    return 0


# -- evaluation -------------------------------------------------------------------


def cmd_eval(args) -> int:
    path = _suite_path(args.suite)
    suite = load_suite(path)
    if args.seeds:
        suite = replace(suite, seeds=parse_seeds(args.seeds))
    methods = args.methods.split(",") if args.methods else None
    out = Path(args.out) if args.out else path.parent / "results" / suite.name
    out.mkdir(parents=True, exist_ok=True)

    def progress(seed, res):
        if not args.quiet:
            parts = [f"{n}={r.summary()['lateral']['p50']:.3f}/{r.summary()['longitudinal']['p50']:.3f}" for n, r in res.items()]
            print(f"seed {seed}: " + " ".join(parts), flush=True)

    report = run_experiment(suite, methods, progress=progress)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    (out / "timing.json").write_text(json.dumps(report.timing, sort_keys=True, indent=2) + "\n")
    np.savez_compressed(out / "artifacts.npz", **{k.replace("/", "__"): v for k, v in report.artifacts.items()})
    print(report.to_text())
    print(f"wrote {out / 'report.json'}")
    if args.check:
        gates = check_gates(report)
        bad = [g for g in gates if not g[1]]
        for name, ok, detail in gates:
            print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        return 1 if bad else 0
    return 0


def cmd_bench_correlate(args) -> int:
    from .observation import correlate_fft, correlate_spatial
    from .pose import Point2
    from .raster import Raster

    rng = np.random.default_rng(args.seed)
    print(f"{'obs':>12} {'lags':>9} {'spatial s':>10} {'fft s':>9} {'speedup':>8} {'max rel':>9}")
    for h, w in [tuple(int(v) for v in s.split("x")) for s in args.sizes]:
        obs = Raster(Point2(0, 0), 0.05, rng.random((h, w)))
        mp = Raster(Point2(0, 0), 0.05, rng.random((h + args.lat - 1, w + args.lon - 1)))
        t0 = time.perf_counter()
        a = correlate_spatial(obs, mp, args.lat, args.lon)
        t1 = time.perf_counter()
        b = correlate_fft(obs, mp, args.lat, args.lon)
        t2 = time.perf_counter()
        rel = float(np.abs(a - b).max() / np.abs(a).max())
        print(f"{h:>5}x{w:<6} {args.lat:>4}x{args.lon:<4} {t1 - t0:10.3f} {t2 - t1:9.4f} {(t1 - t0) / (t2 - t1):8.1f} {rel:9.2e}")
    return 0


def cmd_plot(args) -> int:
    from .plots import plot_run

    written = plot_run(args.run, args.out)
    for p in written:
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semloc", description="Semantic map localization toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("map-build", help="build a synthetic map and save it")
    s.add_argument("--scenario", help="suite/scenario config (INI); defaults if omitted")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_map_build)

    s = sub.add_parser("map-info", help="print the storage report of a map file")
    s.add_argument("file")
    s.add_argument("--area-km2", type=float, help="area to normalize by (default: map bounding box)")
    s.add_argument("--compare-dense", action="store_true", help="compare against a dense 5cm raster")
    s.set_defaults(func=cmd_map_info)

    s = sub.add_parser("simulate", help="simulate a sensor log for one seed")
    s.add_argument("--scenario")
    s.add_argument("--seed", type=int)
    s.add_argument("--stride", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--map-out")
    s.add_argument("--jsonl", help="also write a line-delimited text dump")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("localize", help="run one method over a frame log")
    s.add_argument("--method", required=True)
    s.add_argument("--map", required=True)
    s.add_argument("--log", required=True)
    s.add_argument("--config")
    s.add_argument("--init", help="initial pose x,y,theta")
    s.add_argument("--out")
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("eval", help="run an evaluation suite")
    s.add_argument("--suite", required=True, help="suite INI file or a directory holding suite.ini")
    s.add_argument("--out")
    s.add_argument("--methods", help="comma-separated override of the suite's methods")
    s.add_argument("--seeds", help="override seeds, e.g. 0-3")
    s.add_argument("--check", action="store_true", help="exit nonzero if any acceptance gate fails")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench-correlate", help="time spatial vs FFT correlation")
    s.add_argument("--sizes", nargs="+", default=["64x64", "150x300", "600x1200"])
    s.add_argument("--lat", type=int, default=31)
    s.add_argument("--lon", type=int, default=301)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench_correlate)

    s = sub.add_parser("plot", help="render figures for an eval run")
    s.add_argument("--run", required=True, help="report.json written by eval")
    s.add_argument("--out")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, MethodError, MapFormatError, FrameLogError, FileNotFoundError) as e:
        print(f"semloc: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
