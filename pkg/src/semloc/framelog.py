"""Binary frame logs.

Layout (little-endian)::

    header   magic "SLFL" | u16 version | u32 meta length | meta (UTF-8 JSON)
    record*  u32 payload length | payload

A payload holds one :class:`ObservationFrame`: index, timestamp, motion delta
and covariance, an optional GPS fix and two optional rasters.  Raster values
are zlib-compressed; single-precision rasters whose values are exact multiples
of 1/255 are stored as bytes.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .bayes_filter import MotionIncrement
from .observation import GpsFix
from .pose import Point2, Pose2
from .raster import Raster
from .simulator import ObservationFrame

LOG_MAGIC = b"SLFL"
LOG_VERSION = 1

_HEAD = struct.Struct("<4sHI")
_LEN = struct.Struct("<I")
_FIXED = struct.Struct("<qd3d9dB3d")  # index, t, delta, cov, has_gps, gps x/y/t
_RASTER = struct.Struct("<B3dIIBI")  # present, origin x/y, res, h, w, encoding, nbytes

_ENC_F4, _ENC_F8, _ENC_U8 = 0, 1, 2
_U8_SCALE = np.float32(255.0)


class FrameLogError(ValueError):
    def __init__(self, message: str, offset: int | None = None, frame: int | None = None):
        where = []
        if frame is not None:
            where.append(f"frame {frame}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.frame = frame


def _encode_raster(r: Raster | None) -> bytes:
    if r is None:
        return _RASTER.pack(0, 0.0, 0.0, 0.0, 0, 0, 0, 0)
    v = r.values
    if v.dtype == np.float32:
        q = np.rint(v * _U8_SCALE)
        if q.min(initial=0) >= 0 and q.max(initial=0) <= 255 and np.array_equal(
            q.astype(np.float32) / _U8_SCALE, v
        ):
            enc, raw = _ENC_U8, q.astype(np.uint8).tobytes()
        else:
            enc, raw = _ENC_F4, v.astype("<f4").tobytes()
    elif v.dtype == np.float64:
        enc, raw = _ENC_F8, v.astype("<f8").tobytes()
    else:
        raise TypeError(f"unsupported raster dtype {v.dtype}")
    body = zlib.compress(raw, 6)
    h, w = v.shape
    return _RASTER.pack(1, r.origin.x, r.origin.y, r.resolution, h, w, enc, len(body)) + body


def _encode_frame(f: ObservationFrame) -> bytes:
    d = f.motion.delta
    g = f.gps
    gx, gy, gt = (g.position.x, g.position.y, g.timestamp) if g is not None else (0.0, 0.0, 0.0)
    fixed = _FIXED.pack(
        int(f.index), float(f.timestamp), d.x, d.y, d.theta, *f.motion.covariance.ravel(), g is not None, gx, gy, gt
    )
    return fixed + _encode_raster(f.lane_obs) + _encode_raster(f.sign_obs)


def _decode_raster(buf: memoryview, pos: int, base: int, frame: int) -> tuple[Raster | None, int]:
    if pos + _RASTER.size > len(buf):
        raise FrameLogError("raster header truncated", base + pos, frame)
    present, ox, oy, res, h, w, enc, nbytes = _RASTER.unpack_from(buf, pos)
    pos += _RASTER.size
    if not present:
        return None, pos
    if pos + nbytes > len(buf):
        raise FrameLogError("raster body truncated", base + pos, frame)
    try:
        raw = zlib.decompress(bytes(buf[pos : pos + nbytes]))
    except zlib.error as e:
        raise FrameLogError(f"corrupt raster body: {e}", base + pos, frame) from None
    if enc == _ENC_U8:
        dt, size = np.uint8, 1
    elif enc == _ENC_F4:
        dt, size = np.dtype("<f4"), 4
    elif enc == _ENC_F8:
        dt, size = np.dtype("<f8"), 8
    else:
        raise FrameLogError(f"unknown raster encoding {enc}", base + pos, frame)
    if len(raw) != h * w * size:
        raise FrameLogError("raster size does not match its shape", base + pos, frame)
    vals = np.frombuffer(raw, dtype=dt).reshape(h, w)
    if enc == _ENC_U8:
        vals = vals.astype(np.float32) / _U8_SCALE
    else:
        vals = vals.astype(vals.dtype.newbyteorder("="))
    try:
        r = Raster(Point2(ox, oy), res, vals)
    except ValueError as e:
        raise FrameLogError(f"invalid raster: {e}", base + pos, frame) from None
    return r, pos + nbytes


def _decode_frame(payload: memoryview, base: int, frame: int) -> ObservationFrame:
    if len(payload) < _FIXED.size:
        raise FrameLogError("frame header truncated", base, frame)
    vals = _FIXED.unpack_from(payload, 0)
    index, t = vals[0], vals[1]
    delta = Pose2(*vals[2:5])
    cov = np.array(vals[5:14]).reshape(3, 3)
    has_gps, gx, gy, gt = vals[14:18]
    try:
        motion = MotionIncrement(delta, cov)
    except ValueError as e:
        raise FrameLogError(f"invalid motion: {e}", base, frame) from None
    gps = GpsFix(Point2(gx, gy), gt) if has_gps else None
    pos = _FIXED.size
    lane, pos = _decode_raster(payload, pos, base, frame)
    sign, pos = _decode_raster(payload, pos, base, frame)
    if pos != len(payload):
        raise FrameLogError("trailing bytes in frame record", base + pos, frame)
    return ObservationFrame(int(index), float(t), motion, gps, lane, sign)


def record(frames, path, meta: dict | None = None) -> int:
    """Write ``frames`` (any iterable) to ``path``; returns the frame count."""
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode()
    n = 0
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(LOG_MAGIC, LOG_VERSION, len(meta_raw)))
        fh.write(meta_raw)
        for f in frames:
            payload = _encode_frame(f)
            fh.write(_LEN.pack(len(payload)))
            fh.write(payload)
            n += 1
    return n


def _open(data: bytes) -> tuple[dict, int]:
    if len(data) < _HEAD.size:
        raise FrameLogError("file shorter than header", 0)
    magic, version, meta_len = _HEAD.unpack_from(data, 0)
    if magic != LOG_MAGIC:
        raise FrameLogError(f"bad magic {magic!r}", 0)
    if version != LOG_VERSION:
        raise FrameLogError(f"unsupported log version {version} (expected {LOG_VERSION})", 4)
    pos = _HEAD.size
    if pos + meta_len > len(data):
        raise FrameLogError("metadata truncated", pos)
    try:
        meta = json.loads(data[pos : pos + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FrameLogError(f"bad metadata: {e}", pos) from None
    return meta, pos + meta_len


def iter_log(path):
    """Yield frames from a log file one at a time."""
    data = Path(path).read_bytes()
    _, pos = _open(data)
    view = memoryview(data)
    k = 0
    while pos < len(data):
        if pos + _LEN.size > len(data):
            raise FrameLogError("record length truncated", pos, k)
        (n,) = _LEN.unpack_from(data, pos)
        start = pos + _LEN.size
        if start + n > len(data):
            raise FrameLogError(f"record truncated: need {n} bytes, have {len(data) - start}", start, k)
        yield _decode_frame(view[start : start + n], start, k)
        pos = start + n
        k += 1


def replay(path) -> list[ObservationFrame]:
    return list(iter_log(path))


def read_meta(path) -> dict:
    data = Path(path).read_bytes()
    meta, _ = _open(data)
    return meta


def _raster_summary(r: Raster | None):
    if r is None:
        return None
    v = r.values
    return {
        "origin": [r.origin.x, r.origin.y],
        "resolution": r.resolution,
        "shape": list(v.shape),
        "nonzero": int(np.count_nonzero(v)),
        "sum": float(v.sum(dtype=np.float64)),
        "max": float(v.max(initial=0.0)),
    }


def frame_to_json(f: ObservationFrame) -> dict:
    d = f.motion.delta
    return {
        "index": f.index,
        "timestamp": f.timestamp,
        "motion": {"delta": [d.x, d.y, d.theta], "covariance": f.motion.covariance.tolist()},
        "gps": None if f.gps is None else [f.gps.position.x, f.gps.position.y, f.gps.timestamp],
        "lane_obs": _raster_summary(f.lane_obs),
        "sign_obs": _raster_summary(f.sign_obs),
    }


def export_jsonl(frames, path) -> int:
    """Line-delimited JSON dump for debugging (raster summaries, not pixels)."""
    n = 0
    with open(path, "w") as fh:
        for f in frames:
            fh.write(json.dumps(frame_to_json(f), sort_keys=True) + "\n")
            n += 1
    return n
