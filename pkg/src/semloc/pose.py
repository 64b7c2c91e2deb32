"""SE(2) pose algebra.

Poses are ``(x, y, theta)`` with the heading kept in ``(-pi, pi]``.  The
scalar :class:`Pose2` is used for anchors and estimates; the ``*_arrays``
helpers do the same algebra on broadcastable numpy arrays and are what the
filter uses on whole grids.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta):
    """Wrap an angle (or array of angles) into ``(-pi, pi]``."""
    if isinstance(theta, np.ndarray):
        out = theta - TWO_PI * np.floor((theta + math.pi) / TWO_PI)
        return np.where(out <= -math.pi, out + TWO_PI, out)
    out = theta - TWO_PI * math.floor((theta + math.pi) / TWO_PI)
    if out <= -math.pi:
        out += TWO_PI
    return out


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls(0.0, 0.0, 0.0)

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)

    def __matmul__(self, other: "Pose2") -> "Pose2":
        return compose(self, other)

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.theta)


def compose(a: Pose2, b: Pose2) -> Pose2:
    """``a (+) b``: pose ``b`` given in frame ``a``, expressed in a's parent."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.theta + b.theta)


def inverse_compose(a: Pose2, b: Pose2) -> Pose2:
    """``a (-) b``: pose ``a`` expressed in frame ``b``, so ``compose(b, a (-) b) == a``."""
    c, s = math.cos(b.theta), math.sin(b.theta)
    dx, dy = a.x - b.x, a.y - b.y
    return Pose2(c * dx + s * dy, -s * dx + c * dy, a.theta - b.theta)


def transform_point(p: Pose2, q: Point2) -> Point2:
    c, s = math.cos(p.theta), math.sin(p.theta)
    return Point2(p.x + c * q.x - s * q.y, p.y + s * q.x + c * q.y)


def angle_diff(a, b):
    """Signed difference ``a - b`` wrapped into ``(-pi, pi]``."""
    return wrap_angle(a - b)


def poses_close(a: Pose2, b: Pose2, tol: float = 1e-9) -> bool:
    return (
        abs(a.x - b.x) <= tol
        and abs(a.y - b.y) <= tol
        and abs(angle_diff(a.theta, b.theta)) <= tol
    )


# -- array forms ------------------------------------------------------------


def compose_arrays(ax, ay, at, bx, by, bt):
    c, s = np.cos(at), np.sin(at)
    return ax + c * bx - s * by, ay + s * bx + c * by, wrap_angle(at + bt)


def inverse_compose_arrays(ax, ay, at, bx, by, bt):
    c, s = np.cos(bt), np.sin(bt)
    dx, dy = ax - bx, ay - by
    return c * dx + s * dy, -s * dx + c * dy, wrap_angle(at - bt)


def transform_points(p: Pose2, pts: np.ndarray) -> np.ndarray:
    """Apply ``p`` to an ``(N, 2)`` array of points."""
    c, s = math.cos(p.theta), math.sin(p.theta)
    pts = np.asarray(pts, dtype=float)
    out = np.empty_like(pts)
    out[:, 0] = p.x + c * pts[:, 0] - s * pts[:, 1]
    out[:, 1] = p.y + s * pts[:, 0] + c * pts[:, 1]
    return out


def inverse_transform_points(p: Pose2, pts: np.ndarray) -> np.ndarray:
    """Express map-frame points in the frame of ``p``."""
    c, s = math.cos(p.theta), math.sin(p.theta)
    pts = np.asarray(pts, dtype=float)
    dx = pts[:, 0] - p.x
    dy = pts[:, 1] - p.y
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=1)
