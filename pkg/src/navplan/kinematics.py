"""Planar trajectory, control, and ego-state types plus the discrete
unicycle model that integrates control actions into waypoints.

Conventions shared by every module in the package:

- ego frame: x forward, y left, heading measured counter-clockwise with
  0 along +x;
- positive curvature turns left (yaw rate = speed * curvature);
- headings are normalized to (-pi, pi];
- speed is clamped at zero, the model never reverses.

The integration scheme is explicit Euler with a fixed update order per
step: position moves with the current speed and heading, then heading is
advanced with the current speed and curvature, then speed is advanced
with the acceleration (and clamped at zero).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientHistory, InvalidInput

_TWO_PI = 2.0 * math.pi


def normalize_angle(angle: float) -> float:
    """Wrap an angle to the half-open interval (-pi, pi]."""
    return math.pi - (math.pi - angle) % _TWO_PI


def _require_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise InvalidInput(f"{name} must be finite, got {v!r}")


@dataclass(frozen=True, slots=True)
class Pose2D:
    """Planar pose; heading is normalized on construction."""

    x: float
    y: float
    heading: float

    def __post_init__(self) -> None:
        _require_finite("pose", self.x, self.y, self.heading)
        object.__setattr__(self, "heading", normalize_angle(self.heading))


@dataclass(frozen=True, slots=True)
class Trajectory:
    """Time-indexed sequence of 2-D waypoints with a fixed sampling period.

    ``points`` is an (T, 2) float array in meters; row ``t`` is the
    position at time ``(t + 1) * dt`` relative to the frame origin.
    """

    points: np.ndarray
    dt: float = 0.5

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise InvalidInput(f"trajectory points must be (T, 2), got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidInput("trajectory points must be finite")
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise InvalidInput(f"dt must be positive, got {self.dt!r}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True, slots=True)
class KinematicState:
    """Initial condition for a rollout: position, heading, speed."""

    position: tuple[float, float] = (0.0, 0.0)
    heading: float = 0.0
    speed: float = 0.0

    def __post_init__(self) -> None:
        _require_finite("state", *self.position, self.heading, self.speed)
        if self.speed < 0:
            raise InvalidInput(f"speed must be non-negative, got {self.speed}")
        object.__setattr__(self, "heading", normalize_angle(self.heading))


@dataclass(frozen=True, slots=True)
class ControlSequence:
    """Per-step (acceleration, curvature) pairs.

    ``steps`` is an (T, 2) float array; column 0 is acceleration in
    m/s^2, column 1 is curvature in 1/m.
    """

    steps: np.ndarray
    dt: float = 0.5

    def __post_init__(self) -> None:
        steps = np.asarray(self.steps, dtype=float)
        if steps.ndim != 2 or steps.shape[1] != 2:
            raise InvalidInput(f"control steps must be (T, 2), got shape {steps.shape}")
        if not np.all(np.isfinite(steps)):
            raise InvalidInput("control steps must be finite")
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise InvalidInput(f"dt must be positive, got {self.dt!r}")
        steps.setflags(write=False)
        object.__setattr__(self, "steps", steps)

    def __len__(self) -> int:
        return self.steps.shape[0]

    @property
    def accels(self) -> np.ndarray:
        return self.steps[:, 0]

    @property
    def kappas(self) -> np.ndarray:
        return self.steps[:, 1]

    @classmethod
    def zeros(cls, n: int, dt: float = 0.5) -> "ControlSequence":
        return cls(steps=np.zeros((n, 2)), dt=dt)


@dataclass(frozen=True, slots=True)
class EgoState:
    """Instantaneous motion summary: speed, yaw rate, acceleration."""

    speed: float
    yaw_rate: float
    accel: float

    def __post_init__(self) -> None:
        _require_finite("ego state", self.speed, self.yaw_rate, self.accel)
        if self.speed < 0:
            raise InvalidInput(f"speed must be non-negative, got {self.speed}")


def rollout_states(
    controls: ControlSequence, init: KinematicState
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Integrate the unicycle model and return the full state history.

    Returns ``(positions, headings, speeds, clamped)`` where ``positions``
    is (T, 2) with row t the position after t+1 steps, ``headings`` and
    ``speeds`` have length T+1 (index t is the value *entering* step t,
    index 0 being the initial condition), and ``clamped`` is a boolean
    (T,) mask marking steps whose speed update hit the zero clamp.

    Headings are kept continuous (not wrapped) so downstream fitting can
    difference them safely.
    """
    n = len(controls)
    if n == 0:
        raise InvalidInput("control sequence must be non-empty")
    dt = controls.dt

    positions = np.empty((n, 2))
    headings = np.empty(n + 1)
    speeds = np.empty(n + 1)
    clamped = np.zeros(n, dtype=bool)

    x, y = init.position
    theta = init.heading
    v = init.speed
    headings[0] = theta
    speeds[0] = v
    for t in range(n):
        accel, kappa = controls.steps[t]
        x += v * math.cos(theta) * dt
        y += v * math.sin(theta) * dt
        positions[t, 0] = x
        positions[t, 1] = y
        theta = theta + v * kappa * dt
        v_next = v + accel * dt
        if v_next < 0.0:
            v_next = 0.0
            clamped[t] = True
        v = v_next
        headings[t + 1] = theta
        speeds[t + 1] = v
    return positions, headings, speeds, clamped


def rollout(controls: ControlSequence, init: KinematicState) -> Trajectory:
    """Integrate a control sequence into waypoints.

    Point ``t`` of the result is the position after ``t + 1`` integration
    steps; the initial position itself is not included.
    """
    positions, _, _, _ = rollout_states(controls, init)
    return Trajectory(points=positions, dt=controls.dt)


def derive_ego_state(poses: list[tuple[Pose2D, float]]) -> EgoState:
    """Backward-difference speed, yaw rate, and acceleration at the last pose.

    ``poses`` is a list of (pose, timestamp-in-seconds) with strictly
    increasing timestamps; at least three entries are required so the
    acceleration has two speed estimates to difference.
    """
    if len(poses) < 3:
        raise InsufficientHistory(f"need at least 3 timestamped poses, got {len(poses)}")
    times = [t for _, t in poses]
    for a, b in zip(times, times[1:]):
        if not b > a:
            raise InvalidInput(f"timestamps must be strictly increasing, got {a} then {b}")

    (p2, t2), (p1, t1), (p0, t0) = poses[-3], poses[-2], poses[-1]
    dt_last = t0 - t1
    dt_prev = t1 - t2
    speed = math.hypot(p0.x - p1.x, p0.y - p1.y) / dt_last
    speed_prev = math.hypot(p1.x - p2.x, p1.y - p2.y) / dt_prev
    yaw_rate = normalize_angle(p0.heading - p1.heading) / dt_last
    accel = (speed - speed_prev) / dt_last
    return EgoState(speed=speed, yaw_rate=yaw_rate, accel=accel)


def to_ego_frame(
    global_points: np.ndarray, ref: Pose2D, dt: float = 0.5
) -> Trajectory:
    """Express global points in the ego frame anchored at ``ref``.

    ``ref`` maps to the origin with heading 0; x points forward along the
    reference heading and y points left.
    """
    pts = np.asarray(global_points, dtype=float).reshape(-1, 2)
    c, s = math.cos(ref.heading), math.sin(ref.heading)
    dx = pts[:, 0] - ref.x
    dy = pts[:, 1] - ref.y
    local = np.column_stack((c * dx + s * dy, -s * dx + c * dy))
    return Trajectory(points=local, dt=dt)


def from_ego_frame(local_points: np.ndarray, ref: Pose2D) -> np.ndarray:
    """Inverse of :func:`to_ego_frame`; returns global (N, 2) points."""
    pts = np.asarray(local_points, dtype=float).reshape(-1, 2)
    c, s = math.cos(ref.heading), math.sin(ref.heading)
    gx = c * pts[:, 0] - s * pts[:, 1] + ref.x
    gy = s * pts[:, 0] + c * pts[:, 1] + ref.y
    return np.column_stack((gx, gy))
