"""Physical plant description: per-segment parameters and the robot model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from types import SimpleNamespace

import numpy as np

DEFAULT_GRAVITY = (0.0, 0.0, -9.81)


def hexagon_angles() -> tuple[float, ...]:
    return tuple(j * math.pi / 3.0 for j in range(6))


@dataclass(frozen=True)
class SegmentParams:
    """Geometry, inertia, stiffness and damping of one soft-rigid segment (SI units).

    ``d`` is the radial distance from the segment axis to the tendon routes and
    ``r`` the distance to the plate corners. ``phi`` holds the six corner angles
    measured from the segment x-axis. ``epsilon`` is the standoff kept between a
    corner and the base plate.
    """

    L0: float = 0.1
    d: float = 0.04
    r: float = 0.05
    mass: float = 0.15
    kappa_theta: float = 10.0
    kappa_L: float = 10.0
    beta_theta: float = 5.0
    beta_L: float = 5.0
    phi: tuple[float, ...] = field(default_factory=hexagon_angles)
    epsilon: float = 0.005

    def __post_init__(self):
        object.__setattr__(self, "phi", tuple(float(a) for a in self.phi))
        for name in ("L0", "d", "r", "mass", "epsilon"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive and finite, got {value!r}")
        for name in ("kappa_theta", "kappa_L", "beta_theta", "beta_L"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be non-negative and finite, got {value!r}")
        if len(self.phi) != 6:
            raise ValueError(f"phi needs exactly 6 corner angles, got {len(self.phi)}")
        for a in self.phi:
            if not 0.0 <= a < 2.0 * math.pi:
                raise ValueError(f"corner angle {a!r} outside [0, 2*pi)")


@dataclass(frozen=True)
class RobotModel:
    segments: tuple[SegmentParams, ...]
    gravity: tuple[float, float, float] = DEFAULT_GRAVITY

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))
        if len(self.segments) < 1:
            raise ValueError("a robot needs at least one segment")
        if len(self.gravity) != 3 or not all(math.isfinite(g) for g in self.gravity):
            raise ValueError(f"gravity must be a finite 3-vector, got {self.gravity!r}")

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def ndof(self) -> int:
        return 3 * len(self.segments)

    @property
    def n_constraints(self) -> int:
        return 6 * len(self.segments)

    def gravity_array(self) -> np.ndarray:
        return np.array(self.gravity, dtype=float)

    @cached_property
    def arrays(self) -> SimpleNamespace:
        """Per-segment parameters packed as arrays for the numeric kernels."""
        segs = self.segments
        return SimpleNamespace(
            L0=np.array([s.L0 for s in segs]),
            d=np.array([s.d for s in segs]),
            mass=np.array([s.mass for s in segs]),
            gravity=np.array(self.gravity, dtype=float),
            stiffness=np.concatenate(
                [[s.kappa_theta / s.d**2, s.kappa_theta / s.d**2, s.kappa_L] for s in segs]
            ),
            damping=np.concatenate(
                [[s.beta_theta / s.d**2, s.beta_theta / s.d**2, s.beta_L] for s in segs]
            ),
        )


def reference_robot(**overrides) -> RobotModel:
    """Two identical segments with the parameters of the reference simulation."""
    gravity = overrides.pop("gravity", DEFAULT_GRAVITY)
    seg = SegmentParams(**overrides)
    return RobotModel(segments=(seg, seg), gravity=gravity)


def validate_config(q, model: RobotModel) -> np.ndarray:
    """Return ``q`` as a float array after checking length and corner-arc positivity.

    Each segment needs ``L0 + dL - (r/d)|Delta| > 0`` so that every plate corner
    sits on an arc of positive length.
    """
    q = np.asarray(q, dtype=float)
    if q.shape != (model.ndof,):
        raise ValueError(f"configuration must have length {model.ndof}, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValueError("configuration has non-finite entries")
    for i, seg in enumerate(model.segments):
        dx, dy, dl = q[3 * i : 3 * i + 3]
        margin = seg.L0 + dl - (seg.r / seg.d) * math.hypot(dx, dy)
        if margin <= 0:
            raise ValueError(
                f"segment {i}: corner arc length {margin:.6g} m is not positive "
                f"(L0 + dL - (r/d)|Delta| must be > 0)"
            )
    return q


def validate_rate(qdot, model: RobotModel) -> np.ndarray:
    qdot = np.asarray(qdot, dtype=float)
    if qdot.shape != (model.ndof,):
        raise ValueError(f"velocity must have length {model.ndof}, got shape {qdot.shape}")
    if not np.all(np.isfinite(qdot)):
        raise ValueError("velocity has non-finite entries")
    return qdot
