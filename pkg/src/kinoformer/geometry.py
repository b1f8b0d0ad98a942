"""Pose algebra: world poses, body-frame deltas, actions.

Convention: right-handed, z up, rotation R = Rz(yaw) @ Ry(pitch) @ Rx(roll).
All functions are vectorised over leading dimensions of ``(..., 6)`` arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    out = np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2.0 * np.pi)
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True)
class Pose6:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        for k in ("roll", "pitch", "yaw"):
            object.__setattr__(self, k, wrap_angle(getattr(self, k)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.roll, self.pitch, self.yaw])

    @classmethod
    def from_array(cls, a) -> "Pose6":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class PoseDelta:
    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    droll: float = 0.0
    dpitch: float = 0.0
    dyaw: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz, self.droll, self.dpitch, self.dyaw])

    @classmethod
    def from_array(cls, a) -> "PoseDelta":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class Action:
    throttle: float = 0.0
    steering: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "throttle", float(np.clip(self.throttle, -1.0, 1.0)))
        object.__setattr__(self, "steering", float(np.clip(self.steering, -1.0, 1.0)))

    def as_array(self) -> np.ndarray:
        return np.array([self.throttle, self.steering])


def rotation(roll, pitch, yaw) -> np.ndarray:
    """Body-to-world rotation matrices, shape (..., 3, 3)."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    r = np.empty(np.shape(roll) + (3, 3))
    r[..., 0, 0] = cy * cp
    r[..., 0, 1] = cy * sp * sr - sy * cr
    r[..., 0, 2] = cy * sp * cr + sy * sr
    r[..., 1, 0] = sy * cp
    r[..., 1, 1] = sy * sp * sr + cy * cr
    r[..., 1, 2] = sy * sp * cr - cy * sr
    r[..., 2, 0] = -sp
    r[..., 2, 1] = cp * sr
    r[..., 2, 2] = cp * cr
    return r


def _arr(p) -> np.ndarray:
    if isinstance(p, (Pose6, PoseDelta)):
        return p.as_array()
    return np.asarray(p, dtype=np.float64)


def relative_pose_array(p, q) -> np.ndarray:
    p, q = _arr(p), _arr(q)
    rot = rotation(p[..., 3], p[..., 4], p[..., 5])
    d = q[..., :3] - p[..., :3]
    out = np.empty(np.broadcast_shapes(p.shape, q.shape))
    out[..., :3] = np.einsum("...ji,...j->...i", rot, d)
    out[..., 3:] = wrap_angle(q[..., 3:] - p[..., 3:])
    return out


def compose_pose_array(p, d) -> np.ndarray:
    p, d = _arr(p), _arr(d)
    rot = rotation(p[..., 3], p[..., 4], p[..., 5])
    out = np.empty(np.broadcast_shapes(p.shape, d.shape))
    out[..., :3] = p[..., :3] + np.einsum("...ij,...j->...i", rot, d[..., :3])
    out[..., 3:] = wrap_angle(p[..., 3:] + d[..., 3:])
    return out


def relative_pose(p: Pose6, q: Pose6) -> PoseDelta:
    """Delta from ``p`` to ``q``; translation expressed in ``p``'s body frame."""
    return PoseDelta.from_array(relative_pose_array(p, q))


def compose_pose(p: Pose6, d: PoseDelta) -> Pose6:
    return Pose6.from_array(compose_pose_array(p, d))


def chain_deltas(start, deltas) -> np.ndarray:
    """Compose a (..., n, 6) delta sequence onto (..., 6) start poses."""
    deltas = np.asarray(deltas, dtype=np.float64)
    cur = np.asarray(start, dtype=np.float64)
    out = np.empty(np.broadcast_shapes(cur.shape[:-1], deltas.shape[:-2]) + deltas.shape[-2:])
    for k in range(deltas.shape[-2]):
        cur = compose_pose_array(cur, deltas[..., k, :])
        out[..., k, :] = cur
    return out
