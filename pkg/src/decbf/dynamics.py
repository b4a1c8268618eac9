"""Agent dynamics: 2D double integrator and the 3D drone model.

State layouts
-------------
2D: ``[x, y, vx, vy]``, control ``[ax, ay]``.
3D: ``[x, y, z, vx, vy, vz, theta_x, theta_y]``, control ``[omega_x, omega_y, a_z]``
with ``d(vx)/dt = g tan(theta_x)``, ``d(vy)/dt = g tan(theta_y)``, ``d(vz)/dt = a_z``.

All functions accept a single state of shape ``(n,)`` or a batch ``(B, n)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ModelError, NumericError, SingularityError

ANGLE_MARGIN = 0.05
ANGLE_LIMIT = np.pi / 2 - ANGLE_MARGIN


class Tag(str, Enum):
    DOUBLE_INTEGRATOR_2D = "DoubleIntegrator2D"
    DRONE_3D = "Drone3D"


@dataclass(frozen=True)
class DynamicsKind:
    tag: Tag
    control_low: tuple
    control_high: tuple
    gravity: float = 9.8
    dt: float = 0.03
    _B: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "tag", Tag(self.tag))
        lo = np.asarray(self.control_low, dtype=float)
        hi = np.asarray(self.control_high, dtype=float)
        if lo.shape != (self.control_dim,) or hi.shape != (self.control_dim,):
            raise ModelError(f"{self.tag.value} expects {self.control_dim} control bounds")
        if not np.all(lo < hi):
            raise ModelError("control_low must be < control_high componentwise")
        if self.tag is Tag.DRONE_3D and not self.gravity > 0:
            raise ModelError("gravity must be positive for Drone3D")
        if not self.dt > 0:
            raise ModelError("dt must be positive")
        object.__setattr__(self, "control_low", tuple(float(v) for v in lo))
        object.__setattr__(self, "control_high", tuple(float(v) for v in hi))
        B = np.zeros((self.state_dim, self.control_dim))
        if self.tag is Tag.DOUBLE_INTEGRATOR_2D:
            B[2, 0] = B[3, 1] = 1.0
        else:
            B[6, 0] = B[7, 1] = B[5, 2] = 1.0
        object.__setattr__(self, "_B", B)

    @classmethod
    def double_integrator_2d(cls, accel_limit=4.0, dt=0.03):
        return cls(Tag.DOUBLE_INTEGRATOR_2D, (-accel_limit,) * 2, (accel_limit,) * 2, dt=dt)

    @classmethod
    def drone_3d(cls, rate_limit=1.0, accel_limit=4.0, gravity=9.8, dt=0.02):
        return cls(
            Tag.DRONE_3D,
            (-rate_limit, -rate_limit, -accel_limit),
            (rate_limit, rate_limit, accel_limit),
            gravity=gravity,
            dt=dt,
        )

    @property
    def state_dim(self) -> int:
        return 4 if self.tag is Tag.DOUBLE_INTEGRATOR_2D else 8

    @property
    def control_dim(self) -> int:
        return 2 if self.tag is Tag.DOUBLE_INTEGRATOR_2D else 3

    @property
    def pos_dim(self) -> int:
        return 2 if self.tag is Tag.DOUBLE_INTEGRATOR_2D else 3

    @property
    def angle_slice(self) -> slice:
        # empty for the 2D model
        return slice(6, 8) if self.tag is Tag.DRONE_3D else slice(4, 4)

    @property
    def control_matrix(self) -> np.ndarray:
        """Maps a control vector into the state derivative (``B`` in ``f = a(s) + B u``)."""
        return self._B

    @property
    def low(self) -> np.ndarray:
        return np.asarray(self.control_low)

    @property
    def high(self) -> np.ndarray:
        return np.asarray(self.control_high)

    def to_dict(self) -> dict:
        return {
            "tag": self.tag.value,
            "control_low": list(self.control_low),
            "control_high": list(self.control_high),
            "gravity": self.gravity,
            "dt": self.dt,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DynamicsKind":
        return cls(
            Tag(d["tag"]),
            tuple(d["control_low"]),
            tuple(d["control_high"]),
            gravity=float(d.get("gravity", 9.8)),
            dt=float(d.get("dt", 0.03 if d["tag"] == Tag.DOUBLE_INTEGRATOR_2D.value else 0.02)),
        )


def _check(kind: DynamicsKind, state, control=None):
    state = np.asarray(state, dtype=float)
    if state.shape[-1:] != (kind.state_dim,):
        raise ModelError(f"state has shape {state.shape}, expected (..., {kind.state_dim})")
    if control is not None:
        control = np.asarray(control, dtype=float)
        if control.shape[-1:] != (kind.control_dim,):
            raise ModelError(f"control has shape {control.shape}, expected (..., {kind.control_dim})")
    return state, control


def drift(kind: DynamicsKind, state) -> np.ndarray:
    """Control-free part of the derivative, ``a(s)``."""
    state, _ = _check(kind, state)
    out = np.zeros_like(state)
    if kind.tag is Tag.DOUBLE_INTEGRATOR_2D:
        out[..., 0:2] = state[..., 2:4]
        return out
    theta = state[..., 6:8]
    if np.any(np.abs(theta) >= np.pi / 2):
        raise SingularityError("tilt angle at or beyond pi/2")
    out[..., 0:3] = state[..., 3:6]
    out[..., 3:5] = kind.gravity * np.tan(theta)
    return out


def deriv(kind: DynamicsKind, state, control) -> np.ndarray:
    """Time derivative ``ds/dt = f(s, u)``."""
    state, control = _check(kind, state, control)
    return drift(kind, state) + control @ kind.control_matrix.T


def clamp_control(kind: DynamicsKind, control) -> np.ndarray:
    control = np.asarray(control, dtype=float)
    if control.shape[-1:] != (kind.control_dim,):
        raise ModelError(f"control has shape {control.shape}, expected (..., {kind.control_dim})")
    return np.clip(control, kind.low, kind.high)


def clamp_angles(kind: DynamicsKind, state) -> np.ndarray:
    if kind.tag is Tag.DRONE_3D:
        state = np.array(state, dtype=float)
        state[..., 6:8] = np.clip(state[..., 6:8], -ANGLE_LIMIT, ANGLE_LIMIT)
    return state


def step(kind: DynamicsKind, state, control, dt=None) -> np.ndarray:
    """One explicit-Euler step with clamped control and clamped tilt angles."""
    dt = kind.dt if dt is None else dt
    if not dt > 0:
        raise ModelError("dt must be positive")
    state, control = _check(kind, state, control)
    u = clamp_control(kind, control)
    nxt = clamp_angles(kind, state + dt * deriv(kind, state, u))
    if not np.all(np.isfinite(nxt)):
        raise NumericError("non-finite state after integration")
    return nxt


def step_graph(kind: DynamicsKind, state, u, dt=None):
    """Euler step with a differentiable control input.

    ``state`` is a constant array; ``u`` is a :class:`~decbf.micrograd.Tensor`.
    Control is not clamped here (callers feed already-bounded actions or a
    deliberately unclamped refinement); tilt angles are clipped.
    """
    from . import micrograd as mg

    dt = kind.dt if dt is None else dt
    state, _ = _check(kind, state)
    base = state + dt * drift(kind, state)
    nxt = mg.affine_const(u, dt * kind.control_matrix) + base
    if kind.tag is Tag.DRONE_3D:
        lo = np.full(kind.state_dim, -np.inf)
        hi = np.full(kind.state_dim, np.inf)
        lo[6:8], hi[6:8] = -ANGLE_LIMIT, ANGLE_LIMIT
        nxt = mg.clip(nxt, lo, hi)
    return nxt
