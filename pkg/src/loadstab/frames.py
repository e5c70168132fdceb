"""Per-unit bases and complex dq/DQ phasor arithmetic.

All rotating quantities are represented as (d, q) real pairs so that every
Jacobian in the toolkit stays real-valued; complex arithmetic is a
convenience layer on top. The network frame rotates at the fixed
synchronous speed, device frames rotate with their own controllers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from loadstab.errors import InvalidParameterError

NETWORK_FRAME = "network-DQ"
DEVICE_FRAME = "device-dq"

TWO_PI_60 = 2.0 * math.pi * 60.0


@dataclass(frozen=True)
class PerUnitBase:
    """System per-unit base quantities.

    omega_b is the angular-frequency base in rad/s; omega_s is the
    synchronous speed in per unit and is fixed at 1.0. s_base is
    informational only (all model equations are already in per unit).
    """

    omega_b: float = TWO_PI_60
    omega_s: float = 1.0
    s_base: float = 1.0

    def __post_init__(self):
        if not (self.omega_b > 0.0):
            raise InvalidParameterError(f"omega_b must be > 0, got {self.omega_b}")
        if self.omega_s != 1.0:
            raise InvalidParameterError("omega_s is fixed at 1.0 p.u.")


@dataclass(frozen=True)
class Phasor:
    """Complex quantity d + jq in a named rotating frame, per unit.

    Arithmetic requires both operands to share a frame; rotate_frame is
    the only operation that changes the frame tag.
    """

    d: float
    q: float = 0.0
    frame: str = NETWORK_FRAME

    def __post_init__(self):
        if self.frame not in (NETWORK_FRAME, DEVICE_FRAME):
            raise InvalidParameterError(f"unknown frame tag {self.frame!r}")
        if not (math.isfinite(self.d) and math.isfinite(self.q)):
            raise InvalidParameterError("phasor components must be finite")

    @classmethod
    def from_complex(cls, z: complex, frame: str = NETWORK_FRAME) -> "Phasor":
        return cls(float(np.real(z)), float(np.imag(z)), frame)

    @classmethod
    def from_polar(cls, mag: float, angle: float, frame: str = NETWORK_FRAME) -> "Phasor":
        return cls(mag * math.cos(angle), mag * math.sin(angle), frame)

    def as_complex(self) -> complex:
        return complex(self.d, self.q)

    @property
    def magnitude(self) -> float:
        return math.hypot(self.d, self.q)

    @property
    def angle(self) -> float:
        return math.atan2(self.q, self.d)

    def _check_frame(self, other: "Phasor"):
        if self.frame != other.frame:
            raise InvalidParameterError(
                f"frame mismatch: {self.frame} vs {other.frame}"
            )

    def __add__(self, other: "Phasor") -> "Phasor":
        self._check_frame(other)
        return Phasor(self.d + other.d, self.q + other.q, self.frame)

    def __sub__(self, other: "Phasor") -> "Phasor":
        self._check_frame(other)
        return Phasor(self.d - other.d, self.q - other.q, self.frame)

    def __neg__(self) -> "Phasor":
        return Phasor(-self.d, -self.q, self.frame)

    def __mul__(self, other) -> "Phasor":
        if isinstance(other, Phasor):
            self._check_frame(other)
            z = self.as_complex() * other.as_complex()
            return Phasor.from_complex(z, self.frame)
        return Phasor(self.d * other, self.q * other, self.frame)

    __rmul__ = __mul__

    def conjugate(self) -> "Phasor":
        return Phasor(self.d, -self.q, self.frame)


def rotate_frame(p: Phasor, angle: float) -> Phasor:
    """Rotate a phasor by ``angle`` radians: returns p * exp(j*angle).

    Magnitude is preserved; the frame tag flips between the network and
    device frames (rotation is the dq <-> DQ transform).
    """
    if not math.isfinite(angle):
        raise InvalidParameterError("rotation angle must be finite")
    c, s = math.cos(angle), math.sin(angle)
    flipped = DEVICE_FRAME if p.frame == NETWORK_FRAME else NETWORK_FRAME
    return Phasor(c * p.d - s * p.q, s * p.d + c * p.q, flipped)


def rot(z: complex, angle: float) -> complex:
    """Bare complex rotation helper used inside residual evaluators."""
    return z * complex(math.cos(angle), math.sin(angle))
