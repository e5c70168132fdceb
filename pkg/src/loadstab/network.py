"""QSP algebraic network and dynamic-phasor EMT branch models.

Everything here operates on bare complex numbers in the network DQ frame
(rotating at the synchronous speed); the Phasor wrapper is accepted at the
public entry points. The two-bus topology (source terminal, series line,
load bus, optional shunts) is wired in :mod:`loadstab.system`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from loadstab.errors import DimensionError, InvalidParameterError
from loadstab.frames import PerUnitBase, Phasor


@dataclass(frozen=True)
class LineParams:
    """Series branch: resistance r and reactance x at synchronous speed.

    The per-unit inductance is l = x / omega_s, so with omega_s = 1 the
    reactance and inductance coincide numerically.
    """

    r: float
    x: float
    omega_s: float = 1.0

    def __post_init__(self):
        if self.r < 0.0:
            raise InvalidParameterError(f"line r must be >= 0, got {self.r}")
        if not (self.x > 0.0):
            raise InvalidParameterError(f"line x must be > 0, got {self.x}")

    @property
    def l(self) -> float:
        return self.x / self.omega_s

    @property
    def z(self) -> complex:
        return complex(self.r, self.x)


@dataclass(frozen=True)
class ShuntCapParams:
    """Shunt capacitor, per-unit capacitance c at a network node."""

    c: float

    def __post_init__(self):
        if self.c < 0.0:
            raise InvalidParameterError(f"shunt c must be >= 0, got {self.c}")


def _as_complex(p) -> complex:
    if isinstance(p, Phasor):
        return p.as_complex()
    return complex(p)


def qsp_network_residual(v_nodes, i_injections, Y: np.ndarray) -> np.ndarray:
    """Kirchhoff residual g = Y v - i, two real components per node.

    v_nodes and i_injections are sequences of phasors (or complex numbers)
    in the network DQ frame; Y is the complex admittance matrix. The
    residual is zero iff the injections satisfy i = Y v.
    """
    Y = np.asarray(Y, dtype=complex)
    n = len(v_nodes)
    if Y.shape != (n, n):
        raise DimensionError(f"Y is {Y.shape}, expected ({n}, {n})")
    if len(i_injections) != n:
        raise DimensionError(
            f"{len(i_injections)} injections for {n} nodes"
        )
    v = np.array([_as_complex(p) for p in v_nodes], dtype=complex)
    i = np.array([_as_complex(p) for p in i_injections], dtype=complex)
    mis = Y @ v - i
    out = np.empty(2 * n)
    out[0::2] = mis.real
    out[1::2] = mis.imag
    return out


def emt_line_derivative(
    i_dq: complex,
    v1: complex,
    vL: complex,
    p: LineParams,
    base: PerUnitBase,
    omega_frame: float = 1.0,
) -> complex:
    """Dynamic-phasor series-RL branch: returns d(i_dq)/dt.

    (l / omega_b) di/dt = v1 - vL - r i - j x_f i with x_f the reactance at
    the rotating-frame speed. At the nominal frame speed this reduces to
    the familiar -omega_b r / l +/- j omega_b eigenvalue pair.
    """
    l = p.l
    if l <= 0.0:
        raise InvalidParameterError("line inductance must be > 0")
    x_eff = omega_frame * l
    return (base.omega_b / l) * (v1 - vL - (p.r + 1j * x_eff) * i_dq)


def emt_line_residual(i_dq, v1, vL, p: LineParams, base: PerUnitBase) -> Phasor:
    """Phasor-typed wrapper around :func:`emt_line_derivative`."""
    di = emt_line_derivative(_as_complex(i_dq), _as_complex(v1), _as_complex(vL), p, base)
    return Phasor.from_complex(di)


def shunt_cap_derivative(
    v_dq: complex,
    i_net: complex,
    p: ShuntCapParams,
    base: PerUnitBase,
    omega_frame: float = 1.0,
) -> complex:
    """Shunt-capacitor node: returns d(v_dq)/dt.

    (c / omega_b) dv/dt = i_net - j omega c v, where i_net is the net
    current flowing into the node (branch inflow minus outflow).
    """
    if p.c <= 0.0:
        raise InvalidParameterError("shunt capacitance must be > 0")
    return (base.omega_b / p.c) * i_net - 1j * base.omega_b * omega_frame * v_dq


def shunt_cap_residual(v_dq, i_net, p: ShuntCapParams, base: PerUnitBase) -> Phasor:
    """Phasor-typed wrapper around :func:`shunt_cap_derivative`."""
    dv = shunt_cap_derivative(_as_complex(v_dq), _as_complex(i_net), p, base)
    return Phasor.from_complex(dv)


def line_jacobian(p: LineParams, base: PerUnitBase) -> np.ndarray:
    """Analytic 2x2 Jacobian of the real form of the EMT line equation."""
    k = base.omega_b / p.l
    x_eff = p.l  # omega_s = 1 at the nominal frame speed
    return np.array([[-k * p.r, k * x_eff], [-k * x_eff, -k * p.r]])
