"""Load device models.

Three families:

* algebraic ZIP (constant power / constant current / constant impedance
  branches and their parallel blends, including the eta-parameterized
  CPL/resistor split),
* a 5th-order dynamic-phasor induction machine with a power-factor
  correction capacitor,
* a 12-state active rectifier load that regulates a DC-link voltage
  feeding a resistor, which behaves like a constant power load.

Electrical quantities are complex numbers in the network DQ frame;
machine and converter control quantities live in their own frames and are
rotated explicitly.
"""

from __future__ import annotations

import cmath
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from loadstab.errors import (
    InvalidParameterError,
    InvalidSplitError,
    NoEquilibriumError,
    SingularLoadError,
)
from loadstab.frames import PerUnitBase, Phasor, rot


# ---------------------------------------------------------------------------
# ZIP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ZipParams:
    """Parallel CPL / resistor / constant-current composition.

    p, q: constant-power branch demand; i_mag: constant-current branch
    magnitude; r_l: resistor; eta and p_cpl parameterize the CPL share of
    a fixed total (see :func:`zip_eta_split`).
    """

    p: float = 0.0
    q: float = 0.0
    i_mag: float = 0.0
    r_l: float = float("inf")
    eta: float = 0.0
    p_cpl: float = 1.0


def zip_eta_split(eta: float, p_cpl: float, v_l) -> float:
    """Resistor value that keeps total ZIP power at 1 p.u. for a CPL share.

    r_l = |v_l|^2 / (1 - eta * p_cpl); the CPL branch draws eta * p_cpl
    and the resistor the remainder, so the total is 1 p.u. by
    construction.
    """
    share = eta * p_cpl
    if not (0.0 <= share < 1.0):
        raise InvalidSplitError(
            f"eta * p_cpl = {share} leaves no power for the resistor branch"
        )
    if isinstance(v_l, Phasor):
        vmag = v_l.magnitude
    else:
        vmag = abs(complex(v_l))
    return vmag**2 / (1.0 - share)


def zip_residual(v_l, branch_currents, p: ZipParams) -> np.ndarray:
    """Algebraic residual of the ZIP composition.

    ``branch_currents`` is (i_total, i1, i2) or (i_total, i1, i2, i3):
    total current into the load, CPL branch, resistor branch and the
    optional constant-current branch. Residual rows (two reals each):

    1. current split  i = i1 + i2 (+ i3)
    2. CPL power      v_l * conj(i1) = p + j q
    3. resistor law   i2 = v_l / r_l
    4. CCL law        i3 = i_mag * v_l / |v_l|   (when present)
    """
    cur = [c.as_complex() if isinstance(c, Phasor) else complex(c) for c in branch_currents]
    v = v_l.as_complex() if isinstance(v_l, Phasor) else complex(v_l)
    has_ccl = len(cur) == 4
    if len(cur) not in (3, 4):
        raise InvalidParameterError("expected (i, i1, i2[, i3]) branch currents")
    vmag = abs(v)
    if vmag == 0.0 and (p.p != 0.0 or p.q != 0.0 or (has_ccl and p.i_mag != 0.0)):
        raise SingularLoadError("CPL/CCL branch active at zero load voltage")
    i, i1, i2 = cur[0], cur[1], cur[2]
    rows = []
    split = i - i1 - i2 - (cur[3] if has_ccl else 0.0)
    rows += [split.real, split.imag]
    s1 = v * i1.conjugate() - complex(p.p, p.q)
    rows += [s1.real, s1.imag]
    res = i2 - v / p.r_l
    rows += [res.real, res.imag]
    if has_ccl:
        ccl = cur[3] - p.i_mag * v / vmag
        rows += [ccl.real, ccl.imag]
    return np.array(rows)


# ---------------------------------------------------------------------------
# Induction machine (5th-order dynamic phasor, motor convention)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImParams:
    """Single-cage induction machine, machine per-unit.

    torque_exp is the speed exponent of the mechanical load torque,
    tau_mech = tau0 * omega_r ** torque_exp; tau0 is calibrated so the
    machine absorbs 1 p.u. electrical power at nominal voltage.
    """

    r_s: float = 0.02
    x_ls: float = 0.15
    r_r: float = 0.03
    x_lr: float = 0.15
    x_m: float = 3.5
    h: float = 0.6
    torque_exp: float = 2.0

    def __post_init__(self):
        if min(self.r_s, self.r_r) < 0 or min(self.x_ls, self.x_lr) <= 0:
            raise InvalidParameterError("machine resistances/leakages must be positive")
        if self.x_m <= max(self.x_ls, self.x_lr):
            raise InvalidParameterError("magnetizing reactance must exceed leakages")

    @property
    def x_s(self) -> float:
        return self.x_ls + self.x_m

    @property
    def x_r(self) -> float:
        return self.x_lr + self.x_m

    @property
    def flux_det(self) -> float:
        return self.x_s * self.x_r - self.x_m**2


def im_currents(psi_s: complex, psi_r: complex, p: ImParams):
    """Stator and rotor currents from the flux linkages."""
    d = p.flux_det
    i_s = (p.x_r * psi_s - p.x_m * psi_r) / d
    i_r = (p.x_s * psi_r - p.x_m * psi_s) / d
    return i_s, i_r


def im_torque(psi_s: complex, i_s: complex, _p: ImParams = None) -> float:
    """Electrical torque (motor convention): Im[conj(psi_s) i_s]."""
    return (psi_s.conjugate() * i_s).imag


def im_derivatives(
    x: np.ndarray,
    v_term: complex,
    p: ImParams,
    base: PerUnitBase,
    tau0: float,
    omega_frame: float = 1.0,
) -> np.ndarray:
    """Five state derivatives (psi_sd, psi_sq, psi_rd, psi_rq, omega_r).

    Flux equations are written in the network DQ frame; slip terms use the
    frame speed so the model stays exact in a co-rotating frame.
    """
    psi_s = complex(x[0], x[1])
    psi_r = complex(x[2], x[3])
    w_r = x[4]
    i_s, i_r = im_currents(psi_s, psi_r, p)
    dpsi_s = base.omega_b * (v_term - p.r_s * i_s - 1j * omega_frame * psi_s)
    dpsi_r = base.omega_b * (-p.r_r * i_r - 1j * (omega_frame - w_r) * psi_r)
    te = im_torque(psi_s, i_s)
    tau_mech = tau0 * w_r ** p.torque_exp if w_r > 0 else 0.0
    dwr = (te - tau_mech) / (2.0 * p.h)
    return np.array([dpsi_s.real, dpsi_s.imag, dpsi_r.real, dpsi_r.imag, dwr])


def im_steady_state(v_term: complex, slip: float, p: ImParams):
    """Steady-state fluxes/currents at a given terminal voltage and slip.

    Solves the linear phasor equations v = r_s i_s + j psi_s and
    0 = r_r i_r + j s psi_r for the flux linkages.
    """
    d = p.flux_det
    # i_s = (x_r psi_s - x_m psi_r)/d ; i_r = (x_s psi_r - x_m psi_s)/d
    a11 = p.r_s * p.x_r / d + 1j
    a12 = -p.r_s * p.x_m / d
    a21 = -p.r_r * p.x_m / d
    a22 = p.r_r * p.x_s / d + 1j * slip
    det = a11 * a22 - a12 * a21
    psi_s = (v_term * a22) / det
    psi_r = (-v_term * a21) / det
    i_s, i_r = im_currents(psi_s, psi_r, p)
    return psi_s, psi_r, i_s, i_r


def im_power(v_term: complex, slip: float, p: ImParams) -> complex:
    """Complex power absorbed from the terminal at a given slip."""
    _, _, i_s, _ = im_steady_state(v_term, slip, p)
    return v_term * i_s.conjugate()


def im_torque_at(v_term: complex, slip: float, p: ImParams) -> float:
    psi_s, _, i_s, _ = im_steady_state(v_term, slip, p)
    return im_torque(psi_s, i_s)


def im_calibrate_torque(p: ImParams, v_nom: float = 1.0, p_target: float = 1.0):
    """Rated slip and load-torque coefficient.

    Finds the smallest slip at which the machine absorbs ``p_target``
    electrical power at ``v_nom``, then sets tau0 so the mechanical
    torque balances there: tau0 = tau_e / omega_r ** torque_exp.
    """

    def pw(s):
        return im_power(complex(v_nom, 0.0), s, p).real - p_target

    s_hi = 1e-4
    while pw(s_hi) < 0.0:
        s_hi *= 1.5
        if s_hi > 0.5:
            raise NoEquilibriumError(
                "machine cannot absorb the target power at nominal voltage"
            )
    s0 = brentq(pw, s_hi / 1.5, s_hi, xtol=1e-14)
    te = im_torque_at(complex(v_nom, 0.0), s0, p)
    w0 = 1.0 - s0
    tau0 = te / (w0 ** p.torque_exp)
    return s0, tau0


def im_solve_slip(v_term: complex, p: ImParams, tau0: float) -> float:
    """Equilibrium slip on the low-slip branch at a terminal voltage.

    Solves tau_e(v, s) = tau0 * (1 - s) ** k for the first crossing above
    zero slip. With a speed-dependent load torque the crossing exists for
    every voltage, so the equilibrium branch persists past the point
    where it loses stability.
    """

    def bal(s):
        return im_torque_at(v_term, s, p) - tau0 * (1.0 - s) ** p.torque_exp

    lo = 1e-9
    if bal(lo) > 0.0:
        raise NoEquilibriumError("load torque non-positive at synchronous speed")
    hi = lo
    for s in np.linspace(1e-4, 0.999, 400):
        if bal(s) > 0.0:
            hi = s
            break
        lo = s
    else:
        raise NoEquilibriumError("no torque balance found below unit slip")
    return brentq(bal, lo, hi, xtol=1e-14)


# ---------------------------------------------------------------------------
# Active rectifier load (12 differential states)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActiveLoadParams:
    """Grid-connected rectifier regulating a DC voltage across a resistor.

    LCL filter (grid-side r_g/x_g, shunt c_f, converter-side r_c/x_c), an
    SRF-PLL on the terminal voltage, a DC-voltage PI producing the active
    current reference, and a converter current PI. The q-axis current
    reference is zero in the PLL frame so the steady-state reactive power
    at the connection point vanishes.
    """

    r_g: float = 0.01
    x_g: float = 0.05
    c_f: float = 0.05
    r_c: float = 0.01
    x_c: float = 0.05
    c_dc: float = 0.02
    v_dc_ref: float = 2.0
    k_p_pll: float = 0.5
    k_i_pll: float = 20.0
    k_p_dc: float = 2.0
    k_i_dc: float = 400.0
    k_pc: float = 1.0
    k_ic: float = 100.0

    def __post_init__(self):
        if self.c_dc <= 0 or self.v_dc_ref <= 0:
            raise InvalidParameterError("DC link capacitance and setpoint must be > 0")
        if min(self.x_g, self.x_c, self.c_f) <= 0:
            raise InvalidParameterError("LCL filter elements must be > 0")


ACTIVE_LOAD_LABELS = [
    "i_cv_d",
    "i_cv_q",
    "v_f_d",
    "v_f_q",
    "i_g_d",
    "i_g_q",
    "theta_pll",
    "eps_pll",
    "v_dc",
    "zeta",
    "sigma_d",
    "sigma_q",
]


def active_load_derivatives(
    x: np.ndarray,
    v_term: complex,
    p: ActiveLoadParams,
    base: PerUnitBase,
    g_dc: float,
    omega_frame: float = 1.0,
) -> np.ndarray:
    """Twelve state derivatives of the active load.

    State order matches ACTIVE_LOAD_LABELS. ``g_dc`` is the DC-side
    conductance 1 / r_load, so the DC power drawn is g_dc * v_dc^2.
    Raises ModelInvalidError via the caller when v_dc has left the
    physical region (<= 0).
    """
    i_cv = complex(x[0], x[1])
    v_c = complex(x[2], x[3])
    i_g = complex(x[4], x[5])
    theta = x[6]
    eps = x[7]
    v_dc = x[8]
    zeta = x[9]
    sigma = complex(x[10], x[11])
    if v_dc <= 0.0:
        raise SingularLoadError("DC-link voltage left the physical region (v_dc <= 0)")

    # PLL on the terminal voltage
    vt_pll = rot(v_term, -theta)
    omega_pll = 1.0 + p.k_p_pll * vt_pll.imag + p.k_i_pll * eps

    # current control in the PLL frame with capacitor-current feedforward
    i_d_star = p.k_p_dc * (p.v_dc_ref - v_dc) + p.k_i_dc * zeta
    vc_pll = rot(v_c, -theta)
    icv_pll = rot(i_cv, -theta)
    i_star = complex(i_d_star, 0.0) - 1j * omega_pll * p.c_f * vc_pll
    e_i = i_star - icv_pll
    vcv_pll = vc_pll - (p.r_c + 1j * omega_pll * p.x_c) * icv_pll - (
        p.k_pc * e_i + p.k_ic * sigma
    )
    v_cv = rot(vcv_pll, theta)

    # electrical states in the network frame
    di_cv = (base.omega_b / p.x_c) * (v_c - v_cv - p.r_c * i_cv) - 1j * base.omega_b * omega_frame * i_cv
    dv_c = (base.omega_b / p.c_f) * (i_g - i_cv) - 1j * base.omega_b * omega_frame * v_c
    di_g = (base.omega_b / p.x_g) * (v_term - v_c - p.r_g * i_g) - 1j * base.omega_b * omega_frame * i_g

    dtheta = base.omega_b * (omega_pll - omega_frame)
    deps = vt_pll.imag

    p_cv = (v_cv * i_cv.conjugate()).real
    dv_dc = (p_cv - g_dc * v_dc**2) / (p.c_dc * v_dc)
    dzeta = p.v_dc_ref - v_dc
    dsigma = e_i

    return np.array(
        [
            di_cv.real,
            di_cv.imag,
            dv_c.real,
            dv_c.imag,
            di_g.real,
            di_g.imag,
            dtheta,
            deps,
            dv_dc,
            dzeta,
            dsigma.real,
            dsigma.imag,
        ]
    )


def active_load_equilibrium(v_term: complex, p: ActiveLoadParams, g_dc: float):
    """Closed-form equilibrium of the active load at a terminal voltage.

    The grid current is in phase with the terminal voltage (zero reactive
    power at the connection point); its magnitude t solves the power
    balance p_converter(t) = g_dc * v_dc_ref^2. Returns the 12-state
    vector plus the complex grid current drawn from the bus.
    """
    vmag = abs(v_term)
    if vmag <= 0.0:
        raise SingularLoadError("active load requires a nonzero terminal voltage")
    u = v_term / vmag
    p_dc = g_dc * p.v_dc_ref**2

    def chain(t):
        i_g = t * u
        v_c = v_term - (p.r_g + 1j * p.x_g) * i_g
        i_cv = i_g - 1j * p.c_f * v_c
        v_cv = v_c - (p.r_c + 1j * p.x_c) * i_cv
        return i_g, v_c, i_cv, v_cv

    def balance(t):
        _, _, i_cv, v_cv = chain(t)
        return (v_cv * i_cv.conjugate()).real - p_dc

    t_hi = max(3.0 * p_dc / vmag, 0.5)
    lo = -0.1  # converter losses make the zero-power root slightly positive
    if balance(lo) > 0.0:
        raise NoEquilibriumError("active load power balance ill-posed")
    while balance(t_hi) < 0.0 and t_hi < 50.0:
        t_hi *= 1.3
    if balance(t_hi) < 0.0:
        raise NoEquilibriumError("active load cannot absorb the requested power")
    t = brentq(balance, lo, t_hi, xtol=1e-15)
    i_g, v_c, i_cv, v_cv = chain(t)

    theta = cmath.phase(v_term)
    # with the capacitor-current feedforward the d-axis reference at
    # equilibrium equals the (real) PLL-frame grid current, i.e. t
    zeta = t / p.k_i_dc
    x = np.array(
        [
            i_cv.real,
            i_cv.imag,
            v_c.real,
            v_c.imag,
            i_g.real,
            i_g.imag,
            theta,
            0.0,
            p.v_dc_ref,
            zeta,
            0.0,
            0.0,
        ]
    )
    return x, i_g
