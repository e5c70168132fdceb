"""Generation device models.

Grid-forming inverter controls (droop, virtual synchronous machine,
dispatchable virtual oscillator) share a cascaded voltage/current inner
loop in the device dq frame; the outer loops differ. Synchronous machines
come in a GENROU variant with algebraic stator equations (QSP network
representation) and a Marconato variant that integrates the stator flux
linkages (EMT representation). A single-time-constant exciter drives the
field voltage of both machines.

Sign conventions: sources deliver current to the network (generator
convention); machine dq frames put the q-axis at the rotor angle so that
v_machine = v_network * exp(j*(pi/2 - delta)).
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np

from loadstab.errors import InvalidParameterError
from loadstab.frames import PerUnitBase, rot

HALF_PI = 0.5 * math.pi


# ---------------------------------------------------------------------------
# Grid-forming inverter
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DroopGains:
    """Steady-state droop targets shared by all three GFM controls.

    m_p: P-omega droop (p.u./p.u.), m_q: Q-v droop, omega_f: power
    measurement filter cutoff (rad/s), e_0: nominal oscillator amplitude
    (dVOC only).
    """

    m_p: float = 0.02
    m_q: float = 0.05
    omega_f: float = 2.0 * math.pi * 5.0
    e_0: float = 1.0


@dataclass(frozen=True)
class GfmFilterParams:
    """Converter output filter: series RL branch into a shunt capacitor.

    The grid-side branch of the LCL is the transmission line itself.
    """

    r_f: float = 0.005
    x_f: float = 0.15
    c_f: float = 0.05

    def __post_init__(self):
        if self.x_f <= 0 or self.c_f <= 0:
            raise InvalidParameterError("filter x_f and c_f must be > 0")


@dataclass(frozen=True)
class GfmControlParams:
    """Inner-loop PI gains plus the VSM virtual inertia.

    k_ff scales the grid-current/capacitor-current feed-forward of the
    voltage loop; with the default 0 the proportional gain k_pv alone
    sets the converter's static output stiffness, which is what bounds
    the loadability of the voltage-controlled node.
    """

    k_pv: float = 1.4
    k_iv: float = 150.0
    k_pc: float = 1.0
    k_ic: float = 20.0
    k_ff: float = 0.0
    h_v: float = 2.0  # VSM virtual inertia (s)


GFM_KINDS = ("droop", "vsm", "dvoc")


class GfmControl:
    """One grid-forming inverter control channel.

    State layout by kind (outer states first, then the voltage-loop and
    current-loop integrators):

    * droop: delta, p_f, q_f, xi_d, xi_q, gamma_d, gamma_q
    * vsm:   delta, p_f, q_f, omega_v, xi_d, xi_q, gamma_d, gamma_q
    * dvoc:  e_d, e_q, xi_d, xi_q, gamma_d, gamma_q
    """

    def __init__(
        self,
        kind: str,
        gains: DroopGains,
        ctrl: GfmControlParams,
        filt: GfmFilterParams,
        base: PerUnitBase,
    ):
        if kind not in GFM_KINDS:
            raise InvalidParameterError(f"unknown GFM kind {kind!r}")
        self.kind = kind
        self.gains = gains
        self.ctrl = ctrl
        self.filt = filt
        self.base = base
        if kind == "dvoc":
            outer = ["e_d", "e_q"]
        elif kind == "vsm":
            outer = ["delta", "p_filt", "q_filt", "omega_v"]
        else:
            outer = ["delta", "p_filt", "q_filt"]
        self.labels = outer + ["xi_d", "xi_q", "gamma_d", "gamma_q"]
        self.n_states = len(self.labels)
        # dVOC complex-gain law calibrated to the droop targets; the
        # effective P-omega slope scales with 1/|e|^2 so it matches m_p
        # only near the nominal amplitude e_0.
        self.eta_o = gains.m_p * base.omega_b * gains.e_0**2
        self.alpha_o = self.eta_o / (2.0 * gains.m_q * gains.e_0)

    # -- helpers -----------------------------------------------------------

    def _split(self, x):
        if self.kind == "dvoc":
            outer = x[:2]
            rest = x[2:]
        elif self.kind == "vsm":
            outer = x[:4]
            rest = x[4:]
        else:
            outer = x[:3]
            rest = x[3:]
        xi = complex(rest[0], rest[1])
        gamma = complex(rest[2], rest[3])
        return outer, xi, gamma

    def _inner_loop(self, xi, gamma, v_cmd, delta, v_o, i_grid, i_cv, omega):
        """Cascaded voltage/current PI in the device frame.

        Returns (d_xi, d_gamma, v_mod) with v_mod back in the network
        frame. Feed-forward terms (grid current, capacitor current,
        reactor drop) make all integrator states vanish at equilibrium.
        """
        c = self.ctrl
        f = self.filt
        v_dq = rot(v_o, -delta)
        ig_dq = rot(i_grid, -delta)
        icv_dq = rot(i_cv, -delta)
        e_v = complex(v_cmd, 0.0) - v_dq
        i_star = c.k_pv * e_v + c.k_iv * xi + c.k_ff * (
            ig_dq + 1j * omega * f.c_f * v_dq
        )
        e_i = i_star - icv_dq
        v_m_dq = c.k_pc * e_i + c.k_ic * gamma + v_dq + (f.r_f + 1j * omega * f.x_f) * icv_dq
        return e_v, e_i, rot(v_m_dq, delta)

    # -- residual ----------------------------------------------------------

    def derivatives(self, x, v_o, i_grid, i_cv, refs, omega_frame=1.0):
        """State derivatives plus the modulation voltage (network frame).

        v_o: regulated filter-capacitor voltage, i_grid: current leaving
        toward the line, i_cv: converter branch current. refs carries the
        dispatch (p_ref, q_ref, v_ref).
        """
        g = self.gains
        s_meas = v_o * i_grid.conjugate()
        p, q = s_meas.real, s_meas.imag
        outer, xi, gamma = self._split(np.asarray(x, dtype=float))
        dx = np.empty(self.n_states)

        if self.kind == "dvoc":
            e = complex(outer[0], outer[1])
            e_mag2 = e.real**2 + e.imag**2
            sref = complex(refs["p_ref"], -refs["q_ref"])
            law = 1j * self.eta_o * (sref * e / g.e_0**2 - i_grid) + (
                self.alpha_o / g.e_0**2
            ) * (g.e_0**2 - e_mag2) * e
            de = law - 1j * self.base.omega_b * (omega_frame - 1.0) * e
            delta = cmath.phase(e)
            v_cmd = abs(e)
            omega_dev = 1.0
            dx[0], dx[1] = de.real, de.imag
            k = 2
        else:
            delta, p_f, q_f = outer[0], outer[1], outer[2]
            v_cmd = refs["v_ref"] + g.m_q * (refs["q_ref"] - q_f)
            if self.kind == "vsm":
                omega_v = outer[3]
                d_v = 1.0 / g.m_p
                dx[3] = (refs["p_ref"] - p_f - d_v * (omega_v - 1.0)) / (2.0 * self.ctrl.h_v)
                omega_dev = omega_v
                k = 4
            else:
                omega_dev = 1.0 + g.m_p * (refs["p_ref"] - p_f)
                k = 3
            dx[0] = self.base.omega_b * (omega_dev - omega_frame)
            dx[1] = g.omega_f * (p - p_f)
            dx[2] = g.omega_f * (q - q_f)

        e_v, e_i, v_mod = self._inner_loop(
            xi, gamma, v_cmd, delta, v_o, i_grid, i_cv, omega_dev
        )
        dx[k] = e_v.real
        dx[k + 1] = e_v.imag
        dx[k + 2] = e_i.real
        dx[k + 3] = e_i.imag
        return dx, v_mod

    # -- initialization ----------------------------------------------------

    def init_from_flow(self, v_o, i_grid):
        """Equilibrium controller states and re-dispatched references.

        Given the power-flow solution at the regulated node, aligns the
        device frame with the terminal voltage; the voltage integrator
        carries the share of the converter current not fed forward, the
        current integrator is zero by construction.
        """
        s = v_o * i_grid.conjugate()
        refs = {"p_ref": s.real, "q_ref": s.imag, "v_ref": abs(v_o)}
        x = np.zeros(self.n_states)
        if self.kind == "dvoc":
            x[0], x[1] = v_o.real, v_o.imag
            delta = cmath.phase(v_o)
            k = 2
        else:
            delta = cmath.phase(v_o)
            x[0] = delta
            x[1], x[2] = s.real, s.imag
            if self.kind == "vsm":
                x[3] = 1.0
            k = 4 if self.kind == "vsm" else 3
        i_cv = self.equilibrium_converter_current(v_o, i_grid)
        xi = (1.0 - self.ctrl.k_ff) * rot(i_cv, -delta) / self.ctrl.k_iv
        x[k], x[k + 1] = xi.real, xi.imag
        return x, refs

    def equilibrium_converter_current(self, v_o, i_grid):
        """Converter branch current at equilibrium: grid + capacitor."""
        return i_grid + 1j * self.filt.c_f * v_o

    def angle_pin(self, x, x_ref):
        """Scalar residual pinning the rotational degree of freedom."""
        if self.kind == "dvoc":
            e = complex(x[0], x[1])
            theta = math.atan2(x_ref[1], x_ref[0])
            return (e * cmath.exp(-1j * theta)).imag
        return x[0] - x_ref[0]


def gfm_residual(kind, x, v_term, i_term, gains, mode="emt", *, i_conv=None,
                 refs=None, ctrl=None, filt=None, base=None, omega_frame=1.0):
    """Functional wrapper over :class:`GfmControl`.

    Returns (state derivatives, modulation voltage). ``i_term`` is the
    grid-side current; the converter branch current defaults to its
    equilibrium value (grid + capacitor current), which is exact in QSP
    and at any EMT equilibrium.
    """
    del mode  # identical control equations in both network representations
    base = base or PerUnitBase()
    ctrl = ctrl or GfmControlParams()
    filt = filt or GfmFilterParams()
    gfm = GfmControl(kind, gains, ctrl, filt, base)
    if refs is None:
        _, refs = gfm.init_from_flow(v_term, i_term)
    if i_conv is None:
        i_conv = gfm.equilibrium_converter_current(v_term, i_term)
    return gfm.derivatives(x, v_term, i_term, i_conv, refs, omega_frame)


# ---------------------------------------------------------------------------
# Synchronous machines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SmParams:
    """Round-rotor machine constants (machine per-unit).

    The reactance ordering x_d >= x_d' >= x_d'' > x_l (likewise on the q
    axis) is enforced; unsaturated book-standard equations are used.
    """

    x_d: float = 1.8
    x_q: float = 1.7
    x_d_p: float = 0.3
    x_q_p: float = 0.55
    x_d_pp: float = 0.25
    x_q_pp: float = 0.25
    x_l: float = 0.2
    r_a: float = 0.003
    t_d0_p: float = 8.0
    t_q0_p: float = 0.4
    t_d0_pp: float = 0.03
    t_q0_pp: float = 0.05
    t_aa: float = 0.0
    h: float = 3.5
    d: float = 2.0

    def __post_init__(self):
        if not (self.x_d >= self.x_d_p >= self.x_d_pp > self.x_l > 0.0):
            raise InvalidParameterError(
                "d-axis reactances must satisfy x_d >= x_d' >= x_d'' > x_l > 0"
            )
        if not (self.x_q >= self.x_q_p >= self.x_q_pp > self.x_l):
            raise InvalidParameterError(
                "q-axis reactances must satisfy x_q >= x_q' >= x_q'' > x_l"
            )
        if min(self.t_d0_p, self.t_q0_p, self.t_d0_pp, self.t_q0_pp) <= 0:
            raise InvalidParameterError("machine time constants must be > 0")


@dataclass(frozen=True)
class AvrParams:
    """Single time-constant exciter."""

    k: float = 200.0
    t_e: float = 0.1

    def __post_init__(self):
        if self.t_e <= 0 or self.k <= 0:
            raise InvalidParameterError("AVR requires K > 0 and T_E > 0")


def avr_residual(e_fd: float, v_meas: float, v_ref: float, k: float, t_e: float) -> float:
    """First-order exciter: dE_fd/dt = (K (v_ref - v_meas) - E_fd) / T_E."""
    if t_e <= 0:
        raise InvalidParameterError("T_E must be > 0")
    return (k * (v_ref - v_meas) - e_fd) / t_e


def to_machine(z_net: complex, delta: float) -> complex:
    """Network DQ -> machine dq (q-axis at the rotor angle)."""
    return rot(z_net, HALF_PI - delta)


def from_machine(z_mach: complex, delta: float) -> complex:
    """Machine dq -> network DQ."""
    return rot(z_mach, delta - HALF_PI)


class Genrou:
    """GENROU round-rotor model: six states, algebraic stator.

    States: delta, omega, eq_p, ed_p, psi_kd, psi_kq.
    """

    labels = ["delta", "omega", "eq_p", "ed_p", "psi_kd", "psi_kq"]
    n_states = 6

    def __init__(self, p: SmParams, base: PerUnitBase):
        self.p = p
        self.base = base
        dp = p.x_d_p - p.x_l
        qp = p.x_q_p - p.x_l
        self.kd1 = (p.x_d_pp - p.x_l) / dp
        self.kd2 = (p.x_d_p - p.x_d_pp) / dp
        self.kd3 = (p.x_d_p - p.x_d_pp) / dp**2
        self.kq1 = (p.x_q_pp - p.x_l) / qp
        self.kq2 = (p.x_q_p - p.x_q_pp) / qp
        self.kq3 = (p.x_q_p - p.x_q_pp) / qp**2

    def _subtransient_flux(self, x):
        _, _, eq_p, ed_p, psi_kd, psi_kq = x
        psi2_d = self.kd1 * eq_p + self.kd2 * psi_kd
        psi2_q = -self.kq1 * ed_p + self.kq2 * psi_kq
        return psi2_d, psi2_q

    def stator_fluxes(self, x, i_dq: complex):
        psi2_d, psi2_q = self._subtransient_flux(x)
        psi_d = psi2_d - self.p.x_d_pp * i_dq.real
        psi_q = psi2_q - self.p.x_q_pp * i_dq.imag
        return psi_d, psi_q

    def stator_residual(self, x, v_net: complex, i_net: complex) -> np.ndarray:
        """Algebraic stator equations in the machine frame (two reals)."""
        delta, omega = x[0], x[1]
        v = to_machine(v_net, delta)
        i = to_machine(i_net, delta)
        psi_d, psi_q = self.stator_fluxes(x, i)
        return np.array(
            [v.real + self.p.r_a * i.real + omega * psi_q,
             v.imag + self.p.r_a * i.imag - omega * psi_d]
        )

    def torque(self, x, i_dq: complex) -> float:
        psi_d, psi_q = self.stator_fluxes(x, i_dq)
        return psi_d * i_dq.imag - psi_q * i_dq.real

    def derivatives(self, x, v_net, i_net, e_fd, tau_m, omega_frame=1.0):
        p = self.p
        delta, omega, eq_p, ed_p, psi_kd, psi_kq = x
        i = to_machine(i_net, delta)
        i_d, i_q = i.real, i.imag
        corr_d = psi_kd + (p.x_d_p - p.x_l) * i_d - eq_p
        corr_q = psi_kq + (p.x_q_p - p.x_l) * i_q + ed_p
        d_eq_p = (e_fd - eq_p - (p.x_d - p.x_d_p) * (i_d - self.kd3 * corr_d)) / p.t_d0_p
        d_psi_kd = (-corr_d) / p.t_d0_pp
        d_ed_p = (-ed_p + (p.x_q - p.x_q_p) * (i_q - self.kq3 * corr_q)) / p.t_q0_p
        d_psi_kq = (-psi_kq - ed_p - (p.x_q_p - p.x_l) * i_q) / p.t_q0_pp
        te = self.torque(x, i)
        d_delta = self.base.omega_b * (omega - omega_frame)
        d_omega = (tau_m - te - p.d * (omega - 1.0)) / (2.0 * p.h)
        return np.array([d_delta, d_omega, d_eq_p, d_ed_p, d_psi_kd, d_psi_kq])

    def init_from_flow(self, v_net: complex, i_net: complex):
        """Exact equilibrium from the terminal phasors.

        Returns (state vector, field voltage, mechanical torque).
        """
        p = self.p
        e = v_net + complex(p.r_a, p.x_q) * i_net
        delta = cmath.phase(e)
        v = to_machine(v_net, delta)
        i = to_machine(i_net, delta)
        eq_p = v.imag + p.r_a * i.imag + p.x_d_p * i.real
        ed_p = v.real + p.r_a * i.real - p.x_q_p * i.imag
        psi_kd = eq_p - (p.x_d_p - p.x_l) * i.real
        psi_kq = -ed_p - (p.x_q_p - p.x_l) * i.imag
        e_fd = eq_p + (p.x_d - p.x_d_p) * i.real
        x = np.array([delta, 1.0, eq_p, ed_p, psi_kd, psi_kq])
        tau_m = self.torque(x, i)
        return x, e_fd, tau_m


class Marconato:
    """Marconato model: eight states including the stator flux linkages.

    States: delta, omega, eq_p, ed_p, eq_pp, ed_pp, psi_d, psi_q. The
    stator currents are outputs of the flux states, so the machine
    injects current into its terminal node (EMT representation).
    """

    labels = ["delta", "omega", "eq_p", "ed_p", "eq_pp", "ed_pp", "psi_d", "psi_q"]
    n_states = 8

    def __init__(self, p: SmParams, base: PerUnitBase):
        self.p = p
        self.base = base
        self.gamma_d = (p.t_d0_pp * p.x_d_pp) / (p.t_d0_p * p.x_d_p) * (p.x_d - p.x_d_p)
        self.gamma_q = (p.t_q0_pp * p.x_q_pp) / (p.t_q0_p * p.x_q_p) * (p.x_q - p.x_q_p)

    def machine_current(self, x) -> complex:
        """Stator current (machine frame) from the flux states."""
        _, _, _, _, eq_pp, ed_pp, psi_d, psi_q = x
        i_d = (eq_pp - psi_d) / self.p.x_d_pp
        i_q = (-ed_pp - psi_q) / self.p.x_q_pp
        return complex(i_d, i_q)

    def network_current(self, x) -> complex:
        return from_machine(self.machine_current(x), x[0])

    def torque(self, x) -> float:
        i = self.machine_current(x)
        psi_d, psi_q = x[6], x[7]
        return psi_d * i.imag - psi_q * i.real

    def derivatives(self, x, v_net, e_fd, tau_m, omega_frame=1.0):
        p = self.p
        delta, omega, eq_p, ed_p, eq_pp, ed_pp, psi_d, psi_q = x
        v = to_machine(v_net, delta)
        i = self.machine_current(x)
        i_d, i_q = i.real, i.imag
        taa = p.t_aa / p.t_d0_p
        d_eq_p = (-eq_p - (p.x_d - p.x_d_p - self.gamma_d) * i_d + (1.0 - taa) * e_fd) / p.t_d0_p
        d_ed_p = (-ed_p + (p.x_q - p.x_q_p - self.gamma_q) * i_q) / p.t_q0_p
        d_eq_pp = (-eq_pp + eq_p - (p.x_d_p - p.x_d_pp + self.gamma_d) * i_d + taa * e_fd) / p.t_d0_pp
        d_ed_pp = (-ed_pp + ed_p + (p.x_q_p - p.x_q_pp + self.gamma_q) * i_q) / p.t_q0_pp
        d_psi_d = self.base.omega_b * (v.real + p.r_a * i_d + omega * psi_q)
        d_psi_q = self.base.omega_b * (v.imag + p.r_a * i_q - omega * psi_d)
        te = self.torque(x)
        d_delta = self.base.omega_b * (omega - omega_frame)
        d_omega = (tau_m - te - p.d * (omega - 1.0)) / (2.0 * p.h)
        return np.array(
            [d_delta, d_omega, d_eq_p, d_ed_p, d_eq_pp, d_ed_pp, d_psi_d, d_psi_q]
        )

    def init_from_flow(self, v_net: complex, i_net: complex):
        p = self.p
        e = v_net + complex(p.r_a, p.x_q) * i_net
        delta = cmath.phase(e)
        v = to_machine(v_net, delta)
        i = to_machine(i_net, delta)
        i_d, i_q = i.real, i.imag
        eq_pp = v.imag + p.r_a * i_q + p.x_d_pp * i_d
        ed_pp = v.real + p.r_a * i_d - p.x_q_pp * i_q
        e_fd = eq_pp + (p.x_d - p.x_d_pp) * i_d
        taa = p.t_aa / p.t_d0_p
        eq_p = -(p.x_d - p.x_d_p - self.gamma_d) * i_d + (1.0 - taa) * e_fd
        ed_p = (p.x_q - p.x_q_p - self.gamma_q) * i_q
        psi_d = eq_pp - p.x_d_pp * i_d
        psi_q = -ed_pp - p.x_q_pp * i_q
        x = np.array([delta, 1.0, eq_p, ed_p, eq_pp, ed_pp, psi_d, psi_q])
        tau_m = self.torque(x)
        return x, e_fd, tau_m


def sm_residual(kind, x, v_term, params=None, *, i_term=None, e_fd=0.0,
                tau_m=0.0, base=None, omega_frame=1.0):
    """Functional machine-residual wrapper.

    GENROU returns (derivatives, algebraic stator residual); Marconato
    returns (derivatives, network-frame stator current).
    """
    base = base or PerUnitBase()
    params = params or SmParams()
    if kind == "genrou":
        m = Genrou(params, base)
        dx = m.derivatives(x, v_term, i_term, e_fd, tau_m, omega_frame)
        return dx, m.stator_residual(x, v_term, i_term)
    if kind == "marconato":
        m = Marconato(params, base)
        dx = m.derivatives(x, v_term, e_fd, tau_m, omega_frame)
        return dx, m.network_current(x)
    raise InvalidParameterError(f"unknown machine kind {kind!r}")


@dataclass(frozen=True)
class StiffSourceParams:
    """Ideal voltage source: fixed phasor at the source terminal."""

    v_mag: float = 1.0
    v_angle: float = 0.0

    @property
    def v(self) -> complex:
        return cmath.rect(self.v_mag, self.v_angle)
