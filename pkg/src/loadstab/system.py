"""DAE assembly, power flow and equilibrium initialization.

A TwoBusSystem wires one source (grid-forming inverter, synchronous
machine or stiff voltage source), one series line and one load into a
single index-1 DAE with deterministic state ordering (source block,
network block, load block). ``initialize`` solves the two-bus power flow
on the upper voltage branch and back-solves every device state in closed
form, re-dispatching controller references so the operating point is an
exact equilibrium.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field, replace

import numpy as np

from loadstab.errors import (
    ConfigError,
    DimensionError,
    NoEquilibriumError,
    SingularAlgebraError,
)
from loadstab.frames import PerUnitBase
from loadstab.loads import (
    ActiveLoadParams,
    ACTIVE_LOAD_LABELS,
    ImParams,
    ZipParams,
    active_load_derivatives,
    active_load_equilibrium,
    im_calibrate_torque,
    im_currents,
    im_derivatives,
    im_solve_slip,
    im_steady_state,
    zip_eta_split,
)
from loadstab.network import LineParams, ShuntCapParams, emt_line_derivative
from loadstab.sources import (
    AvrParams,
    DroopGains,
    Genrou,
    GfmControl,
    GfmControlParams,
    GfmFilterParams,
    Marconato,
    SmParams,
    StiffSourceParams,
    avr_residual,
)

QSP = "qsp"
EMT = "emt"

GFM_KINDS = ("droop", "vsm", "dvoc")
SM_KINDS = ("genrou", "marconato")
LOAD_KINDS = ("cpl", "ccl", "cil", "zip", "im", "active")

#: minimum load-bus shunt capacitance keeping the EMT node well-posed
C_SHUNT_FLOOR = 1e-3
#: resistance standing in for an open circuit (constant-impedance load at P=0)
R_OPEN = 1e6


def _c(vec, k) -> complex:
    return complex(vec[k], vec[k + 1])


@dataclass
class RunParams:
    """Per-operating-point parameters: load level, dispatch, frame speed."""

    level: float
    refs: dict = field(default_factory=dict)
    load_refs: dict = field(default_factory=dict)
    omega_frame: float = 1.0


@dataclass
class OperatingPoint:
    """Equilibrium (x, y) at a load level, with summary metadata."""

    x: np.ndarray
    y: np.ndarray
    level: float
    params: RunParams
    metadata: dict = field(default_factory=dict)


class DaeModel:
    """Minimal DAE protocol shared by assembled systems and test fixtures.

    Subclasses provide n_x, n_y, x_labels, y_labels, mode,
    has_angle_symmetry, residual(x, y, params) and initialize(level).
    """

    n_x = 0
    n_y = 0
    x_labels: list = []
    y_labels: list = []
    mode = EMT
    has_angle_symmetry = False

    def residual(self, x, y, params):  # pragma: no cover - interface
        raise NotImplementedError

    def initialize(self, level, warm=None):  # pragma: no cover - interface
        raise NotImplementedError


class CustomDae(DaeModel):
    """DAE built from plain callables; used for analytic test systems."""

    def __init__(self, f, g=None, n_x=1, n_y=0, x_labels=None, y_labels=None,
                 equilibrium=None, mode=EMT):
        self._f = f
        self._g = g
        self.n_x = n_x
        self.n_y = n_y
        self.x_labels = x_labels or [f"x{i}" for i in range(n_x)]
        self.y_labels = y_labels or [f"y{i}" for i in range(n_y)]
        self._equilibrium = equilibrium
        self.mode = mode

    def residual(self, x, y, params):
        f = np.atleast_1d(np.asarray(self._f(x, y, params.level), dtype=float))
        if self._g is None:
            g = np.zeros(0)
        else:
            g = np.atleast_1d(np.asarray(self._g(x, y, params.level), dtype=float))
        return f, g

    def initialize(self, level, warm=None):
        if self._equilibrium is None:
            raise NoEquilibriumError("custom system has no equilibrium rule")
        x, y = self._equilibrium(level)
        return OperatingPoint(
            np.atleast_1d(np.asarray(x, dtype=float)),
            np.atleast_1d(np.asarray(y, dtype=float)),
            level,
            RunParams(level=level),
        )


def _newton(fun, z0, tol=1e-12, maxit=60, rel_step=1e-7):
    """Dense Newton with finite-difference Jacobian; raises on failure."""
    z = np.asarray(z0, dtype=float).copy()
    fz = np.asarray(fun(z), dtype=float)
    norm = float(np.max(np.abs(fz))) if fz.size else 0.0
    for _ in range(maxit):
        if norm < tol:
            return z
        n = z.size
        jac = np.empty((fz.size, n))
        for i in range(n):
            h = rel_step * max(1.0, abs(z[i]))
            zp = z.copy()
            zp[i] += h
            jac[:, i] = (np.asarray(fun(zp), dtype=float) - fz) / h
        try:
            step = np.linalg.solve(jac, fz)
        except np.linalg.LinAlgError as exc:
            raise NoEquilibriumError(
                f"singular Jacobian in equilibrium solve (residual {norm:.3e})",
                residual_norm=norm,
            ) from exc
        # damped update guards the constant-power 1/v nonlinearity
        lam = 1.0
        for _ in range(8):
            zn = z - lam * step
            try:
                fn = np.asarray(fun(zn), dtype=float)
            except (ValueError, FloatingPointError, ZeroDivisionError):
                lam *= 0.5
                continue
            nn = float(np.max(np.abs(fn))) if fn.size else 0.0
            if np.isfinite(nn) and nn < norm * (1.0 - 1e-4 * lam) or nn < tol:
                z, fz, norm = zn, fn, nn
                break
            lam *= 0.5
        else:
            raise NoEquilibriumError(
                f"Newton stalled at residual {norm:.3e}", residual_norm=norm
            )
    raise NoEquilibriumError(
        f"Newton did not converge (residual {norm:.3e})", residual_norm=norm
    )


# ---------------------------------------------------------------------------
# Scenario description consumed by assemble()
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SystemSpec:
    """Resolved model selection (produced from a ScenarioConfig)."""

    source_kind: str
    mode: str
    load_kind: str
    base: PerUnitBase = PerUnitBase()
    line: LineParams = LineParams(0.01, 0.1)
    gains: DroopGains = DroopGains()
    gfm_ctrl: GfmControlParams = GfmControlParams()
    gfm_filter: GfmFilterParams = GfmFilterParams()
    sm: SmParams = SmParams()
    avr: AvrParams = AvrParams()
    stiff: StiffSourceParams = StiffSourceParams()
    zip_params: ZipParams = ZipParams()
    im_params: ImParams = ImParams()
    active_params: ActiveLoadParams = ActiveLoadParams()
    v_set: float = 1.0
    load_q: float = 0.0
    source_shunt: ShuntCapParams = ShuntCapParams(0.05)
    load_shunt: ShuntCapParams = ShuntCapParams(0.02)


def assemble(spec: SystemSpec) -> "TwoBusSystem":
    """Build the two-bus DAE for a source/network-mode/load combination.

    Unsupported pairings raise ConfigError; an ideal CPL under the EMT
    network is permitted but flagged (``expected_unstable``).
    """
    if spec.mode not in (QSP, EMT):
        raise ConfigError(f"unknown network mode {spec.mode!r}")
    if spec.load_kind not in LOAD_KINDS:
        raise ConfigError(f"unknown load kind {spec.load_kind!r}")
    if spec.source_kind not in GFM_KINDS + SM_KINDS + ("stiff",):
        raise ConfigError(f"unknown source kind {spec.source_kind!r}")
    if spec.source_kind == "genrou" and spec.mode != QSP:
        raise ConfigError("the GENROU machine is a QSP model; use marconato for EMT")
    if spec.source_kind == "marconato" and spec.mode != EMT:
        raise ConfigError("the Marconato machine is an EMT model; use genrou for QSP")
    if spec.load_kind == "im" and spec.mode == QSP:
        raise ConfigError("induction machine load is unsupported under QSP")
    if spec.load_kind == "active" and spec.mode == QSP:
        raise ConfigError("active rectifier load is unsupported under QSP")
    return TwoBusSystem(spec)


class TwoBusSystem(DaeModel):
    """Source + series line + load assembled as one index-1 DAE."""

    def __init__(self, spec: SystemSpec):
        self.spec = spec
        self.base = spec.base
        self.mode = spec.mode
        self.expected_unstable = spec.mode == EMT and spec.load_kind == "cpl"
        self.has_angle_symmetry = spec.source_kind in GFM_KINDS + SM_KINDS

        src = spec.source_kind
        if src in GFM_KINDS:
            self.gfm = GfmControl(src, spec.gains, spec.gfm_ctrl, spec.gfm_filter, spec.base)
        elif src == "genrou":
            self.machine = Genrou(spec.sm, spec.base)
        elif src == "marconato":
            self.machine = Marconato(spec.sm, spec.base)

        self._build_layout()

    # -- layout -------------------------------------------------------------

    def _build_layout(self):
        spec = self.spec
        src, mode, load = spec.source_kind, spec.mode, spec.load_kind
        x_labels, y_labels = [], []

        if src in GFM_KINDS:
            x_labels += [f"gfm.{n}" for n in self.gfm.labels]
        elif src in SM_KINDS:
            x_labels += [f"sm.{n}" for n in self.machine.labels]
            x_labels += ["sm.e_fd"]

        if mode == EMT:
            if src in GFM_KINDS:
                x_labels += ["conv.i_d", "conv.i_q", "bus1.v_d", "bus1.v_q"]
            elif src == "marconato":
                x_labels += ["bus1.v_d", "bus1.v_q"]
            x_labels += ["line.i_d", "line.i_q"]
            if load in ("ccl", "im", "active"):
                x_labels += ["bus2.v_d", "bus2.v_q"]
        else:
            if src in GFM_KINDS:
                y_labels += ["conv.i_d", "conv.i_q"]
            if src != "stiff":
                y_labels += ["bus1.v_d", "bus1.v_q"]
            y_labels += ["line.i_d", "line.i_q"]

        if load == "im":
            x_labels += [f"im.{n}" for n in ("psi_sd", "psi_sq", "psi_rd", "psi_rq", "omega_r")]
        elif load == "active":
            x_labels += [f"load.{n}" for n in ACTIVE_LOAD_LABELS]
        elif load in ("cpl",) or (load in ("ccl",) and mode == QSP):
            y_labels += ["load.v_d", "load.v_q"]
        elif load == "zip":
            y_labels += ["load.v_d", "load.v_q", "load.i1_d", "load.i1_q",
                         "load.i2_d", "load.i2_q"]
            if spec.zip_params.i_mag > 0.0:
                y_labels += ["load.i3_d", "load.i3_q"]
        elif load == "cil" and mode == QSP:
            y_labels += ["load.v_d", "load.v_q"]

        self.x_labels = x_labels
        self.y_labels = y_labels
        self.n_x = len(x_labels)
        self.n_y = len(y_labels)
        self._ix = {lab: k for k, lab in enumerate(x_labels)}
        self._iy = {lab: k for k, lab in enumerate(y_labels)}

    @property
    def labels(self):
        return self.x_labels + self.y_labels

    def state_index(self, label: str) -> int:
        if label in self._ix:
            return self._ix[label]
        raise KeyError(f"unknown differential state {label!r}")

    # -- load characteristics -------------------------------------------

    def _load_level_params(self, level: float, v_l: complex) -> dict:
        """Frozen per-level load parameters (resistances, torque, caps)."""
        spec = self.spec
        load = spec.load_kind
        out = {}
        if load == "cil":
            out["r_cil"] = 1.0 / level if level > 1.0 / R_OPEN else R_OPEN
        elif load == "ccl":
            out["i_ccl"] = level
            if self.mode == EMT:
                out["c2"] = max(spec.load_shunt.c, C_SHUNT_FLOOR)
        elif load == "cpl":
            out["p"] = level
            out["q"] = spec.load_q
        elif load == "zip":
            zp = spec.zip_params
            share = zp.eta * zp.p_cpl
            p_res = level * (1.0 - share)
            out["p_cpl"] = level * share
            out["q_cpl"] = zp.q
            out["r_l"] = abs(v_l) ** 2 / p_res if p_res > 0 else R_OPEN
            out["i_ccl"] = zp.i_mag
        elif load == "active":
            out["g_dc"] = level / spec.active_params.v_dc_ref**2
            out["c2"] = max(spec.load_shunt.c, C_SHUNT_FLOOR)
        elif load == "im":
            s0, tau0 = self._im_calibration()
            out["tau0"] = tau0
            out["s_rated"] = s0
        return out

    def _im_calibration(self):
        if not hasattr(self, "_im_cal"):
            self._im_cal = im_calibrate_torque(self.spec.im_params)
        return self._im_cal

    def _load_current(self, v_l: complex, level: float, load_refs: dict):
        """Steady-state complex current drawn by the load at a voltage."""
        spec = self.spec
        load = spec.load_kind
        if load == "cpl":
            s = complex(level, spec.load_q)
            return (s / v_l).conjugate()
        if load == "cil":
            return v_l / load_refs["r_cil"]
        if load == "ccl":
            vm = abs(v_l)
            return level * v_l / vm if vm > 0 else 0.0j
        if load == "zip":
            s1 = complex(load_refs["p_cpl"], load_refs["q_cpl"])
            i1 = (s1 / v_l).conjugate() if abs(v_l) > 0 else 0.0j
            i2 = v_l / load_refs["r_l"]
            i3 = load_refs["i_ccl"] * v_l / abs(v_l) if load_refs["i_ccl"] > 0 else 0.0j
            return i1 + i2 + i3
        raise ConfigError(f"no static characteristic for load {load!r}")

    # -- residual ---------------------------------------------------------

    def residual(self, x, y, params: RunParams):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.size != self.n_x or y.size != self.n_y:
            raise DimensionError(
                f"state sizes ({x.size}, {y.size}) do not match ({self.n_x}, {self.n_y})"
            )
        if self.mode == EMT:
            return self._residual_emt(x, y, params)
        return self._residual_qsp(x, y, params)

    # ---- QSP --------------------------------------------------------------

    def _residual_qsp(self, x, y, params):
        spec = self.spec
        base = self.base
        src = spec.source_kind
        wf = params.omega_frame
        f = np.empty(self.n_x)
        g = np.empty(self.n_y)
        iy = self._iy

        i_line = _c(y, iy["line.i_d"])
        if src == "stiff":
            v1 = spec.stiff.v
        else:
            v1 = _c(y, iy["bus1.v_d"])

        krow = 0
        if src in GFM_KINDS:
            i_cv = _c(y, iy["conv.i_d"])
            dx_src, v_mod = self.gfm.derivatives(
                x[: self.gfm.n_states], v1, i_line, i_cv, params.refs, wf
            )
            f[: self.gfm.n_states] = dx_src
            filt = spec.gfm_filter
            branch = v_mod - v1 - complex(filt.r_f, filt.x_f) * i_cv
            g[krow : krow + 2] = branch.real, branch.imag
            krow += 2
            kcl1 = i_cv - 1j * filt.c_f * v1 - i_line
            g[krow : krow + 2] = kcl1.real, kcl1.imag
            krow += 2
        elif src == "genrou":
            m = self.machine
            nm = m.n_states
            e_fd = x[nm]
            dx_sm = m.derivatives(x[:nm], v1, i_line, e_fd, params.refs["tau_m"], wf)
            f[:nm] = dx_sm
            f[nm] = avr_residual(
                e_fd, abs(v1), params.refs["v_ref_avr"], spec.avr.k, spec.avr.t_e
            )
            g[krow : krow + 2] = m.stator_residual(x[:nm], v1, i_line)
            krow += 2

        v_l = _c(y, iy["load.v_d"])
        line = v1 - v_l - spec.line.z * i_line
        g[krow : krow + 2] = line.real, line.imag
        krow += 2

        self._load_algebra(g, krow, v_l, i_line, y, params)
        return f, g

    # ---- EMT --------------------------------------------------------------

    def _residual_emt(self, x, y, params):
        spec = self.spec
        base = self.base
        src = spec.source_kind
        load = spec.load_kind
        wf = params.omega_frame
        f = np.empty(self.n_x)
        g = np.empty(self.n_y)
        ix = self._ix

        i_line = _c(x, ix["line.i_d"])

        # load-bus voltage: state (shunt cap), algebraic, or substituted
        if "bus2.v_d" in ix:
            v_l = _c(x, ix["bus2.v_d"])
        elif "load.v_d" in self._iy:
            v_l = _c(y, self._iy["load.v_d"])
        else:  # constant impedance: v_l = r * i substituted into the line
            v_l = params.load_refs["r_cil"] * i_line

        # source side
        if src == "stiff":
            v1 = spec.stiff.v
        else:
            v1 = _c(x, ix["bus1.v_d"])

        if src in GFM_KINDS:
            n_src = self.gfm.n_states
            i_cv = _c(x, ix["conv.i_d"])
            dx_src, v_mod = self.gfm.derivatives(x[:n_src], v1, i_line, i_cv, params.refs, wf)
            f[:n_src] = dx_src
            filt = spec.gfm_filter
            di_cv = (base.omega_b / filt.x_f) * (
                v_mod - v1 - filt.r_f * i_cv
            ) - 1j * base.omega_b * wf * i_cv
            f[ix["conv.i_d"]], f[ix["conv.i_d"] + 1] = di_cv.real, di_cv.imag
            dv1 = (base.omega_b / filt.c_f) * (i_cv - i_line) - 1j * base.omega_b * wf * v1
            f[ix["bus1.v_d"]], f[ix["bus1.v_d"] + 1] = dv1.real, dv1.imag
        elif src == "marconato":
            m = self.machine
            nm = m.n_states
            e_fd = x[nm]
            dx_sm = m.derivatives(x[:nm], v1, e_fd, params.refs["tau_m"], wf)
            f[:nm] = dx_sm
            f[nm] = avr_residual(
                e_fd, abs(v1), params.refs["v_ref_avr"], spec.avr.k, spec.avr.t_e
            )
            i_mach = m.network_current(x[:nm])
            c1 = spec.source_shunt.c
            dv1 = (base.omega_b / c1) * (i_mach - i_line) - 1j * base.omega_b * wf * v1
            f[ix["bus1.v_d"]], f[ix["bus1.v_d"] + 1] = dv1.real, dv1.imag

        di = emt_line_derivative(i_line, v1, v_l, spec.line, base, wf)
        f[ix["line.i_d"]], f[ix["line.i_d"] + 1] = di.real, di.imag

        # load side
        if load == "im":
            k = ix["im.psi_sd"]
            x_im = x[k : k + 5]
            dx_im = im_derivatives(
                x_im, v_l, spec.im_params, base, params.load_refs["tau0"], wf
            )
            f[k : k + 5] = dx_im
            i_s, _ = im_currents(_c(x_im, 0), _c(x_im, 2), spec.im_params)
            i_load = params.level * i_s
        elif load == "active":
            k = ix["load.i_cv_d"]
            x_al = x[k : k + 12]
            dx_al = active_load_derivatives(
                x_al, v_l, spec.active_params, base, params.load_refs["g_dc"], wf
            )
            f[k : k + 12] = dx_al
            i_load = _c(x_al, 4)  # grid-side current drawn from the bus
        elif load == "ccl":
            vm = abs(v_l)
            i_load = params.level * v_l / vm if vm > 0 else 0.0j
        else:
            i_load = None  # algebraic or substituted loads

        if "bus2.v_d" in ix:
            c2 = params.load_refs.get("c2", max(spec.load_shunt.c, C_SHUNT_FLOOR))
            dv2 = (base.omega_b / c2) * (i_line - i_load) - 1j * base.omega_b * wf * v_l
            f[ix["bus2.v_d"]], f[ix["bus2.v_d"] + 1] = dv2.real, dv2.imag

        self._load_algebra(g, 0, v_l, i_line, y, params)
        return f, g

    # ---- shared algebraic load rows ----------------------------------------

    def _load_algebra(self, g, krow, v_l, i_line, y, params):
        """Algebraic load residual rows, written in a fixed order/sign.

        The ZIP rows are ordered (current split, CPL power, resistor law
        [, CCL law]) against unknowns (v_l, i1, i2 [, i3]) so that the
        algebraic determinant equals |i1|^2 - |i2|^2 analytically.
        """
        spec = self.spec
        load = spec.load_kind
        lr = params.load_refs
        if load == "cpl":
            s = v_l * i_line.conjugate() - complex(lr["p"], lr["q"])
            g[krow], g[krow + 1] = s.real, s.imag
        elif load == "cil" and self.mode == QSP:
            r = i_line - v_l / lr["r_cil"]
            g[krow], g[krow + 1] = r.real, r.imag
        elif load == "ccl" and self.mode == QSP:
            vm = abs(v_l)
            r = i_line - params.level * v_l / vm if vm > 0 else i_line
            g[krow], g[krow + 1] = r.real, r.imag
        elif load == "zip":
            iy = self._iy
            i1 = _c(y, iy["load.i1_d"])
            i2 = _c(y, iy["load.i2_d"])
            has3 = "load.i3_d" in iy
            i3 = _c(y, iy["load.i3_d"]) if has3 else 0.0j
            split = i_line - i1 - i2 - i3
            g[krow], g[krow + 1] = split.real, split.imag
            s1 = v_l * i1.conjugate() - complex(lr["p_cpl"], lr["q_cpl"])
            g[krow + 2], g[krow + 3] = s1.real, s1.imag
            res = i2 - v_l / lr["r_l"]
            g[krow + 4], g[krow + 5] = res.real, res.imag
            if has3:
                ccl = i3 - lr["i_ccl"] * v_l / abs(v_l)
                g[krow + 6], g[krow + 7] = ccl.real, ccl.imag

    # -- power flow ---------------------------------------------------------

    def _source_voltage_setpoint(self) -> float:
        spec = self.spec
        if spec.source_kind == "dvoc":
            return spec.gains.e_0
        if spec.source_kind == "stiff":
            return spec.stiff.v_mag
        return spec.v_set

    def _power_flow(self, level: float, warm=None):
        """Upper-branch two-bus power flow.

        Returns (v1, v_l, i_line, extras) with the source terminal at
        angle zero. Warm starts continue from a previous solution; a cold
        start at high load ramps the level to stay on the upper branch.
        """
        spec = self.spec
        v1 = complex(self._source_voltage_setpoint(), 0.0)
        z = spec.line.z
        load = spec.load_kind
        extras = {}

        if load == "cil":
            r_cil = 1.0 / level if level > 1.0 / R_OPEN else R_OPEN
            # current first: v1 - v_l cancels catastrophically at light load
            i_line = v1 / (z + r_cil)
            return v1, r_cil * i_line, i_line, extras

        if load == "im":
            s0, tau0 = self._im_calibration()
            extras["tau0"] = tau0

            def im_side(v_l):
                slip = im_solve_slip(v_l, spec.im_params, tau0)
                _, _, i_s, _ = im_steady_state(v_l, slip, spec.im_params)
                i_sys = level * i_s
                q_abs = (v_l * i_sys.conjugate()).imag
                c2 = max(q_abs / abs(v_l) ** 2, C_SHUNT_FLOOR)
                return slip, i_sys, c2

            def mismatch(u):
                v_l = complex(u[0], u[1])
                slip, i_sys, c2 = im_side(v_l)
                m = (v1 - v_l) / z - (i_sys + 1j * c2 * v_l)
                return [m.real, m.imag]

            u0 = [warm.real, warm.imag] if warm is not None else [v1.real, 0.0]
            u = _newton(mismatch, u0)
            v_l = complex(u[0], u[1])
            slip, i_sys, c2 = im_side(v_l)
            extras.update(slip=slip, c2=c2)
            return v1, v_l, (v1 - v_l) / z, extras

        if load == "active":
            ap = spec.active_params
            g_dc = level / ap.v_dc_ref**2
            c2 = max(spec.load_shunt.c, C_SHUNT_FLOOR)
            extras["g_dc"] = g_dc
            extras["c2"] = c2

            def mismatch(u):
                v_l = complex(u[0], u[1])
                _, i_g = active_load_equilibrium(v_l, ap, g_dc)
                m = (v1 - v_l) / z - (i_g + 1j * c2 * v_l)
                return [m.real, m.imag]

            u0 = [warm.real, warm.imag] if warm is not None else [v1.real, 0.0]
            u = _newton(mismatch, u0)
            v_l = complex(u[0], u[1])
            return v1, v_l, (v1 - v_l) / z, extras

        # static characteristics (cpl, ccl, zip)
        load_refs = None
        c_bus = (
            max(spec.load_shunt.c, C_SHUNT_FLOOR)
            if (self.mode == EMT and load == "ccl")
            else 0.0
        )

        def mismatch(u):
            v_l = complex(u[0], u[1])
            m = (v1 - v_l) / z - self._load_current(v_l, level, load_refs)
            m -= 1j * c_bus * v_l
            return [m.real, m.imag]

        def solve_at(lev, u0):
            nonlocal load_refs
            vl_guess = complex(u0[0], u0[1])
            load_refs = self._load_level_params(lev, vl_guess)
            u = u0
            # the eta-split resistor depends on |v_l|; iterate to the
            # self-consistent value (total power is level regardless)
            for _ in range(8):
                u = _newton(mismatch, u)
                v_sol = complex(u[0], u[1])
                new_refs = self._load_level_params(lev, v_sol)
                if load == "zip" and abs(new_refs["r_l"] - load_refs["r_l"]) > 1e-13:
                    load_refs = new_refs
                    continue
                return u
            return u

        u0 = [warm.real, warm.imag] if warm is not None else [v1.real, 0.0]
        nonlocal_level = level
        try:
            u = solve_at(nonlocal_level, u0)
        except NoEquilibriumError:
            if warm is not None:
                raise
            # cold start far up the curve: ramp the level
            u = [v1.real, 0.0]
            for lev in np.linspace(max(0.1, level / 10.0), level, 12):
                u = solve_at(lev, u)
        v_l = complex(u[0], u[1])
        extras["load_refs"] = load_refs
        return v1, v_l, (v1 - v_l) / z, extras

    # -- initialization -------------------------------------------------------

    def initialize(self, level: float, warm: OperatingPoint | None = None,
                   check_index1: bool = True) -> OperatingPoint:
        """Equilibrium at a load level (upper P-V branch).

        Solves the power flow, back-initializes all device states in
        closed form and re-dispatches references so the full residual
        vanishes. Raises NoEquilibriumError past the nose.
        """
        if level < 0:
            raise NoEquilibriumError("load level must be >= 0")
        spec = self.spec
        warm_vl = None
        if warm is not None:
            meta = warm.metadata
            if "v_l" in meta:
                warm_vl = complex(meta["v_l"][0], meta["v_l"][1])
        v1, v_l, i_line, extras = self._power_flow(level, warm_vl)

        load_refs = extras.pop("load_refs", None)
        if load_refs is None:
            load_refs = self._load_level_params(level, v_l)
        load_refs.update({k: v for k, v in extras.items() if k in ("tau0", "c2", "g_dc")})

        x = np.zeros(self.n_x)
        y = np.zeros(self.n_y)
        refs = {}
        src = spec.source_kind

        if src in GFM_KINDS:
            x_src, refs = self.gfm.init_from_flow(v1, i_line)
            x[: self.gfm.n_states] = x_src
            i_cv = self.gfm.equilibrium_converter_current(v1, i_line)
        elif src in SM_KINDS:
            x_sm, e_fd, tau_m = self.machine.init_from_flow(v1, i_line)
            nm = self.machine.n_states
            x[:nm] = x_sm
            x[nm] = e_fd
            refs = {
                "tau_m": tau_m,
                "v_ref_avr": abs(v1) + e_fd / spec.avr.k,
            }

        if self.mode == EMT:
            ix = self._ix
            if src in GFM_KINDS:
                x[ix["conv.i_d"]], x[ix["conv.i_d"] + 1] = i_cv.real, i_cv.imag
                x[ix["bus1.v_d"]], x[ix["bus1.v_d"] + 1] = v1.real, v1.imag
            elif src == "marconato":
                x[ix["bus1.v_d"]], x[ix["bus1.v_d"] + 1] = v1.real, v1.imag
            x[ix["line.i_d"]], x[ix["line.i_d"] + 1] = i_line.real, i_line.imag
            if "bus2.v_d" in ix:
                x[ix["bus2.v_d"]], x[ix["bus2.v_d"] + 1] = v_l.real, v_l.imag
            if spec.load_kind == "im":
                slip = extras["slip"]
                psi_s, psi_r, _, _ = im_steady_state(v_l, slip, spec.im_params)
                k = ix["im.psi_sd"]
                x[k : k + 5] = [psi_s.real, psi_s.imag, psi_r.real, psi_r.imag, 1.0 - slip]
            elif spec.load_kind == "active":
                x_al, _ = active_load_equilibrium(v_l, spec.active_params, load_refs["g_dc"])
                k = ix["load.i_cv_d"]
                x[k : k + 12] = x_al
        else:
            iy = self._iy
            if src in GFM_KINDS:
                y[iy["conv.i_d"]], y[iy["conv.i_d"] + 1] = i_cv.real, i_cv.imag
            if src != "stiff":
                y[iy["bus1.v_d"]], y[iy["bus1.v_d"] + 1] = v1.real, v1.imag
            y[iy["line.i_d"]], y[iy["line.i_d"] + 1] = i_line.real, i_line.imag

        if "load.v_d" in self._iy:
            iy = self._iy
            y[iy["load.v_d"]], y[iy["load.v_d"] + 1] = v_l.real, v_l.imag
            if spec.load_kind == "zip":
                s1 = complex(load_refs["p_cpl"], load_refs["q_cpl"])
                i1 = (s1 / v_l).conjugate()
                i2 = v_l / load_refs["r_l"]
                y[iy["load.i1_d"]], y[iy["load.i1_d"] + 1] = i1.real, i1.imag
                y[iy["load.i2_d"]], y[iy["load.i2_d"] + 1] = i2.real, i2.imag
                if "load.i3_d" in iy:
                    i3 = load_refs["i_ccl"] * v_l / abs(v_l)
                    y[iy["load.i3_d"]], y[iy["load.i3_d"] + 1] = i3.real, i3.imag

        params = RunParams(level=level, refs=refs, load_refs=load_refs)
        x, y, resnorm = self._polish(x, y, params)
        if resnorm > 1e-8:
            raise NoEquilibriumError(
                f"initialization left a residual of {resnorm:.3e}",
                residual_norm=resnorm,
            )

        if check_index1 and self.n_y > 0:
            det = self._gy_det(x, y, params)
            if abs(det) <= 1e-12:
                raise SingularAlgebraError(
                    "algebraic block singular at the operating point", det_gy=det
                )

        i_load = i_line  # at bus 2 the line current feeds the load (+ shunt)
        s_src = v1 * i_line.conjugate()
        s_load = v_l * i_load.conjugate()
        metadata = {
            "v_l": (v_l.real, v_l.imag),
            "v_load_mag": abs(v_l),
            "v1": (v1.real, v1.imag),
            "p_source": s_src.real,
            "q_source": s_src.imag,
            "p_load": s_load.real,
            "q_load": s_load.imag,
            "p_line_loss": spec.line.r * abs(i_line) ** 2,
        }
        return OperatingPoint(x, y, level, params, metadata)

    def _polish(self, x, y, params):
        """Drive the back-initialized point onto the exact equilibrium.

        The closed-form initialization is limited by the power-flow
        Newton tolerance, which the stiff capacitor rows amplify. A few
        least-squares Newton iterations (with the source's rotational
        direction pinned through the extra row) push the residual to
        round-off for the already-frozen references.
        """

        def resnorm_of(xx, yy):
            f, g = self.residual(xx, yy, params)
            return max(
                float(np.max(np.abs(f))) if f.size else 0.0,
                float(np.max(np.abs(g))) if g.size else 0.0,
            ), f, g

        norm, f, g = resnorm_of(x, y)
        if norm < 1e-10 or self.n_x + self.n_y == 0:
            return x, y, norm
        n_x, n_y = self.n_x, self.n_y
        x_pin = x.copy()
        for _ in range(5):
            z = np.concatenate([x, y])

            def full(zz):
                ff, gg = self.residual(zz[:n_x], zz[n_x:], params)
                rows = [ff, gg]
                if self.has_angle_symmetry:
                    if self.spec.source_kind in GFM_KINDS:
                        pin = self.gfm.angle_pin(zz[: self.gfm.n_states],
                                                 x_pin[: self.gfm.n_states])
                    else:
                        pin = zz[0] - x_pin[0]
                    rows.append([pin])
                return np.concatenate(rows)

            f0 = full(z)
            jac = np.empty((f0.size, z.size))
            for i in range(z.size):
                h = 1e-7 * max(1.0, abs(z[i]))
                zp = z.copy()
                zp[i] += h
                jac[:, i] = (full(zp) - f0) / h
            step, *_ = np.linalg.lstsq(jac, f0, rcond=None)
            z_new = z - step
            new_norm, _, _ = resnorm_of(z_new[:n_x], z_new[n_x:])
            if not np.isfinite(new_norm) or new_norm >= norm:
                break
            x, y = z_new[:n_x], z_new[n_x:]
            norm = new_norm
            if norm < 1e-11:
                break
        return x, y, norm

    def _gy_det(self, x, y, params) -> float:
        h = 1e-7
        n = self.n_y
        jac = np.empty((n, n))
        g0 = self.residual(x, y, params)[1]
        for i in range(n):
            yp = y.copy()
            step = h * max(1.0, abs(y[i]))
            yp[i] += step
            jac[:, i] = (self.residual(x, yp, params)[1] - g0) / step
        return float(np.linalg.det(jac))

    # -- fixed-reference equilibria ------------------------------------------

    def solve_fixed_reference(self, level: float, refs: dict,
                              warm: OperatingPoint) -> OperatingPoint:
        """Equilibrium with frozen dispatch references.

        The system frequency departs from the nominal synchronous speed,
        so the solve runs in a co-rotating frame whose speed is an extra
        unknown; the source's rotational degree of freedom is pinned at
        the warm-start angle in exchange.
        """
        if self.spec.source_kind == "stiff":
            raise ConfigError("fixed-reference mode requires a dynamic source")
        n_x, n_y = self.n_x, self.n_y
        load_refs = warm.params.load_refs
        x_ref = warm.x.copy()

        n_src = self.gfm.n_states if self.spec.source_kind in GFM_KINDS else None

        def fun(z):
            x = z[:n_x]
            y = z[n_x : n_x + n_y]
            wf = z[-1]
            params = RunParams(level=level, refs=refs, load_refs=load_refs,
                               omega_frame=wf)
            f, g = self.residual(x, y, params)
            if self.spec.source_kind in GFM_KINDS:
                pin = self.gfm.angle_pin(x[:n_src], x_ref[:n_src])
            else:
                pin = x[0] - x_ref[0]
            return np.concatenate([f, g, [pin]])

        z0 = np.concatenate([warm.x, warm.y, [warm.params.omega_frame]])
        z = _newton(fun, z0, tol=1e-11)
        x, y, wf = z[:n_x], z[n_x : n_x + n_y], float(z[-1])
        params = RunParams(level=level, refs=refs, load_refs=load_refs, omega_frame=wf)
        meta = dict(warm.metadata)
        meta["omega_frame"] = wf
        return OperatingPoint(x, y, level, params, meta)


def residual(sys: DaeModel, x, y, params: RunParams):
    """Evaluate all component residuals of a system in declared order."""
    return sys.residual(x, y, params)


def initialize(sys: DaeModel, level: float, warm: OperatingPoint | None = None):
    """Solve the power flow and back-initialize device states."""
    return sys.initialize(level, warm)
