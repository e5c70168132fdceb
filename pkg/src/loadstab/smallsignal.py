"""Numerical linearization, reduced state matrix and modal analysis.

The reduced matrix A = f_x - f_y g_y^{-1} g_x is formed through a linear
solve (never an explicit inverse). Jacobian blocks come from central
finite differences with per-variable steps, which keeps second-order
accuracy near bifurcation points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from loadstab.errors import (
    LinearizationError,
    NumericalFailureError,
    SingularAlgebraError,
)
from loadstab.frames import Phasor

#: raw singularity threshold on |det(g_y)| below which reduction refuses
DET_SINGULAR_TOL = 1e-12
#: LU-pivot ratio flagging a numerically singular algebraic block
PIVOT_RATIO_TOL = 1e-14
#: participation threshold above which a state is reported as dominant
DOMINANT_PARTICIPATION = 0.2


@dataclass
class LinearizedSystem:
    """Real Jacobian blocks of a DAE at an operating point."""

    f_x: np.ndarray
    f_y: np.ndarray
    g_x: np.ndarray
    g_y: np.ndarray
    det_gy: float
    x_labels: list
    y_labels: list
    #: smallest/largest LU pivot magnitude ratio of g_y (1.0 when n_y = 0)
    pivot_ratio: float = 1.0

    @property
    def n_x(self) -> int:
        return self.f_x.shape[0]

    @property
    def n_y(self) -> int:
        return self.g_y.shape[0]

    def is_singular(self, det_tol: float = DET_SINGULAR_TOL) -> bool:
        if self.n_y == 0:
            return False
        return abs(self.det_gy) <= det_tol or self.pivot_ratio <= PIVOT_RATIO_TOL


@dataclass
class EigenReport:
    """Eigenvalues with participation factors and dominant state labels."""

    eigenvalues: np.ndarray
    participation: np.ndarray  # p[state, mode], columns sum to 1
    labels: list
    dominant_states: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "eigenvalues": [[float(ev.real), float(ev.imag)] for ev in self.eigenvalues],
            "participation": self.participation.tolist(),
            "labels": list(self.labels),
            "dominant_states": [list(ds) for ds in self.dominant_states],
        }


def fd_jacobian(func, z0, f0=None, rel_step=1e-6, what=""):
    """Central-difference Jacobian of ``func`` at ``z0``.

    Per-variable step h_i = rel_step * max(1, |z_i|). Raises
    LinearizationError naming the probed variable if a probe returns a
    non-finite residual.
    """
    z0 = np.asarray(z0, dtype=float)
    n = z0.size
    if f0 is None:
        f0 = func(z0)
    f0 = np.asarray(f0, dtype=float)
    m = f0.size
    jac = np.empty((m, n))
    for i in range(n):
        h = rel_step * max(1.0, abs(z0[i]))
        zp = z0.copy()
        zp[i] += h
        zm = z0.copy()
        zm[i] -= h
        fp = np.asarray(func(zp), dtype=float)
        fm = np.asarray(func(zm), dtype=float)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise LinearizationError(
                f"non-finite residual while probing variable {i} {what}",
                label=what or str(i),
            )
        jac[:, i] = (fp - fm) / (2.0 * h)
    return jac


def _gy_determinant(g_y: np.ndarray):
    """Signed determinant plus the LU pivot magnitude ratio of g_y."""
    n = g_y.shape[0]
    if n == 0:
        return 1.0, 1.0
    det = float(np.linalg.det(g_y))
    try:
        lu, _ = scipy.linalg.lu_factor(g_y)
        piv = np.abs(np.diag(lu))
        pmax = piv.max()
        ratio = float(piv.min() / pmax) if pmax > 0 else 0.0
    except (ValueError, scipy.linalg.LinAlgError):
        ratio = 0.0
    return det, ratio


def numeric_jacobians(sys, op, rel_step=1e-6) -> LinearizedSystem:
    """Finite-difference all four DAE Jacobian blocks at an operating point.

    ``sys`` is any model exposing ``residual(x, y, params) -> (f, g)`` with
    label lists; ``op`` is an OperatingPoint carrying (x0, y0, params).
    """
    x0 = np.asarray(op.x, dtype=float)
    y0 = np.asarray(op.y, dtype=float)
    n_x, n_y = x0.size, y0.size

    def f_of_x(x):
        return sys.residual(x, y0, op.params)[0]

    def g_of_x(x):
        return sys.residual(x, y0, op.params)[1]

    def f_of_y(y):
        return sys.residual(x0, y, op.params)[0]

    def g_of_y(y):
        return sys.residual(x0, y, op.params)[1]

    f_x = fd_jacobian(f_of_x, x0, rel_step=rel_step, what="(differential)")
    if n_y > 0:
        f_y = fd_jacobian(f_of_y, y0, rel_step=rel_step, what="(algebraic)")
        g_x = fd_jacobian(g_of_x, x0, rel_step=rel_step, what="(differential)")
        g_y = fd_jacobian(g_of_y, y0, rel_step=rel_step, what="(algebraic)")
    else:
        f_y = np.zeros((n_x, 0))
        g_x = np.zeros((0, n_x))
        g_y = np.zeros((0, 0))
    det, ratio = _gy_determinant(g_y)
    return LinearizedSystem(
        f_x=f_x,
        f_y=f_y,
        g_x=g_x,
        g_y=g_y,
        det_gy=det,
        x_labels=list(sys.x_labels),
        y_labels=list(sys.y_labels),
        pivot_ratio=ratio,
    )


def reduce_system(lin: LinearizedSystem, det_tol: float = DET_SINGULAR_TOL) -> np.ndarray:
    """Reduced state matrix A = f_x - f_y g_y^{-1} g_x via a linear solve.

    Raises SingularAlgebraError when the algebraic block is singular at
    the configured threshold; callers doing singularity-induced
    bifurcation detection consume that error rather than treating it as
    fatal.
    """
    if lin.n_y == 0:
        return lin.f_x.copy()
    if lin.is_singular(det_tol):
        raise SingularAlgebraError(
            f"algebraic Jacobian singular: det(g_y) = {lin.det_gy:.3e}",
            det_gy=lin.det_gy,
        )
    return lin.f_x - lin.f_y @ np.linalg.solve(lin.g_y, lin.g_x)


def _sort_modes(eigvals):
    """Deterministic mode order: descending real part, then imag part."""
    return np.lexsort((eigvals.imag, -eigvals.real))


def modal_analysis(A: np.ndarray, labels=None) -> EigenReport:
    """Full nonsymmetric eigendecomposition with participation factors.

    Participation p[k, i] = |phi_ki psi_ik| where phi are right
    eigenvectors (columns) and psi = phi^{-1} rows; columns are normalized
    to sum to one. Dominant states per mode are the labels whose
    participation reaches the reporting threshold.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if labels is None:
        labels = [f"x{i}" for i in range(n)]
    if n == 0:
        return EigenReport(np.array([], dtype=complex), np.zeros((0, 0)), list(labels))
    if not np.all(np.isfinite(A)):
        raise NumericalFailureError("state matrix contains non-finite entries")
    try:
        eigvals, phi = np.linalg.eig(A)
        psi = np.linalg.inv(phi)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError(f"eigendecomposition failed: {exc}") from exc
    order = _sort_modes(eigvals)
    eigvals = eigvals[order]
    phi = phi[:, order]
    psi = psi[order, :]
    raw = np.abs(phi * psi.T)  # raw[k, i] = |phi_ki psi_ik|
    col = raw.sum(axis=0)
    col[col == 0.0] = 1.0
    part = raw / col
    dominant = [
        [labels[k] for k in range(n) if part[k, i] >= DOMINANT_PARTICIPATION]
        for i in range(n)
    ]
    return EigenReport(eigvals, part, list(labels), dominant)


def allen_ilic_condition(v_source, v_load) -> bool:
    """Closed-form series-RL + ideal-CPL stability check.

    Returns True (stable) iff |v_source - v_load| > |v_load| strictly;
    equality counts as unstable. Used as an oracle against full EMT
    constant-power-load eigenanalysis.
    """
    if isinstance(v_source, Phasor):
        v_source = v_source.as_complex()
    if isinstance(v_load, Phasor):
        v_load = v_load.as_complex()
    return abs(complex(v_source) - complex(v_load)) > abs(complex(v_load))


def det_gy_zip(i1, i2) -> float:
    """Closed-form algebraic determinant of the CPL/resistor split.

    Equals |i1|^2 - |i2|^2 (CPL branch current vs resistor branch
    current); it vanishes when the two branch current magnitudes are
    equal, which is where the singularity-induced bifurcation of the
    eta-parameterized ZIP study sits.
    """
    if isinstance(i1, Phasor):
        i1 = i1.as_complex()
    if isinstance(i2, Phasor):
        i2 = i2.as_complex()
    return abs(complex(i1)) ** 2 - abs(complex(i2)) ** 2
