"""Implicit time-domain integration and limit-cycle probing.

Fixed-step trapezoidal rule with a Newton corrector per step; the
algebraic states are solved simultaneously so every trajectory point is
consistent with the constraints. The iteration matrix is frozen and
refactored only when convergence degrades, which keeps the corrected
solution second-order accurate while avoiding a Jacobian per iteration.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from loadstab.errors import (
    LoadstabError,
    ModelInvalidError,
    SingularLoadError,
)
from loadstab.smallsignal import fd_jacobian


@dataclass
class Trajectory:
    """Time series of differential and algebraic states."""

    times: np.ndarray
    states: np.ndarray  # (n_steps, n_x)
    algebraic: np.ndarray  # (n_steps, n_y)
    labels: list
    truncated: bool = False
    reason: str = ""

    def column(self, label: str) -> np.ndarray:
        try:
            k = self.labels.index(label)
        except ValueError as exc:
            raise KeyError(f"unknown label {label!r}") from exc
        n_x = self.states.shape[1]
        if k < n_x:
            return self.states[:, k]
        return self.algebraic[:, k - n_x]


def _solve_algebraic(sys, x, y0, params, tol=1e-11, maxit=30):
    """Re-solve g(x, y) = 0 after a state jump (perturbation consistency)."""
    y = np.asarray(y0, dtype=float).copy()
    if y.size == 0:
        return y
    for _ in range(maxit):
        g = sys.residual(x, y, params)[1]
        if np.max(np.abs(g)) < tol:
            return y
        jac = fd_jacobian(lambda yy: sys.residual(x, yy, params)[1], y, f0=g)
        y = y - np.linalg.solve(jac, g)
    raise ModelInvalidError("could not restore algebraic consistency after perturbation")


class _TrapStepper:
    """Trapezoidal step with a frozen, refactored-on-demand Jacobian."""

    def __init__(self, sys, params, dt, tol=1e-9, max_newton=12):
        self.sys = sys
        self.params = params
        self.dt = dt
        self.tol = tol
        self.max_newton = max_newton
        self.n_x = sys.n_x
        self.n_y = sys.n_y
        self._lu = None

    def _residual_z(self, z):
        x = z[: self.n_x]
        y = z[self.n_x :]
        return self.sys.residual(x, y, self.params)

    def _refresh(self, z):
        n_x, n_y, dt = self.n_x, self.n_y, self.dt

        def wrapped(zz):
            f, g = self._residual_z(zz)
            return np.concatenate([f, g])

        jac = fd_jacobian(wrapped, z)
        f_x = jac[:n_x, :n_x]
        f_y = jac[:n_x, n_x:]
        g_x = jac[n_x:, :n_x]
        g_y = jac[n_x:, n_x:]
        m = np.zeros((n_x + n_y, n_x + n_y))
        m[:n_x, :n_x] = np.eye(n_x) - 0.5 * dt * f_x
        m[:n_x, n_x:] = -0.5 * dt * f_y
        m[n_x:, :n_x] = g_x
        m[n_x:, n_x:] = g_y
        self._lu = scipy.linalg.lu_factor(m)

    def step(self, x_n, y_n, f_n):
        """One trapezoidal step; returns (x, y, f) at the new time."""
        n_x, dt = self.n_x, self.dt
        z = np.concatenate([x_n, y_n])
        if self._lu is None:
            self._refresh(z)
        refreshed = False
        for attempt in range(2):
            zk = z.copy()
            for it in range(self.max_newton):
                f_k, g_k = self._residual_z(zk)
                res = np.concatenate(
                    [zk[:n_x] - x_n - 0.5 * dt * (f_n + f_k), g_k]
                )
                norm = np.max(np.abs(res))
                if norm < self.tol:
                    return zk[:n_x], zk[n_x:], f_k
                delta = scipy.linalg.lu_solve(self._lu, res)
                zk = zk - delta
                if not np.all(np.isfinite(zk)):
                    break
            if refreshed:
                break
            self._refresh(z)
            refreshed = True
        raise ModelInvalidError("Newton corrector failed to converge")


def integrate(sys, start, perturbation=None, t_end=1.0, dt=1e-3,
              newton_tol=1e-9) -> Trajectory:
    """Trapezoidal integration from a (possibly perturbed) operating point.

    ``perturbation`` maps differential state labels to additive deltas
    applied at t = 0; the algebraic states are re-solved before stepping.
    Corrector failure or a model leaving its physical region truncates
    the trajectory with a reason instead of raising.
    """
    if dt <= 0.0:
        raise LoadstabError("dt must be > 0")
    x = np.asarray(start.x, dtype=float).copy()
    y = np.asarray(start.y, dtype=float).copy()
    params = start.params
    labels = list(sys.x_labels) + list(sys.y_labels)

    if perturbation:
        for lab, delta in perturbation.items():
            x[sys.state_index(lab)] += delta
        y = _solve_algebraic(sys, x, y, params)

    n_steps = int(round(t_end / dt))
    times = dt * np.arange(n_steps + 1)
    xs = np.empty((n_steps + 1, x.size))
    ys = np.empty((n_steps + 1, y.size))
    xs[0], ys[0] = x, y

    stepper = _TrapStepper(sys, params, dt, tol=newton_tol)
    truncated = False
    reason = ""
    f_n = sys.residual(x, y, params)[0]
    k = 0
    for k in range(1, n_steps + 1):
        try:
            x, y, f_n = stepper.step(xs[k - 1], ys[k - 1], f_n)
        except (ModelInvalidError, SingularLoadError, ValueError) as exc:
            truncated = True
            reason = str(exc)
            k -= 1
            break
        xs[k], ys[k] = x, y
    end = k + 1
    return Trajectory(times[:end], xs[:end], ys[:end], labels, truncated, reason)


def probe_limit_cycle(sys, op, state: str, amplitudes, t_end=1.0, dt=None,
                      decay_ratio=0.1, grow_ratio=10.0, threads=1):
    """Perturbation-amplitude scan around a linearly stable equilibrium.

    Integrates one trajectory per amplitude and compares the terminal
    envelope of the probed state's deviation against the initial
    deviation: decays (< decay_ratio x), diverges (> grow_ratio x, or
    truncation), sustained otherwise. The probed state should be
    rotation-invariant (e.g. a DC voltage, a power, a magnitude):
    sources with an absolute-angle symmetry relax onto a rotated copy of
    the equilibrium, which a whole-state-vector metric would mistake for
    a sustained deviation. Returns [(amplitude, verdict), ...] in input
    order; amplitudes must be ascending.
    """
    amplitudes = list(amplitudes)
    if any(b < a for a, b in zip(amplitudes, amplitudes[1:])):
        raise LoadstabError("amplitudes must be ascending")
    if dt is None:
        dt = 5e-5 if getattr(sys, "mode", "emt") == "emt" else 1e-3
    k_state = sys.state_index(state)
    x_eq = float(op.x[k_state])

    def run(amp):
        if amp == 0.0:
            return "decays"
        traj = integrate(sys, op, {state: amp}, t_end=t_end, dt=dt)
        dev = np.abs(traj.states[:, k_state] - x_eq)
        d0 = dev[0]
        if traj.truncated:
            return "diverges"
        tail = dev[int(0.8 * dev.size):]
        env = float(np.max(tail)) if tail.size else float(dev[-1])
        if env > grow_ratio * d0:
            return "diverges"
        if env < decay_ratio * d0:
            return "decays"
        return "sustained"

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            verdicts = list(pool.map(run, amplitudes))
    else:
        verdicts = [run(a) for a in amplitudes]
    return list(zip(amplitudes, verdicts))
