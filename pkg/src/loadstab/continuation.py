"""Loadability sweeps, root-locus studies and bifurcation classification.

A sweep walks the load level upward with warm-started equilibria,
linearizes at every step and records eigenvalues, the algebraic
determinant and a stability verdict. The classifier then looks at the
first stability change and decides between a Hopf crossing (conjugate
pair over the imaginary axis), a transcritical crossing (real eigenvalue
through zero), a singularity-induced bifurcation (determinant sign change
with the critical eigenvalue passing through infinite magnitude) and a
fold (equilibria disappear without any observed crossing).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from loadstab.errors import (
    InvalidBracketError,
    LoadstabError,
    NoEquilibriumError,
    NumericalFailureError,
    SingularAlgebraError,
)
from loadstab.smallsignal import (
    EigenReport,
    modal_analysis,
    numeric_jacobians,
    reduce_system,
)

#: eigenvalues below this magnitude may be the structural rotational mode
#: (set above the central-difference noise floor of the Jacobians)
ROTATIONAL_TOL = 1e-6
#: eigenvalue magnitude that counts as "passing through infinity" (SIB)
SIB_MAGNITUDE = 1e4
#: imaginary parts below this floor count as real (transcritical) crossings
HOPF_IMAG_FLOOR = 1e-6


@dataclass
class SweepStep:
    """One record of a loadability sweep."""

    level: float
    v_load_mag: float = float("nan")
    eigenvalues: np.ndarray | None = None
    max_re: float = float("nan")
    det_gy: float = float("nan")
    stable: bool | None = None
    failure: str | None = None
    report: EigenReport | None = None
    op: object = None


@dataclass
class SweepResult:
    """Ordered sweep records; truncates at the first lost equilibrium."""

    steps: list = field(default_factory=list)
    truncated: bool = False
    truncation_level: float = float("nan")
    truncation_reason: str = ""

    @property
    def levels(self):
        return np.array([s.level for s in self.steps])

    def last_stable(self):
        prev = None
        for s in self.steps:
            if s.stable:
                prev = s
        return prev


@dataclass
class BifurcationReport:
    """Classification of the stability change found in a sweep."""

    kind: str  # hopf | transcritical | singularity_induced | fold | none
    p_star: float = float("nan")
    critical_eigenvalues: list = field(default_factory=list)
    dominant_states: list = field(default_factory=list)
    evidence: dict = field(default_factory=dict)
    ambiguous: bool = False

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "p_star": self.p_star,
            "critical_eigenvalues": [
                [float(ev.real), float(ev.imag)] for ev in self.critical_eigenvalues
            ],
            "dominant_states": list(self.dominant_states),
            "evidence": {k: _plain(v) for k, v in self.evidence.items()},
            "ambiguous": self.ambiguous,
        }


def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        return float(v)
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def stability_verdict(eigvals, has_angle_symmetry, rotational_tol=ROTATIONAL_TOL):
    """Max real part with the single structural rotational mode excluded.

    Systems whose source carries an absolute-angle symmetry always own
    one eigenvalue at (numerically) zero; at most one eigenvalue inside
    the tolerance ball is ignored for the verdict.
    """
    ev = np.asarray(eigvals, dtype=complex)
    if ev.size == 0:
        return float("-inf"), True
    if has_angle_symmetry:
        k = int(np.argmin(np.abs(ev)))
        if abs(ev[k]) < rotational_tol:
            ev = np.delete(ev, k)
    if ev.size == 0:
        return float("-inf"), True
    max_re = float(np.max(ev.real))
    return max_re, max_re < 0.0


def analyze_point(sys, op, rotational_tol=ROTATIONAL_TOL):
    """Linearize, reduce and eigendecompose one operating point."""
    lin = numeric_jacobians(sys, op)
    A = reduce_system(lin)
    report = modal_analysis(A, sys.x_labels)
    max_re, stable = stability_verdict(
        report.eigenvalues, getattr(sys, "has_angle_symmetry", False), rotational_tol
    )
    return lin, report, max_re, stable


def pv_sweep(sys, p_from: float, p_to: float, step: float,
             rotational_tol: float = ROTATIONAL_TOL) -> SweepResult:
    """Warm-started loadability sweep from p_from to p_to inclusive.

    Per-step failures other than a lost equilibrium are recorded and the
    sweep continues; once no equilibrium exists the sweep truncates.
    """
    if not (p_from < p_to and step > 0.0):
        raise LoadstabError("sweep requires p_from < p_to and step > 0")
    n = int(round((p_to - p_from) / step))
    levels = p_from + step * np.arange(n + 1)
    result = SweepResult()
    warm = None
    for level in levels:
        rec = SweepStep(level=float(level))
        try:
            op = sys.initialize(level, warm=warm)
        except NoEquilibriumError as exc:
            result.truncated = True
            result.truncation_level = float(level)
            result.truncation_reason = f"no-equilibrium: {exc}"
            break
        except (SingularAlgebraError, LoadstabError) as exc:
            rec.failure = f"initialization: {exc}"
            result.steps.append(rec)
            continue
        warm = op
        rec.op = op
        rec.v_load_mag = op.metadata.get("v_load_mag", float("nan"))
        try:
            lin, report, max_re, stable = analyze_point(sys, op, rotational_tol)
        except SingularAlgebraError as exc:
            rec.failure = f"singular-algebra: {exc}"
            rec.det_gy = exc.det_gy if exc.det_gy is not None else float("nan")
            result.steps.append(rec)
            continue
        except NumericalFailureError as exc:
            rec.failure = f"numerical: {exc}"
            result.steps.append(rec)
            continue
        rec.eigenvalues = report.eigenvalues
        rec.report = report
        rec.det_gy = lin.det_gy
        rec.max_re = max_re
        rec.stable = stable
        result.steps.append(rec)
    return result


def _pair_eigenvalues(prev, curr, cap=None):
    """Greedy nearest-neighbor matching of two eigenvalue sets.

    Returns index pairs (i_prev, i_curr); eigenvalues farther apart than
    the cap stay unmatched (they start or end a trace).
    """
    prev = np.asarray(prev, dtype=complex)
    curr = np.asarray(curr, dtype=complex)
    pairs = []
    used_p, used_c = set(), set()
    dist = np.abs(prev[:, None] - curr[None, :])
    order = np.dstack(np.unravel_index(np.argsort(dist, axis=None), dist.shape))[0]
    for i, j in order:
        if i in used_p or j in used_c:
            continue
        if cap is not None and dist[i, j] > cap:
            break
        used_p.add(i)
        used_c.add(j)
        pairs.append((int(i), int(j)))
    return pairs


def _dominant_labels(report: EigenReport, mode_index: int, threshold=0.2):
    col = report.participation[:, mode_index]
    order = np.argsort(col)[::-1]
    labs = [report.labels[k] for k in order if col[k] >= threshold]
    return labs or [report.labels[order[0]]]


def classify_bifurcation(sweep: SweepResult,
                         sib_magnitude: float = SIB_MAGNITUDE,
                         hopf_imag_floor: float = HOPF_IMAG_FLOOR) -> BifurcationReport:
    """Classify the first stability change of a sweep.

    Detection order at a stable->unstable transition: determinant sign
    change with diverging eigenvalue magnitude (singularity-induced),
    then conjugate-pair crossing (Hopf), then real crossing
    (transcritical). A truncated sweep whose last valid step is stable
    and shows no crossing is a fold.
    """
    steps = [s for s in sweep.steps if s.failure is None and s.stable is not None]
    if len(steps) < 2:
        return BifurcationReport(kind="none")

    trans = None
    for a, b in zip(steps[:-1], steps[1:]):
        if a.stable and not b.stable:
            trans = (a, b)
            break

    if trans is None:
        # a singular analysis step wedged between stable and unstable
        # records still marks a SIB candidate; otherwise check truncation
        raw = sweep.steps
        for k in range(1, len(raw) - 1):
            if (
                raw[k].failure
                and raw[k - 1].stable
                and raw[k + 1].stable is False
            ):
                trans = (raw[k - 1], raw[k + 1])
                break
        if trans is None:
            if sweep.truncated and steps and steps[-1].stable:
                last = steps[-1]
                return BifurcationReport(
                    kind="fold",
                    p_star=0.5 * (last.level + sweep.truncation_level),
                    evidence={
                        "last_stable_level": last.level,
                        "failed_level": sweep.truncation_level,
                        "reason": sweep.truncation_reason,
                    },
                )
            return BifurcationReport(kind="none")

    a, b = trans
    p_star = 0.5 * (a.level + b.level)
    ev_a, ev_b = a.eigenvalues, b.eigenvalues
    det_flip = (
        np.isfinite(a.det_gy)
        and np.isfinite(b.det_gy)
        and a.det_gy * b.det_gy < 0.0
    )

    # singularity-induced: determinant flips sign while an eigenvalue
    # leaves through -infinity and re-enters from +infinity
    big_neg = ev_a[ev_a.real < -sib_magnitude] if ev_a is not None else []
    big_pos = ev_b[ev_b.real > sib_magnitude] if ev_b is not None else []
    if det_flip and len(big_neg) and len(big_pos):
        mode_a = int(np.argmin(ev_a.real))
        return BifurcationReport(
            kind="singularity_induced",
            p_star=p_star,
            critical_eigenvalues=[ev_a[mode_a], ev_b[int(np.argmax(ev_b.real))]],
            dominant_states=_dominant_labels(a.report, mode_a),
            evidence={
                "det_gy_before": a.det_gy,
                "det_gy_after": b.det_gy,
                "magnitude_before": float(abs(ev_a[mode_a])),
            },
        )

    # ordinary crossing: find modes moving from Re<0 to Re>0
    pairs = _pair_eigenvalues(ev_a, ev_b)
    crossing = [
        (i, j) for i, j in pairs if ev_a[i].real < 0.0 <= ev_b[j].real
    ]
    if not crossing:
        # equilibria persist but no matched crossing: classify from the
        # unstable side's rightmost eigenvalue
        j = int(np.argmax(ev_b.real))
        kind = "hopf" if abs(ev_b[j].imag) > hopf_imag_floor else "transcritical"
        return BifurcationReport(
            kind=kind,
            p_star=p_star,
            critical_eigenvalues=[ev_b[j]],
            dominant_states=_dominant_labels(b.report, j),
            evidence={"unmatched_crossing": True},
            ambiguous=True,
        )

    # take the crossing that lands with the largest real part
    crossing.sort(key=lambda ij: ev_b[ij[1]].real, reverse=True)
    i, j = crossing[0]
    lam_a, lam_b = ev_a[i], ev_b[j]
    n_distinct = len(
        {round(ev_b[jj].imag, 9) if ev_b[jj].imag > 0 else -round(-ev_b[jj].imag, 9)
         for _, jj in crossing}
    )
    ambiguous = n_distinct > 2
    if abs(lam_b.imag) > hopf_imag_floor:
        conj = [lam_b, lam_b.conjugate()]
        return BifurcationReport(
            kind="hopf",
            p_star=p_star,
            critical_eigenvalues=conj,
            dominant_states=_dominant_labels(a.report, i),
            evidence={
                "crossing_from": [lam_a.real, lam_a.imag],
                "crossing_to": [lam_b.real, lam_b.imag],
            },
            ambiguous=ambiguous,
        )
    return BifurcationReport(
        kind="transcritical",
        p_star=p_star,
        critical_eigenvalues=[lam_b],
        dominant_states=_dominant_labels(a.report, i),
        evidence={
            "crossing_from": [lam_a.real, lam_a.imag],
            "crossing_to": [lam_b.real, lam_b.imag],
        },
        ambiguous=ambiguous,
    )


def refine_pstar(sys, bracket, tol: float = 1e-4,
                 rotational_tol: float = ROTATIONAL_TOL) -> float:
    """Bisection on the stability verdict down to the requested width.

    A point counts as "stable" only when a stable equilibrium exists;
    lost equilibria and singular reductions land on the unstable side, so
    the same refinement works for Hopf, transcritical, SIB and fold
    boundaries.
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if not lo < hi:
        raise InvalidBracketError("bracket must satisfy lo < hi")
    warm = {"op": None}

    def verdict(level):
        try:
            op = sys.initialize(level, warm=warm["op"])
            _, _, _, stable = analyze_point(sys, op, rotational_tol)
        except (NoEquilibriumError, SingularAlgebraError):
            return False
        if stable:
            warm["op"] = op
        return stable

    s_lo, s_hi = verdict(lo), verdict(hi)
    if s_lo == s_hi:
        raise InvalidBracketError(
            f"same stability verdict ({s_lo}) at both bracket ends"
        )
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if verdict(mid) == s_lo:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class EtaTracePoint:
    eta: float
    eigenvalues: np.ndarray | None
    det_gy: float
    singular: bool = False
    v_load_mag: float = float("nan")


def eta_rootlocus(sys, eta_grid, guard: float = 1e-4, level: float = 1.0):
    """Eigenvalue traces of the CPL/resistor split study over eta.

    For each share the resistor is rebuilt from the split rule, the
    system re-initialized and the reduced eigenvalues recorded together
    with det(g_y). Grid points inside the guard band around the singular
    share are recorded as singular points. Traces are continuity-ordered
    by nearest-neighbor matching so each column follows one eigenvalue.
    """
    if sys.spec.load_kind != "zip":
        raise LoadstabError("eta root locus requires the zip load")
    points = []
    prev_ev = None
    warm = None
    for eta in eta_grid:
        eta = float(eta)
        if abs(eta * sys.spec.zip_params.p_cpl - 0.5) < guard:
            points.append(EtaTracePoint(eta, None, 0.0, singular=True))
            continue
        variant = dataclasses.replace(
            sys.spec, zip_params=dataclasses.replace(sys.spec.zip_params, eta=eta)
        )
        vsys = type(sys)(variant)
        try:
            op = vsys.initialize(level, warm=warm)
            warm = op
            lin = numeric_jacobians(vsys, op)
            A = reduce_system(lin)
            ev = np.linalg.eigvals(A)
        except (SingularAlgebraError, NoEquilibriumError):
            points.append(EtaTracePoint(eta, None, float("nan"), singular=True))
            continue
        if prev_ev is not None and ev.size == prev_ev.size:
            pairs = _pair_eigenvalues(prev_ev, ev)
            ordered = np.empty_like(ev)
            for i, j in pairs:
                ordered[i] = ev[j]
            ev = ordered
        else:
            ev = ev[np.lexsort((ev.imag, ev.real))]
        prev_ev = ev
        points.append(
            EtaTracePoint(eta, ev, lin.det_gy, v_load_mag=op.metadata["v_load_mag"])
        )
    return points
