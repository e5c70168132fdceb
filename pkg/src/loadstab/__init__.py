"""Two-bus source/load stability toolkit.

Builds differential-algebraic models of a single source (grid-forming
inverter or synchronous machine) feeding a load through a line, under
quasi-static phasor (QSP) or dynamic-phasor EMT network representations,
and provides equilibrium solving, small-signal eigenanalysis with
participation factors, P-V loadability continuation with bifurcation
classification, and implicit time-domain integration.
"""

__version__ = "0.1.0"

from loadstab.frames import Phasor, PerUnitBase, rotate_frame
from loadstab.system import OperatingPoint, assemble
from loadstab.smallsignal import (
    LinearizedSystem,
    EigenReport,
    numeric_jacobians,
    reduce_system,
    modal_analysis,
    allen_ilic_condition,
    det_gy_zip,
)
from loadstab.continuation import (
    SweepResult,
    BifurcationReport,
    pv_sweep,
    classify_bifurcation,
    refine_pstar,
    eta_rootlocus,
)
from loadstab.timedomain import Trajectory, integrate, probe_limit_cycle

__all__ = [
    "Phasor",
    "PerUnitBase",
    "rotate_frame",
    "OperatingPoint",
    "assemble",
    "LinearizedSystem",
    "EigenReport",
    "numeric_jacobians",
    "reduce_system",
    "modal_analysis",
    "allen_ilic_condition",
    "det_gy_zip",
    "SweepResult",
    "BifurcationReport",
    "pv_sweep",
    "classify_bifurcation",
    "refine_pstar",
    "eta_rootlocus",
    "Trajectory",
    "integrate",
    "probe_limit_cycle",
]
