"""Robust scaling and DIF detection for two-group 2PL calibrations."""

__version__ = "0.1.0"

from .calibration import (
    CalibrationPair,
    DifReport,
    ItemCalibration,
    ItemResult,
    load_calibration,
    load_report,
    save_calibration,
    save_report,
)
from .dif import analyze, fit_scaling, joint_q, t_statistic
from .irt import ResponseMatrix, TwoPlSpec, fit_2pl, make_pair, simulate_2pl
from .mantel_haenszel import mantel_haenszel
from .robust import PsiSpec, RdifFit, irls_solve, newton_solve, start_value
from .scaling import ScalingKind

__all__ = [
    "CalibrationPair",
    "DifReport",
    "ItemCalibration",
    "ItemResult",
    "PsiSpec",
    "RdifFit",
    "ResponseMatrix",
    "ScalingKind",
    "TwoPlSpec",
    "analyze",
    "fit_2pl",
    "fit_scaling",
    "irls_solve",
    "joint_q",
    "load_calibration",
    "load_report",
    "make_pair",
    "mantel_haenszel",
    "newton_solve",
    "save_calibration",
    "save_report",
    "simulate_2pl",
    "start_value",
    "t_statistic",
]
