"""Item calibrations for two independently calibrated groups, and DIF reports.

JSON schema for a calibration pair::

    {"n0": int, "n1": int,
     "items": [{"index": int, "a0": f, "d0": f, "a1": f, "d1": f,
                "cov": [[f, f, f, f], ...4 rows]}]}

``cov`` is the finite-sample covariance of ``[a0, d0, a1, d1]`` for that item.
The CSV form has one row per item with columns
``index,a0,d0,a1,d1,cov00,cov01,...,cov33`` (full 4x4, row-major) and an
optional leading comment line ``# n0=<int>,n1=<int>``.
"""

import csv
import io
import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from .exceptions import ParseError, ValidationError
from .robust import RdifFit

SYMMETRY_TOL = 1e-10
PARAMS = ("a0", "d0", "a1", "d1")
COV_COLUMNS = tuple(f"cov{r}{c}" for r in range(4) for c in range(4))
PAIR_COLUMNS = ("index",) + PARAMS + COV_COLUMNS
REPORT_COLUMNS = (
    "index", "y", "z",
    "t_intercept", "p_intercept", "flag_intercept",
    "t_slope", "p_slope", "flag_slope",
    "q_joint", "p_joint", "flag_joint",
)


@dataclass(frozen=True)
class ItemCalibration:
    index: int
    a0: float
    d0: float
    a1: float
    d1: float
    cov: np.ndarray

    def __post_init__(self):
        idx = self.index
        for name in PARAMS:
            value = getattr(self, name)
            try:
                value = float(value)
            except (TypeError, ValueError):
                raise ValidationError("must be a real number", idx, name) from None
            if not math.isfinite(value):
                raise ValidationError("must be finite", idx, name)
            object.__setattr__(self, name, value)
        for name in ("a0", "a1"):
            if not getattr(self, name) > 0:
                raise ValidationError("slope must be positive", idx, name)
        try:
            cov = np.array(self.cov, dtype=float)
        except (TypeError, ValueError):
            raise ValidationError("must be a 4x4 real matrix", idx, "cov") from None
        if cov.shape != (4, 4) or not np.all(np.isfinite(cov)):
            raise ValidationError("must be a finite 4x4 real matrix", idx, "cov")
        if np.max(np.abs(cov - cov.T)) > SYMMETRY_TOL:
            raise ValidationError("must be symmetric", idx, "cov")
        if np.any(cov[:2, 2:] != 0.0) or np.any(cov[2:, :2] != 0.0):
            raise ValidationError("cross-group covariances must be exactly 0", idx, "cov")
        if not np.all(np.linalg.eigvalsh(0.5 * (cov + cov.T)) > 0):
            raise ValidationError("must be positive definite", idx, "cov")
        cov.flags.writeable = False
        object.__setattr__(self, "cov", cov)

    @property
    def b0(self):
        return -self.d0 / self.a0

    @property
    def b1(self):
        return -self.d1 / self.a1

    def to_dict(self):
        return {"index": self.index, "a0": self.a0, "d0": self.d0, "a1": self.a1, "d1": self.d1,
                "cov": self.cov.tolist()}


@dataclass(frozen=True)
class CalibrationPair:
    items: tuple
    n0: int
    n1: int

    def __post_init__(self):
        items = tuple(self.items)
        object.__setattr__(self, "items", items)
        for name in ("n0", "n1"):
            n = getattr(self, name)
            if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1:
                raise ValidationError(f"{name} must be a positive integer")
            object.__setattr__(self, name, int(n))
        if len(items) < 3:
            raise ValidationError(f"m ≥ 3 required, got m={len(items)}")
        seen = set()
        for it in items:
            if not isinstance(it, ItemCalibration):
                raise ValidationError("items must be ItemCalibration instances")
            if it.index in seen:
                raise ValidationError("duplicate item index", it.index, "index")
            seen.add(it.index)

    @property
    def m(self):
        return len(self.items)

    @property
    def indices(self):
        return [it.index for it in self.items]

    def _stack(self, name):
        arr = np.array([getattr(it, name) for it in self.items], dtype=float)
        arr.flags.writeable = False
        return arr

    @cached_property
    def a0(self):
        return self._stack("a0")

    @cached_property
    def d0(self):
        return self._stack("d0")

    @cached_property
    def a1(self):
        return self._stack("a1")

    @cached_property
    def d1(self):
        return self._stack("d1")

    @cached_property
    def cov(self):
        arr = np.stack([it.cov for it in self.items])
        arr.flags.writeable = False
        return arr

    def to_dict(self):
        return {"n0": self.n0, "n1": self.n1, "items": [it.to_dict() for it in self.items]}


def _pair_from_dict(obj):
    if not isinstance(obj, dict):
        raise ParseError("top-level JSON value must be an object")
    for key in ("n0", "n1", "items"):
        if key not in obj:
            raise ParseError(f"missing key {key!r}")
    if not isinstance(obj["items"], list):
        raise ParseError("'items' must be a list")
    items = []
    for pos, raw in enumerate(obj["items"]):
        if not isinstance(raw, dict):
            raise ParseError(f"items[{pos}] must be an object")
        missing = [k for k in ("index",) + PARAMS + ("cov",) if k not in raw]
        if missing:
            raise ParseError(f"items[{pos}] missing keys {missing}")
        index = raw["index"]
        if isinstance(index, bool) or not isinstance(index, int):
            raise ValidationError("index must be an integer", index, "index")
        items.append(ItemCalibration(index, *(raw[k] for k in PARAMS), raw["cov"]))
    return CalibrationPair(tuple(items), obj["n0"], obj["n1"])


def _read_text(source):
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    elif isinstance(source, str):
        return source
    else:
        data = source.read()
        if isinstance(data, str):
            return data
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"input is not UTF-8: {exc}") from None


def _pair_from_csv(text, n0=None, n1=None):
    lines = text.splitlines()
    body = []
    for line in lines:
        stripped = line.strip()
        if stripped.startswith("#"):
            for part in stripped.lstrip("#").replace(" ", "").split(","):
                key, _, value = part.partition("=")
                if key in ("n0", "n1") and value:
                    try:
                        val = int(value)
                    except ValueError:
                        raise ParseError(f"bad {key} in CSV header: {value!r}") from None
                    n0, n1 = (val, n1) if key == "n0" else (n0, val)
        elif stripped:
            body.append(line)
    if n0 is None or n1 is None:
        raise ParseError("CSV calibration needs n0 and n1 (header comment '# n0=..,n1=..')")
    reader = csv.DictReader(body)
    if reader.fieldnames is None or set(PAIR_COLUMNS) - set(reader.fieldnames):
        raise ParseError(f"CSV header must contain columns {','.join(PAIR_COLUMNS)}")
    items = []
    for lineno, row in enumerate(reader, start=2):
        try:
            index = int(row["index"])
            values = [float(row[k]) for k in PARAMS]
            cov = np.array([float(row[c]) for c in COV_COLUMNS]).reshape(4, 4)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"CSV line {lineno}: {exc}") from None
        items.append(ItemCalibration(index, *values, cov))
    return CalibrationPair(tuple(items), n0, n1)


def load_calibration(source, format="json", n0=None, n1=None):
    """Parse and validate a :class:`CalibrationPair` from bytes, text or a stream.

    Raises :class:`ParseError` for malformed input and :class:`ValidationError`
    (naming the item and field) when an invariant fails.
    """
    text = _read_text(source)
    if format == "json":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        return _pair_from_dict(obj)
    if format == "csv":
        return _pair_from_csv(text, n0, n1)
    raise ValueError(f"unknown format {format!r}")


def save_calibration(pair, format="json"):
    """Serialise ``pair``; floats use shortest round-trip repr so nothing is lost."""
    if format == "json":
        return (json.dumps(pair.to_dict(), indent=2) + "\n").encode("utf-8")
    if format == "csv":
        buf = io.StringIO()
        buf.write(f"# n0={pair.n0},n1={pair.n1}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(PAIR_COLUMNS)
        for it in pair.items:
            w.writerow([it.index] + [repr(getattr(it, k)) for k in PARAMS] + [repr(float(x)) for x in it.cov.ravel()])
        return buf.getvalue().encode("utf-8")
    raise ValueError(f"unknown format {format!r}")


@dataclass(frozen=True)
class ItemResult:
    index: int
    y: float
    z: float
    t_intercept: float
    p_intercept: float
    flag_intercept: bool
    t_slope: float
    p_slope: float
    flag_slope: bool
    q_joint: Optional[float]
    p_joint: Optional[float]
    flag_joint: bool


@dataclass(frozen=True)
class DifReport:
    """Per-item R-DIF tests plus the two robust scaling fits they rest on."""

    alpha: float
    theta_fit: RdifFit
    sigma_fit: RdifFit
    items: tuple
    log_slope: bool = False

    @property
    def converged(self):
        return self.theta_fit.converged and self.sigma_fit.converged

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "log_slope": self.log_slope,
            "theta_fit": self.theta_fit.to_dict(),
            "sigma_fit": self.sigma_fit.to_dict(),
            "items": [dict(r.__dict__) for r in self.items],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            alpha=d["alpha"],
            theta_fit=RdifFit.from_dict(d["theta_fit"]),
            sigma_fit=RdifFit.from_dict(d["sigma_fit"]),
            items=tuple(ItemResult(**r) for r in d["items"]),
            log_slope=d.get("log_slope", False),
        )


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def save_report(report, format="csv"):
    if report is None or not getattr(report, "items", None):
        raise ValueError("report not populated")
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in report.items:
            w.writerow([_fmt(getattr(r, c)) for c in REPORT_COLUMNS])
        return buf.getvalue().encode("utf-8")
    if format == "json":
        return (json.dumps(report.to_dict(), indent=2) + "\n").encode("utf-8")
    raise ValueError(f"unknown format {format!r}")


def load_report(source):
    """Inverse of ``save_report(..., "json")``."""
    try:
        return DifReport.from_dict(json.loads(_read_text(source)))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed report JSON: {exc}") from None
