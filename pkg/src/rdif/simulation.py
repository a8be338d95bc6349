"""Monte-Carlo harness for the breakdown (sim1) and power (sim2) studies.

Every replication is generated from ``SeedSequence([seed, rep])`` so results do
not depend on execution order or on how replications are spread over workers.
Within a replication the generating item parameters are drawn first; the DIF
items are a fresh uniform subset each time.
"""

import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from typing import NamedTuple, Optional, Tuple, Union

import numpy as np

from .dif import analyze, normal_pvalue
from .exceptions import NoUsableStrataError, RdifError
from .irt import TwoPlSpec, fit_2pl, make_pair, simulate_2pl
from .mantel_haenszel import mantel_haenszel
from .scaling import tau_intercept, var_estimator

log = logging.getLogger(__name__)

DIF_TYPES = ("intercept", "slope", "both")
# (delta, gamma) per DIF type for the power study
SIM2_EFFECTS = {"intercept": (0.5, 1.0), "slope": (0.0, 2.0), "both": (0.35, 1.5)}
SIM2_NS = (200, 350, 500)


@dataclass(frozen=True)
class SimCondition:
    m: int = 15
    n0: int = 500
    n1: int = 500
    dif_count: int = 0
    dif_type: str = "intercept"
    delta: float = 0.5
    gamma: float = 1.0
    impact_mean: Union[float, Tuple[float, float]] = 0.5
    impact_sd: float = 1.0
    impact_var_range: Optional[Tuple[float, float]] = None
    reps: int = 200
    seed: int = 0
    alpha: float = 0.05

    def __post_init__(self):
        if self.m < 3:
            raise ValueError("m must be at least 3")
        if not 0 <= self.dif_count <= self.m:
            raise ValueError(f"dif_count must be in [0, m={self.m}], got {self.dif_count}")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.n0 < 1 or self.n1 < 1:
            raise ValueError("group sizes must be positive")
        if self.dif_type not in DIF_TYPES:
            raise ValueError(f"dif_type must be one of {DIF_TYPES}")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0,1)")
        if isinstance(self.impact_mean, (list, tuple)):
            object.__setattr__(self, "impact_mean", _range(self.impact_mean, "impact_mean"))
        if self.impact_var_range is not None:
            lo, hi = _range(self.impact_var_range, "impact_var_range")
            if lo <= 0:
                raise ValueError("impact_var_range must be positive")
            object.__setattr__(self, "impact_var_range", (lo, hi))
        elif not self.impact_sd > 0:
            raise ValueError("impact_sd must be positive")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown condition keys: {sorted(unknown)}")
        return cls(**d)


def _range(value, name):
    if len(value) != 2 or not value[0] <= value[1]:
        raise ValueError(f"{name} must be a [low, high] pair")
    return float(value[0]), float(value[1])


class GeneratingParams(NamedTuple):
    a0: np.ndarray
    d0: np.ndarray
    a1: np.ndarray
    d1: np.ndarray
    mean: float
    sd: float
    dif_items: frozenset
    seeds: Tuple[int, int]

    @property
    def theta(self):
        return self.mean / self.sd


class ConditionData(NamedTuple):
    data0: object
    data1: object
    dif_items: frozenset
    params: GeneratingParams


def condition_parameters(cond, rep):
    """Draw the generating parameters of replication ``rep``.

    Difficulties ``b ~ U(-1.5, 1.5)`` and slopes ``a0 ~ U(.9, 2.5)`` with
    ``d = -a b``.  Intercept DIF moves the difficulty by ``delta`` at the
    reference slope; slope DIF multiplies the slope by ``gamma`` and leaves the
    intercept alone.
    """
    rng = np.random.default_rng([cond.seed, rep])
    m = cond.m
    a0 = rng.uniform(0.9, 2.5, m)
    b = rng.uniform(-1.5, 1.5, m)
    dif = np.sort(rng.choice(m, size=cond.dif_count, replace=False))
    if isinstance(cond.impact_mean, tuple):
        mean = rng.uniform(*cond.impact_mean)
    else:
        mean = float(cond.impact_mean)
    if cond.impact_var_range is not None:
        sd = math.sqrt(rng.uniform(*cond.impact_var_range))
    else:
        sd = float(cond.impact_sd)
    seeds = tuple(int(s) for s in rng.integers(0, 2**63 - 1, size=2))
    a1, d1 = apply_dif(a0, b, dif, cond.dif_type, cond.delta, cond.gamma)
    return GeneratingParams(a0, -a0 * b, a1, d1, mean, sd, frozenset(int(j) for j in dif), seeds)


def apply_dif(a0, b, dif_items, dif_type, delta, gamma):
    """Group-1 slopes and intercepts given reference slopes ``a0`` and difficulties ``b``."""
    a0 = np.asarray(a0, dtype=float)
    b = np.asarray(b, dtype=float)
    dif = np.asarray(list(dif_items), dtype=int)
    a1, d1 = a0.copy(), -a0 * b
    if dif_type in ("intercept", "both"):
        d1[dif] = -a0[dif] * (b[dif] + delta)
    if dif_type in ("slope", "both"):
        a1[dif] = gamma * a0[dif]
    return a1, d1


def gen_condition_data(cond, rep):
    """Simulate both groups of replication ``rep``; group 1 has trait ``N(mean, sd^2)``."""
    par = condition_parameters(cond, rep)
    data0 = simulate_2pl(TwoPlSpec(par.a0, par.d0), cond.n0, par.seeds[0])
    data1 = simulate_2pl(TwoPlSpec(par.a1, par.d1, par.mean, par.sd), cond.n1, par.seeds[1])
    return ConditionData(data0, data1, par.dif_items, par)


class RepOutcome(NamedTuple):
    rep: int
    flags: dict  # (method, test) -> bool array, or None when the method failed
    theta: float
    converged: bool


def run_rep(cond, rep, with_baselines=True):
    data0, data1, _, par = gen_condition_data(cond, rep)
    flags = {}
    theta, converged = float("nan"), False
    try:
        fit0, fit1 = fit_2pl(data0), fit_2pl(data1)
        pair = make_pair(fit0, fit1)
        report = analyze(pair, alpha=cond.alpha)
    except (RdifError, np.linalg.LinAlgError) as exc:
        log.warning("condition %s rep %d failed: %s", cond, rep, exc)
        for test in ("intercept", "slope", "joint"):
            flags[("rdif", test)] = None
        if with_baselines:
            flags[("rdif_true", "intercept")] = None
    else:
        converged = report.converged and fit0.converged and fit1.converged
        theta = report.theta_fit.theta
        flags[("rdif", "intercept")] = np.array([r.flag_intercept for r in report.items])
        flags[("rdif", "slope")] = np.array([r.flag_slope for r in report.items])
        flags[("rdif", "joint")] = np.array([r.flag_joint for r in report.items])
        if with_baselines:
            # Wald test centred on the generating scaling parameter
            taus = np.asarray(tau_intercept(pair, par.theta))
            t = (report.theta_fit.values - par.theta) / np.sqrt(taus - var_estimator(taus))
            flags[("rdif_true", "intercept")] = normal_pvalue(t) < cond.alpha
    if with_baselines:
        try:
            flags[("mh", "uniform")] = mantel_haenszel(data0, data1, cond.alpha).flag
        except NoUsableStrataError as exc:
            log.warning("condition %s rep %d: MH failed: %s", cond, rep, exc)
            flags[("mh", "uniform")] = None
    return RepOutcome(rep, flags, theta, converged)


def _run_task(args):
    cond, rep, with_baselines = args
    return run_rep(cond, rep, with_baselines)


@dataclass
class SimResult:
    design: str
    conditions: list
    rows: list
    theta_estimates: list  # per condition: array over reps (nan = failed)
    converged: list  # per condition: bool array over reps

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for row in self.rows:
            w.writerow([_fmt(row[c]) for c in RESULT_COLUMNS])
        return buf.getvalue().encode("utf-8")

    def theta_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("design", "condition", "n0", "n1", "dif_count", "dif_type", "rep", "theta", "converged"))
        for ci, cond in enumerate(self.conditions):
            for rep, (t, ok) in enumerate(zip(self.theta_estimates[ci], self.converged[ci])):
                w.writerow([self.design, ci, cond.n0, cond.n1, cond.dif_count, cond.dif_type, rep,
                            _fmt(float(t)), _fmt(bool(ok))])
        return buf.getvalue().encode("utf-8")

    def row(self, method, test, **cond_fields):
        """The unique result row for ``method``/``test`` matching ``cond_fields``."""
        hits = [r for r in self.rows if r["method"] == method and r["test"] == test
                and all(r[k] == v for k, v in cond_fields.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {method}/{test} {cond_fields}")
        return hits[0]


RESULT_COLUMNS = (
    "design", "m", "n0", "n1", "dif_count", "dif_type", "delta", "gamma", "reps", "alpha",
    "method", "test", "fp", "tn", "tp", "fn", "failed", "fpr", "power",
    "mean_theta", "sd_theta", "convergence_rate",
)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def _aggregate(design, cond, outcomes):
    thetas = np.array([o.theta for o in outcomes])
    conv = np.array([o.converged for o in outcomes])
    ok = np.isfinite(thetas)
    mean_theta = float(np.mean(thetas[ok])) if ok.any() else float("nan")
    sd_theta = float(np.std(thetas[ok], ddof=1)) if ok.sum() > 1 else float("nan")
    keys = list(outcomes[0].flags)
    rows = []
    for method, test in keys:
        fp = tn = tp = fn = failed = 0
        for o in outcomes:
            positive = np.zeros(cond.m, dtype=bool)
            # positives are the DIF items whichever parameter a test targets
            positive[list(o.params_dif)] = True
            flags = o.flags[(method, test)]
            if flags is None:
                # a failed analysis flags nothing; counted so the totals still add up
                failed += 1
                flags = np.zeros(cond.m, dtype=bool)
            tp += int(np.sum(flags & positive))
            fn += int(np.sum(~flags & positive))
            fp += int(np.sum(flags & ~positive))
            tn += int(np.sum(~flags & ~positive))
        row = {
            "design": design, **{k: v for k, v in asdict(cond).items() if k in RESULT_COLUMNS},
            "method": method, "test": test, "fp": fp, "tn": tn, "tp": tp, "fn": fn, "failed": failed,
            "fpr": fp / (fp + tn) if fp + tn else float("nan"),
            "power": tp / (tp + fn) if tp + fn else float("nan"),
            "mean_theta": mean_theta, "sd_theta": sd_theta,
            "convergence_rate": float(conv.mean()),
        }
        rows.append(row)
    return rows, thetas, conv


class _Outcome(NamedTuple):
    flags: dict
    theta: float
    converged: bool
    params_dif: frozenset


def run_conditions(design, conditions, with_baselines=True, jobs=None, progress=None):
    """Run every replication of every condition and aggregate per condition."""
    tasks = [(c, rep, with_baselines) for c in conditions for rep in range(c.reps)]
    jobs = jobs or os.cpu_count() or 1
    if jobs == 1:
        raw = []
        for i, t in enumerate(tasks):
            raw.append(_run_task(t))
            if progress:
                progress(i + 1, len(tasks))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            raw = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (8 * jobs))))
    result = SimResult(design, list(conditions), [], [], [])
    pos = 0
    for c in conditions:
        chunk = raw[pos : pos + c.reps]
        pos += c.reps
        outcomes = [
            _Outcome(o.flags, o.theta, o.converged, condition_parameters(c, o.rep).dif_items)
            for o in sorted(chunk, key=lambda o: o.rep)
        ]
        rows, thetas, conv = _aggregate(design, c, outcomes)
        result.rows.extend(rows)
        result.theta_estimates.append(thetas)
        result.converged.append(conv)
    return result


def sim1_condition(**overrides):
    """Breakdown-study defaults: 15 items, 500 per group, impact N(.5, 1)."""
    return replace(SimCondition(), **overrides)


def sim2_condition(**overrides):
    """Power-study defaults: 10 items, one DIF item, random impact per replication."""
    base = SimCondition(m=10, dif_count=1, impact_mean=(-0.5, 0.5), impact_var_range=(0.5, 2.0))
    return replace(base, **overrides)


def run_sim1(base=None, dif_counts=None, jobs=None, progress=None):
    """Sweep the number of worst-case DIF items from 0 to ``ceil(m/2)``."""
    base = base or sim1_condition()
    if dif_counts is None:
        dif_counts = range(0, math.ceil(base.m / 2) + 1)
    conditions = [replace(base, dif_count=int(k)) for k in dif_counts]
    return run_conditions("sim1", conditions, with_baselines=True, jobs=jobs, progress=progress)


def run_sim2(base=None, ns=SIM2_NS, effects=None, jobs=None, progress=None):
    """Cross group size with DIF type (intercept, slope, both) for a single DIF item."""
    base = base or sim2_condition()
    effects = SIM2_EFFECTS if effects is None else effects
    conditions = [
        replace(base, n0=int(n), n1=int(n), dif_type=t, delta=effects[t][0], gamma=effects[t][1])
        for n in ns
        for t in DIF_TYPES
    ]
    return run_conditions("sim2", conditions, with_baselines=False, jobs=jobs, progress=progress)
