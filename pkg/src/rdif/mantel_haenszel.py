"""Mantel-Haenszel test of uniform DIF, matching on total raw score.

Each observed total score (including the studied item) is a stratum.  Group 0 is
the reference group.  The statistic uses the 0.5 continuity correction and is
referred to chi-square with one degree of freedom.
"""

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .exceptions import NoUsableStrataError


@dataclass(frozen=True)
class MhResult:
    chi2: np.ndarray
    p: np.ndarray
    flag: np.ndarray


def mh_chi2(tables, correction=0.5):
    """MH chi-square for a stack of 2x2 tables ``[[A, B], [C, D]]`` (K x 2 x 2).

    Rows are reference/focal, columns correct/incorrect.  Strata with a zero
    margin or fewer than two respondents carry no information and are dropped.
    """
    t = np.asarray(tables, dtype=float).reshape(-1, 2, 2)
    n_ref = t[:, 0].sum(axis=1)
    n_foc = t[:, 1].sum(axis=1)
    m1 = t[:, :, 0].sum(axis=1)
    m0 = t[:, :, 1].sum(axis=1)
    total = n_ref + n_foc
    ok = (n_ref > 0) & (n_foc > 0) & (m1 > 0) & (m0 > 0) & (total > 1)
    if not ok.any():
        raise NoUsableStrataError("no stratum has non-degenerate margins")
    t, n_ref, n_foc, m1, m0, total = (v[ok] for v in (t, n_ref, n_foc, m1, m0, total))
    expected = n_ref * m1 / total
    var = n_ref * n_foc * m1 * m0 / (total**2 * (total - 1.0))
    dev = max(abs(t[:, 0, 0].sum() - expected.sum()) - correction, 0.0)
    return dev**2 / var.sum()


def item_tables(data0, data1, item):
    """Stratified 2x2 tables for one item, one stratum per observed total score."""
    x0 = np.asarray(data0.data)
    x1 = np.asarray(data1.data)
    s0, s1 = x0.sum(axis=1), x1.sum(axis=1)
    m = x0.shape[1]
    tables = np.zeros((m + 1, 2, 2))
    np.add.at(tables, (s0, 0, 1 - x0[:, item]), 1.0)
    np.add.at(tables, (s1, 1, 1 - x1[:, item]), 1.0)
    return tables


def mantel_haenszel(data0, data1, alpha=0.05):
    if data0.m != data1.m:
        raise ValueError("groups must have the same items")
    chi2 = np.array([mh_chi2(item_tables(data0, data1, j)) for j in range(data0.m)])
    p = stats.chi2.sf(chi2, df=1)
    return MhResult(chi2=chi2, p=p, flag=p < alpha)
