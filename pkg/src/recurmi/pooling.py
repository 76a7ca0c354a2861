"""Rubin's-rules pooling of per-imputation coefficient estimates.

For ``m`` completed-data fits with estimates ``q_j`` and squared standard
errors ``u_j`` the pooled quantities per coefficient are

* ``qbar = mean(q_j)``
* within-variance ``W = mean(u_j)``
* between-variance ``B = var(q_j)`` (denominator ``m - 1``)
* total variance ``T = W + (1 + 1/m) B``
* degrees of freedom ``df = (m - 1) (1 + W / ((1 + 1/m) B))**2``

and the 95% interval is ``qbar +- t(df, 0.975) sqrt(T)``, falling back to
the normal quantile when ``B = 0`` (``df`` is infinite).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import t as student_t

from .distributions import normal_quantile
from .errors import PoolingError

__all__ = ["PooledFit", "pool_rubin", "pooled_from_single"]

_Z975 = normal_quantile(0.975)


@dataclass(frozen=True)
class PooledFit:
    """Pooled coefficients with their variance decomposition, per coefficient.

    ``m = 1`` marks a single unpooled fit wrapped for uniform downstream
    handling; its between-variance is identically zero.
    """

    qbar: np.ndarray
    within_var: np.ndarray
    between_var: np.ndarray
    total_var: np.ndarray
    df: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    m: int

    def __post_init__(self):
        arrays = {}
        for name in ("qbar", "within_var", "between_var", "total_var",
                     "df", "ci_low", "ci_high"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
            arrays[name] = arr
        shapes = {a.shape for a in arrays.values()}
        if len(shapes) != 1 or arrays["qbar"].ndim != 1:
            raise ValueError(f"pooled fields must share one 1-D shape, got {shapes}")
        t_check = self.within_var + (1.0 + 1.0 / self.m) * self.between_var
        if np.abs(t_check - self.total_var).max() > 1e-12 * (1.0 + np.abs(t_check).max()):
            raise ValueError("total variance violates the pooling identity")
        if not np.all(self.ci_low < self.ci_high):
            raise ValueError("confidence bounds are not ordered")

    @property
    def p(self) -> int:
        return self.qbar.size


def _interval(qbar, total_var, df):
    quantile = np.where(np.isinf(df), _Z975, student_t.ppf(0.975, df))
    half = quantile * np.sqrt(total_var)
    return qbar - half, qbar + half


def pool_rubin(fits: Sequence) -> PooledFit:
    """Pool ``m >= 2`` converged fits exposing ``beta``, ``se``, ``converged``."""
    m = len(fits)
    if m < 2:
        raise PoolingError(f"pooling needs at least 2 fits, got {m}")
    failed = [j for j, f in enumerate(fits, start=1) if not f.converged]
    if failed:
        raise PoolingError(
            f"imputation(s) {failed} did not converge", failed_indices=failed
        )
    if len({np.asarray(f.beta).shape for f in fits}) != 1:
        raise PoolingError("fits disagree on the coefficient set")
    q = np.vstack([np.asarray(f.beta, dtype=float) for f in fits])
    u = np.vstack([np.asarray(f.se, dtype=float) for f in fits]) ** 2
    qbar = q.mean(axis=0)
    w = u.mean(axis=0)
    b = q.var(axis=0, ddof=1)
    b[np.all(q == q[0], axis=0)] = 0.0  # identical inputs: no mean round-off
    total = w + (1.0 + 1.0 / m) * b
    with np.errstate(divide="ignore"):
        df = np.where(
            b > 0.0,
            (m - 1.0) * (1.0 + w / ((1.0 + 1.0 / m) * b)) ** 2,
            np.inf,
        )
    low, high = _interval(qbar, total, df)
    return PooledFit(qbar, w, b, total, df, low, high, m)


def pooled_from_single(fit) -> PooledFit:
    """Wrap one unpooled fit in the same container (normal-quantile CI)."""
    if not fit.converged:
        raise PoolingError("cannot pool a fit that did not converge")
    qbar = np.asarray(fit.beta, dtype=float)
    w = np.asarray(fit.se, dtype=float) ** 2
    zero = np.zeros_like(w)
    df = np.full_like(w, np.inf)
    low, high = _interval(qbar, w, df)
    return PooledFit(qbar, w, zero, w.copy(), df, low, high, 1)
