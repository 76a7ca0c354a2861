"""Baseline survival laws and the COM-Poisson count distribution.

The three survival families are parameterized through a log-time-scale
location ``beta0`` and a positive ancillary parameter ``a``:

* Weibull:       ``S0(t) = exp(-(exp(-beta0) * t) ** a)``
* log-normal:    ``S0(t) = 1 - Phi((ln t - beta0) / a)``
* log-logistic:  ``S0(t) = 1 / (1 + (exp(-beta0) * t) ** (1 / a))``

With ``a = 1`` the Weibull law has constant hazard ``exp(-beta0)``, so the
hazard ratio between two such laws is ``exp(beta0_1 - beta0_2)``.

The COM-Poisson distribution has pmf ``lambda**y / (y!)**nu / Z(lambda, nu)``
with normalizing constant ``Z = sum_j lambda**j / (j!)**nu``.  ``nu = 1``
recovers the Poisson distribution and ``nu = 0`` (with ``lambda < 1``) the
geometric distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit, gammaln, ndtr, ndtri

from .errors import DomainError

__all__ = [
    "Family",
    "EpisodeLaw",
    "ComPoissonParams",
    "surv_baseline",
    "inv_surv_baseline",
    "baseline_hazard",
    "draw_event_time",
    "com_poisson_log_z",
    "com_poisson_moments",
    "com_poisson_pmf",
    "com_poisson_sample",
    "normal_quantile",
]

# Truncation control for the COM-Poisson normalizing series.
DEFAULT_SERIES_TOL = 1e-12
MAX_SERIES_TERMS = 10_000


class Family(str, Enum):
    WEIBULL = "weibull"
    LOGNORMAL = "lognormal"
    LOGLOGISTIC = "loglogistic"


@dataclass(frozen=True)
class EpisodeLaw:
    """One per-episode baseline survival law.

    Parameters
    ----------
    family : Family
        Parametric family of the baseline survival function.
    beta0 : float
        Log-time-scale location parameter.
    ancillary : float
        Shape/scale parameter, strictly positive.
    """

    family: Family
    beta0: float
    ancillary: float

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if not math.isfinite(self.beta0):
            raise DomainError(f"beta0 must be finite, got {self.beta0!r}")
        if not (math.isfinite(self.ancillary) and self.ancillary > 0):
            raise DomainError(f"ancillary must be > 0, got {self.ancillary!r}")


@dataclass(frozen=True)
class ComPoissonParams:
    """COM-Poisson rate ``lam`` and dispersion ``nu``.

    ``nu = 0`` requires ``lam < 1``, otherwise the normalizing series
    diverges.
    """

    lam: float
    nu: float

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam > 0):
            raise DomainError(f"lam must be > 0, got {self.lam!r}")
        if not (math.isfinite(self.nu) and self.nu >= 0):
            raise DomainError(f"nu must be >= 0, got {self.nu!r}")
        if self.nu == 0 and self.lam >= 1:
            raise DomainError(
                f"nu=0 requires lam < 1 for a convergent series, got lam={self.lam!r}"
            )


def surv_baseline(law: EpisodeLaw, t: float) -> float:
    """Baseline survival function ``S0(t)``.

    ``t`` must be non-negative; returns a value in [0, 1], equal to 1 at
    ``t = 0`` and strictly decreasing in ``t``.
    """
    if not (t >= 0):
        raise DomainError(f"t must be >= 0, got {t!r}")
    if t == 0:
        return 1.0
    a = law.ancillary
    z = (math.log(t) - law.beta0) / a
    if law.family is Family.WEIBULL:
        # exp(-(e^{-beta0} t)^a) computed through logs to avoid overflow
        return float(math.exp(-math.exp(a * (math.log(t) - law.beta0))))
    if law.family is Family.LOGNORMAL:
        return float(ndtr(-z))
    # log-logistic: 1 / (1 + exp(z))
    return float(expit(-z))


def _safe_exp(x: float) -> float:
    try:
        return math.exp(x)
    except OverflowError:
        return math.inf


def _inv_surv_from_log(law: EpisodeLaw, log_u: float) -> float:
    """Quantile of the survival function from ``log(u)``, ``u`` in (0, 1].

    Working from ``log(u)`` keeps the Weibull branch exact even when ``u``
    itself would underflow (needed by :func:`draw_event_time` for large
    hazard multipliers).  The limits ``log_u = 0`` and ``log_u = -inf``
    map to times 0 and inf.
    """
    if log_u == 0.0:
        return 0.0
    if log_u == -math.inf:
        return math.inf
    a = law.ancillary
    if law.family is Family.WEIBULL:
        # S=u  =>  t = exp(beta0) * (-log u)^(1/a)
        return _safe_exp(law.beta0 + math.log(-log_u) / a)
    u = math.exp(log_u)
    if law.family is Family.LOGNORMAL:
        # ndtri(0) = -inf gives t = inf for underflowing u, which is the
        # correct limit (the draw is then censored downstream).
        q = float(ndtri(u))
        if math.isinf(q):
            return math.inf if q < 0 else 0.0
        return _safe_exp(law.beta0 - a * q)
    # log-logistic: t = exp(beta0) * (1/u - 1)^a
    return _safe_exp(law.beta0 + a * (math.log1p(-u) - log_u))


def inv_surv_baseline(law: EpisodeLaw, u: float) -> float:
    """Inverse of :func:`surv_baseline`: the ``t`` with ``S0(t) = u``.

    ``u`` must lie in (0, 1]; ``u = 1`` maps to 0.
    """
    if not (0 < u <= 1):
        raise DomainError(f"u must be in (0, 1], got {u!r}")
    if u == 1:
        return 0.0
    return _inv_surv_from_log(law, math.log(u))


def baseline_hazard(law: EpisodeLaw, t: float) -> float:
    """Baseline hazard ``h0(t) = f0(t) / S0(t)`` at ``t > 0``."""
    if not (t > 0):
        raise DomainError(f"t must be > 0, got {t!r}")
    a = law.ancillary
    z = (math.log(t) - law.beta0) / a
    if law.family is Family.WEIBULL:
        return a * math.exp(a * (math.log(t) - law.beta0)) / t
    if law.family is Family.LOGNORMAL:
        phi = math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
        return phi / (a * t * float(ndtr(-z)))
    q = math.exp(z)
    return q / (a * t * (1.0 + q))


def draw_event_time(law: EpisodeLaw, linpred: float, rng: np.random.Generator) -> float:
    """Draw an event time whose hazard is ``h0(t) * exp(linpred)``.

    Uses inverse-transform sampling: with ``U ~ Uniform(0, 1)`` the returned
    time is ``S0^{-1}(U ** exp(-linpred))``, so the survival function of the
    draw is ``S0(t) ** exp(linpred)`` (proportional hazards).
    """
    if not math.isfinite(linpred):
        raise DomainError(f"linpred must be finite, got {linpred!r}")
    u = rng.random()
    while u == 0.0:  # measure-zero guard; log(0) undefined
        u = rng.random()
    log_v = _safe_exp(-linpred) * math.log(u)
    return _inv_surv_from_log(law, log_v)


def _series_sums(log_lam: float, nu: float, tol: float, need_moments: bool):
    """Truncated sums of the COM-Poisson series, scaled against overflow.

    Returns ``(log_z, ey, vy, el, vl, cyl)`` where expectations are of the
    count ``Y`` and of ``L = log(Y!)`` under the normalized distribution.
    Summation stops once terms are decreasing and the current term falls
    below ``tol`` times the running sum; exceeding ``MAX_SERIES_TERMS`` is a
    domain error rather than a silent truncation.
    """
    chunk = 64
    m_scale = -math.inf
    s0 = s1 = s2 = sl = sl2 = s1l = 0.0
    j0 = 0
    while True:
        j = np.arange(j0, j0 + chunk, dtype=float)
        lg = gammaln(j + 1.0)
        logt = j * log_lam - nu * lg
        m_new = max(m_scale, float(logt.max()))
        if m_new > m_scale:
            scale = math.exp(m_scale - m_new) if math.isfinite(m_scale) else 0.0
            s0 *= scale
            s1 *= scale
            s2 *= scale
            sl *= scale
            sl2 *= scale
            s1l *= scale
            m_scale = m_new
        t = np.exp(logt - m_scale)
        s0 += float(t.sum())
        if need_moments:
            s1 += float((t * j).sum())
            s2 += float((t * j * j).sum())
            sl += float((t * lg).sum())
            sl2 += float((t * lg * lg).sum())
            s1l += float((t * j * lg).sum())
        j0 += chunk
        # terms decrease once lam < (j+1)^nu; only then is the tail bounded
        decreasing = log_lam < nu * math.log(j0)
        if decreasing and logt[-1] - (m_scale + math.log(s0)) < math.log(tol):
            break
        if j0 >= MAX_SERIES_TERMS:
            raise DomainError(
                f"COM-Poisson series did not converge within {MAX_SERIES_TERMS} "
                f"terms (log lam={log_lam:.4g}, nu={nu:.4g})"
            )
    log_z = m_scale + math.log(s0)
    if not need_moments:
        return log_z, None, None, None, None, None
    ey = s1 / s0
    vy = s2 / s0 - ey * ey
    el = sl / s0
    vl = sl2 / s0 - el * el
    cyl = s1l / s0 - ey * el
    return log_z, ey, vy, el, vl, cyl


def com_poisson_log_z(p: ComPoissonParams, tol: float = DEFAULT_SERIES_TOL) -> float:
    """Log of the normalizing constant ``Z(lam, nu)``."""
    if not (0 < tol <= 1e-6):
        raise DomainError(f"tol must be in (0, 1e-6], got {tol!r}")
    return _series_sums(math.log(p.lam), p.nu, tol, need_moments=False)[0]


def com_poisson_moments(p: ComPoissonParams, tol: float = DEFAULT_SERIES_TOL):
    """``(log_z, E[Y], V[Y], E[log Y!], V[log Y!], Cov(Y, log Y!))``."""
    if not (0 < tol <= 1e-6):
        raise DomainError(f"tol must be in (0, 1e-6], got {tol!r}")
    return _series_sums(math.log(p.lam), p.nu, tol, need_moments=True)


def com_poisson_pmf(p: ComPoissonParams, y: int) -> float:
    """Probability of observing count ``y``."""
    if y < 0 or y != int(y):
        raise DomainError(f"y must be a non-negative integer, got {y!r}")
    log_z = com_poisson_log_z(p)
    return math.exp(y * math.log(p.lam) - p.nu * float(gammaln(y + 1.0)) - log_z)


def com_poisson_sample(p: ComPoissonParams, rng: np.random.Generator) -> int:
    """Inversion sampling from the CDF built from :func:`com_poisson_pmf`."""
    log_z = com_poisson_log_z(p)
    u = rng.random()
    term = math.exp(-log_z)  # pmf(0)
    cdf = term
    y = 0
    while cdf < u and y < MAX_SERIES_TERMS:
        y += 1
        term *= p.lam / y**p.nu
        cdf += term
        if term < 1e-17 and cdf >= 1.0 - 1e-12:
            break  # tail exhausted to machine precision
    return y


def normal_quantile(prob: float) -> float:
    """Standard-normal quantile ``Phi^{-1}(prob)`` for ``prob`` in (0, 1)."""
    if not (0 < prob < 1):
        raise DomainError(f"prob must be in (0, 1), got {prob!r}")
    return float(ndtri(prob))
