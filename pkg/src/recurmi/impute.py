"""COM-Poisson count regression and multiple imputation of prior episode counts.

The number of episodes a subject experienced before enrollment is unobserved.
It is completed by multiple imputation in four steps: (1) fit a COM-Poisson
count regression once per cohort; then per imputation (2) draw regression
parameters from the Gaussian approximation of their posterior, (3) predict
per-subject ``(lam, nu)`` scores over the pre-enrollment risk window, and
(4) draw an integer count from the COM-Poisson distribution with those
scores.

Because episode risk escalates with the number of episodes already
experienced, a subject's unknown pre-enrollment count and their observed
in-study events are adjacent segments of one dependent chain: the in-study
record is informative about the hidden count, and ignoring it leaves the
completed histories independent of the truth given covariates, which
systematically distorts downstream hazard estimates.  The regression
therefore models the count in the first half of follow-up given the
covariates and the count in the second half.  Subjects with no
pre-enrollment risk supply clean training pairs for that relationship
(their first-half counts are genuine from-scratch window counts); when a
cohort has no such subjects the fit falls back to all subjects.  Prediction
mirrors the fit: a hidden count is scored from the subject's covariates,
their early in-study count (the adjacent observed segment), and their log
pre-enrollment risk time.

Window length enters as a free-coefficient log covariate when it varies
across subjects.  Under purely administrative censoring every subject has
the same window, the coefficient is collinear with the intercept, and the
model pins it to the exponent under which the implied count mean grows
linearly with the length of the risk window (for a Poisson fit that
exponent is exactly 1, the ordinary log-exposure offset).  The pinned
coefficient keeps its slot in the parameter vector, so prediction over
pre-enrollment windows works identically in both cases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammaln

from .distributions import ComPoissonParams, com_poisson_moments, com_poisson_sample
from .errors import (
    ConvergenceError,
    DataError,
    DegenerateFitError,
    DomainError,
    NumericError,
    SingularError,
)
from .rng import DOMAIN_IMPUTE, stream
from .simulate import Cohort, Subject

__all__ = [
    "MAX_IMPUTED_COUNT",
    "ComPoissonFit",
    "ImputedCohort",
    "fit_com_poisson_glm",
    "fit_imputation_model",
    "draw_params",
    "predict_scores",
    "multiple_impute",
]

# Imputed counts beyond this are clamped; hits are counted on the result.
MAX_IMPUTED_COUNT = 50


@dataclass(frozen=True)
class ComPoissonFit:
    """Fitted COM-Poisson regression with a Gaussian posterior approximation.

    ``gamma`` holds the log-rate coefficients and ``log_nu`` the shared
    dispersion on the log scale.  ``covariance`` is the inverse observed
    information over the stacked vector ``(gamma, log_nu)``; parameters that
    were frozen rather than estimated have zero rows.
    """

    gamma: np.ndarray
    log_nu: float
    covariance: np.ndarray
    loglik: float
    converged: bool
    iterations: int

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=float)
        cov = np.asarray(self.covariance, dtype=float)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "covariance", cov)
        k = gamma.size + 1
        if gamma.ndim != 1 or gamma.size < 1:
            raise ValueError("gamma must be a non-empty vector")
        if cov.shape != (k, k):
            raise ValueError(f"covariance must have shape {(k, k)}, got {cov.shape}")
        if not np.all(np.isfinite(cov)) or np.abs(cov - cov.T).max() > 1e-10:
            raise ValueError("covariance must be finite and symmetric")

    @property
    def params(self) -> np.ndarray:
        """Stacked parameter vector ``(gamma..., log_nu)``."""
        return np.append(self.gamma, self.log_nu)


@dataclass(frozen=True)
class ImputedCohort:
    """One completed data set: the base cohort plus drawn prior counts.

    ``imputed_prior`` maps subject id to the completed count; subjects with
    no pre-enrollment risk time always map to 0.  ``cap_hits`` counts draws
    clamped at :data:`MAX_IMPUTED_COUNT`.
    """

    base: Cohort
    imputed_prior: Mapping[int, int]
    imputation_index: int
    cap_hits: int = 0

    def __post_init__(self):
        for s in self.base.subjects:
            k = self.imputed_prior.get(s.id, 0)
            if k < 0 or k != int(k):
                raise ValueError(
                    f"imputed count for subject {s.id} must be a non-negative "
                    f"integer, got {k!r}"
                )
            if s.prior_risk_days <= 0 and k != 0:
                raise ValueError(
                    f"subject {s.id} was never previously at risk but has "
                    f"an imputed count of {k}"
                )


@dataclass(frozen=True)
class _Grouped:
    """Sufficient statistics per distinct (predictor row, offset) pattern."""

    z: np.ndarray
    offset: np.ndarray
    n: np.ndarray
    sy: np.ndarray
    slf: np.ndarray


def _group(counts: np.ndarray, z: np.ndarray, offset: np.ndarray) -> _Grouped:
    key = np.column_stack([z, offset])
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    g = len(uniq)
    return _Grouped(
        z=uniq[:, :-1],
        offset=uniq[:, -1],
        n=np.bincount(inv, minlength=g).astype(float),
        sy=np.bincount(inv, weights=counts, minlength=g),
        slf=np.bincount(inv, weights=gammaln(counts + 1.0), minlength=g),
    )


def _poisson_start(grp: _Grouped, q: int) -> np.ndarray:
    """Newton ascent of the grouped Poisson log-likelihood from zero."""
    gamma = np.zeros(q)
    for _ in range(50):
        eta = np.clip(grp.z @ gamma + grp.offset, -300.0, 300.0)
        mu = np.exp(eta)
        grad = grp.z.T @ (grp.sy - grp.n * mu)
        if np.abs(grad).max() < 1e-8:
            break
        hess = (grp.z * (grp.n * mu)[:, None]).T @ grp.z
        try:
            delta = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        base = float(grp.sy @ eta - grp.n @ mu)
        step = 1.0
        for _ in range(30):
            trial = gamma + step * delta
            eta_t = np.clip(grp.z @ trial + grp.offset, -300.0, 300.0)
            if float(grp.sy @ eta_t - grp.n @ np.exp(eta_t)) > base:
                gamma = trial
                break
            step *= 0.5
        else:
            break
    return gamma


@dataclass
class _Moments:
    """Per-group COM-Poisson moments at one parameter point."""

    ll: float
    ey: np.ndarray
    vy: np.ndarray
    el: np.ndarray
    vl: np.ndarray
    cyl: np.ndarray


def _moment_pass(grp: _Grouped, gamma: np.ndarray, nu: float) -> _Moments:
    eta = grp.z @ gamma + grp.offset
    if np.any(eta > 250.0):
        raise DomainError("log rate overflow in the count model")
    g = len(grp.n)
    out = np.empty((g, 6))
    for i in range(g):
        out[i] = com_poisson_moments(ComPoissonParams(math.exp(eta[i]), nu))
    ll = float(grp.sy @ eta - nu * grp.slf.sum() - grp.n @ out[:, 0])
    return _Moments(ll, out[:, 1], out[:, 2], out[:, 3], out[:, 4], out[:, 5])


def fit_com_poisson_glm(
    counts,
    predictors,
    start: Optional[Sequence[float]] = None,
    *,
    offset=None,
    fix_nu: Optional[float] = None,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> ComPoissonFit:
    """Maximum-likelihood COM-Poisson regression with a shared dispersion.

    Maximizes ``sum_i [y_i log lam_i - nu log(y_i!) - log Z(lam_i, nu)]``
    over the coefficients of ``log lam_i = predictors_i . gamma + offset_i``
    and, unless ``fix_nu`` is given, over ``log nu``.  Newton ascent with
    step halving on the exact gradient and observed information, both
    assembled from the distribution's moment identities; identical
    predictor rows are collapsed to sufficient statistics first.

    Parameters
    ----------
    counts : sequence of int
        Non-negative observed counts, one per subject.
    predictors : array, shape (n, q)
        Design matrix including any intercept column.
    start : sequence of float, optional
        Starting values ``(gamma...)`` or ``(gamma..., log_nu)``.  Default
        is a Poisson fit for ``gamma`` and ``log_nu = 0``.
    offset : sequence of float, optional
        Known additive term of the linear predictor.
    fix_nu : float, optional
        Hold the dispersion fixed at this value instead of estimating it.
        The covariance row for ``log_nu`` is then zero.
    """
    y = np.asarray(counts)
    z = np.atleast_2d(np.asarray(predictors, dtype=float))
    n, q = z.shape
    if y.shape != (n,):
        raise DataError(f"counts has shape {y.shape}, expected ({n},)")
    yf = y.astype(float)
    if np.any(yf < 0) or np.any(yf != np.floor(yf)):
        raise DataError("counts must be non-negative integers")
    if not np.any(yf > 0):
        raise DegenerateFitError("all counts are zero; the count model is degenerate")
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    if off.shape != (n,):
        raise DataError(f"offset has shape {off.shape}, expected ({n},)")
    if fix_nu is not None and fix_nu < 0:
        raise DomainError(f"fix_nu must be >= 0, got {fix_nu!r}")
    if np.linalg.matrix_rank(z) < q:
        raise SingularError("count-model predictor matrix is rank deficient")

    grp = _group(yf, z, off)
    psi_free = fix_nu is None
    if start is not None:
        start = np.asarray(start, dtype=float)
        if start.shape not in ((q,), (q + 1,)):
            raise DataError(f"start has shape {start.shape}, expected ({q},) or ({q + 1},)")
        gamma = start[:q].copy()
        psi = float(start[q]) if start.size == q + 1 and psi_free else 0.0
    else:
        gamma = _poisson_start(grp, q)
        psi = 0.0
    nu = math.exp(psi) if psi_free else float(fix_nu)

    mom = _moment_pass(grp, gamma, nu)
    iterations = 0
    converged = False
    gnorm = math.inf
    for iterations in range(1, max_iter + 1):
        resid = grp.sy - grp.n * mom.ey
        grad_g = grp.z.T @ resid
        hess_gg = -(grp.z * (grp.n * mom.vy)[:, None]).T @ grp.z
        if psi_free:
            grad_p = nu * float(grp.n @ mom.el - grp.slf.sum())
            hess_gp = nu * (grp.z.T @ (grp.n * mom.cyl))
            hess_pp = grad_p - nu * nu * float(grp.n @ mom.vl)
            grad = np.append(grad_g, grad_p)
            hess = np.block(
                [[hess_gg, hess_gp[:, None]], [hess_gp[None, :], np.array([[hess_pp]])]]
            )
        else:
            grad = grad_g
            hess = hess_gg
        gnorm = float(np.abs(grad).max())
        if gnorm < tol:
            converged = True
            break
        try:
            delta = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            try:
                delta = np.linalg.solve(-hess + 1e-8 * np.eye(len(grad)), grad)
            except np.linalg.LinAlgError:
                raise SingularError(
                    "observed information of the count model is singular"
                ) from None
        big = float(np.abs(delta).max())
        if big > 5.0:  # crude trust region against wild early steps
            delta *= 5.0 / big
        accepted = False
        # the likelihood is not globally concave, so the Newton direction
        # can point badly; fall back to the raw gradient before giving up
        for direction in (delta, grad / max(1.0, gnorm)):
            step = 1.0
            for _ in range(30):
                gamma_t = gamma + step * direction[:q]
                psi_t = psi + step * float(direction[q]) if psi_free else psi
                nu_t = math.exp(psi_t) if psi_free else nu
                try:
                    mom_t = _moment_pass(grp, gamma_t, nu_t)
                except DomainError:
                    mom_t = None
                if mom_t is not None and mom_t.ll > mom.ll - 1e-12 * (1.0 + abs(mom.ll)):
                    gamma, psi, nu, mom = gamma_t, psi_t, nu_t, mom_t
                    accepted = True
                    break
                step *= 0.5
            if accepted:
                break
        if not accepted:
            raise ConvergenceError(
                "step halving failed to improve the count-model likelihood",
                last_params=np.append(gamma, psi if psi_free else math.log(max(nu, 1e-300))),
                grad_norm=gnorm,
            )
    if not converged:
        raise ConvergenceError(
            f"count model did not converge in {max_iter} iterations",
            last_params=np.append(gamma, psi if psi_free else math.log(max(nu, 1e-300))),
            grad_norm=gnorm,
        )

    info = 0.5 * (-hess - hess.T)
    w, v = np.linalg.eigh(info)
    if w.min() < -1e-8 * max(w.max(), 1.0):
        # a zero gradient with indefinite information is a saddle, not a
        # maximum; the Gaussian posterior step needs a PSD information
        raise ConvergenceError(
            "count-model optimum is not a local maximum (indefinite information)",
            last_params=np.append(gamma, psi if psi_free else math.log(max(nu, 1e-300))),
            grad_norm=gnorm,
        )
    # flat directions carry (numerically) no information; give them a
    # huge finite variance instead of an unrepresentable one
    w = np.maximum(w, 1e-12 * max(w.max(), 1e-300))
    block = (v / w) @ v.T  # symmetric PSD inverse of the information
    cov = np.zeros((q + 1, q + 1))
    if psi_free:
        cov[:, :] = block
    else:
        cov[:q, :q] = block
    cov = 0.5 * (cov + cov.T)
    if not np.all(np.isfinite(cov)):
        raise NumericError("count-model covariance is not finite")
    log_nu = psi if psi_free else (math.log(fix_nu) if fix_nu > 0 else -math.inf)
    return ComPoissonFit(gamma, log_nu, cov, mom.ll, True, iterations)


def draw_params(fit: ComPoissonFit, rng: np.random.Generator) -> np.ndarray:
    """One draw of ``(gamma..., log_nu)`` from ``N(estimate, covariance)``.

    The covariance square root comes from an eigendecomposition; tiny
    negative eigenvalues (above -1e-10) are clipped to zero, larger
    violations raise :class:`~recurmi.errors.NumericError`.
    """
    if not fit.converged:
        raise DomainError("cannot draw parameters from a fit that did not converge")
    cov = 0.5 * (fit.covariance + fit.covariance.T)
    w, v = np.linalg.eigh(cov)
    if w.min() < -1e-10 * max(w.max(), 1.0):
        raise NumericError(
            f"count-model covariance is not positive semidefinite "
            f"(min eigenvalue {w.min():.3g})"
        )
    root = v * np.sqrt(np.clip(w, 0.0, None))
    return fit.params + root @ rng.standard_normal(w.size)


def _early_count(subject: Subject) -> int:
    """Events in the first half of the subject's own follow-up window."""
    h = 0.5 * subject.censor_time_days
    return sum(1 for t in subject.observed_events if t <= h)


def predict_scores(params, subject: Subject) -> ComPoissonParams:
    """COM-Poisson scores for one subject's pre-enrollment period.

    ``params`` is a stacked ``(gamma..., log_nu)`` vector whose gamma part
    matches the design ``(1, x..., log1p(adjacent count), log window)``;
    the adjacent-count slot is filled with the subject's early in-study
    count and the window slot with their log pre-enrollment risk time.
    """
    params = np.asarray(params, dtype=float)
    if subject.prior_risk_days <= 0:
        raise DomainError(
            f"subject {subject.id} has no pre-enrollment risk time to impute"
        )
    z = np.concatenate(
        [
            [1.0],
            subject.x,
            [math.log1p(_early_count(subject)), math.log(subject.prior_risk_days)],
        ]
    )
    if params.shape != (z.size + 1,):
        raise DataError(f"expected {z.size + 1} parameters, got {params.shape}")
    # posterior draws on sparse data can be extreme; keep the scores in
    # float range (the imputation cap resolves the large side, and a
    # vanishing rate just means the imputed count is 0)
    log_lam = min(max(float(z @ params[:-1]), -250.0), 250.0)
    log_nu = min(max(float(params[-1]), -250.0), 250.0)
    return ComPoissonParams(math.exp(log_lam), math.exp(log_nu))


def fit_imputation_model(cohort: Cohort) -> ComPoissonFit:
    """Step 1, once per cohort: early-half counts on the adjacent record.

    Each training subject's follow-up is split in half: the outcome is the
    count in the first half and the design is ``(1, x, log1p(second-half
    count))`` plus the log outcome-window length.  Subjects without
    pre-enrollment risk are the training set (their first-half counts are
    uncensored from-scratch counts); when they are absent or their halved
    records are too sparse to support the design, all subjects train the
    model instead.  When every outcome window is identical (pure
    administrative censoring) the log-window coefficient is unidentifiable
    and is pinned to the mean-linear transfer exponent; see
    :func:`_mean_linear_exponent` and :func:`_pin_exposure_coef`.
    """

    def split(subjects):
        half = np.array([0.5 * s.censor_time_days for s in subjects])
        y = np.array(
            [sum(1 for t in s.observed_events if t <= h) for s, h in zip(subjects, half)],
            dtype=np.int64,
        )
        recent = np.array([len(s.observed_events) for s in subjects], dtype=float) - y
        return half, y, recent

    ref = [s for s in cohort.subjects if s.prior_risk_days == 0]
    half, y, recent = split(ref) if ref else (None, np.zeros(0, dtype=np.int64), None)
    if y.sum() < 10:
        ref = list(cohort.subjects)
        half, y, recent = split(ref)
    x = np.array([s.x for s in ref], dtype=float)
    base = np.column_stack([np.ones(len(ref)), x, np.log1p(recent)])
    log_half = np.log(half)
    if np.ptp(log_half) < 1e-12:
        fit = fit_com_poisson_glm(y, base)
        eta_bar = float(np.mean(base @ fit.gamma))
        longest = max((s.prior_risk_days for s in cohort.subjects), default=0.0)
        t_out = float(half[0])
        coef = _mean_linear_exponent(
            eta_bar, math.exp(fit.log_nu), max(longest, 2.0 * t_out) / t_out
        )
        return _pin_exposure_coef(fit, coef, math.log(t_out))
    return fit_com_poisson_glm(y, np.column_stack([base, log_half]))


def _mean_of_lam(log_lam: float, nu: float) -> float:
    return com_poisson_moments(ComPoissonParams(math.exp(log_lam), nu))[1]


def _mean_or_none(log_lam: float, nu: float):
    # for small nu the normalizing series diverges once lam passes 1;
    # an inevaluable point lies far above any finite target
    try:
        return _mean_of_lam(log_lam, nu)
    except DomainError:
        return None


def _mean_linear_exponent(eta_bar: float, nu: float, ratio: float) -> float:
    """Exponent ``c`` such that ``lam * r**c`` scales the mean by ``r``.

    ``lam = exp(eta_bar)`` is a representative fitted score.  The exact
    COM-Poisson mean function is interpolated between the observed window
    and ``ratio`` times it, so the transfer reproduces linear mean growth
    at both ends of the relevant window range.  For ``nu = 1`` the mean is
    ``lam`` itself and the exponent is exactly 1, the Poisson offset.
    """
    target = ratio * _mean_of_lam(eta_bar, nu)
    # bracket the log-score whose mean hits the target; the mean is
    # strictly increasing in lam, and for nu = 0 lam must stay below 1
    lo = eta_bar
    if nu > 0:
        step = max(math.log(ratio), 0.5)
        hi = lo + step
        while True:
            m = _mean_or_none(hi, nu)
            if m is None:
                # stepped past the evaluable range: bisect back to a
                # finite point at or above the target
                bad = hi
                for _ in range(200):
                    mid = 0.5 * (lo + bad)
                    m = _mean_or_none(mid, nu)
                    if m is None:
                        bad = mid
                    elif m < target:
                        lo = mid
                    else:
                        hi = mid
                        break
                else:
                    raise NumericError(
                        "could not bracket the window-transfer exponent"
                    )
                break
            if m >= target:
                break
            lo, hi = hi, hi + step
    else:
        hi = -1e-12
    log_lam_1 = brentq(lambda v: _mean_of_lam(v, nu) - target, lo, hi, xtol=1e-10)
    return (log_lam_1 - eta_bar) / math.log(ratio)


def _pin_exposure_coef(fit: ComPoissonFit, coef: float, log_t0: float) -> ComPoissonFit:
    """Constant-exposure fallback: freeze the exposure coefficient.

    With no window variation the coefficient cannot be estimated, so it
    is pinned at the mean-linear transfer exponent and carries a zero
    covariance row; the intercept is shifted so predictions at the
    outcome-window length are unchanged.
    """
    q = fit.gamma.size
    gamma = np.concatenate([fit.gamma, [coef]])
    gamma[0] -= coef * log_t0
    cov = np.zeros((q + 2, q + 2))
    keep = np.r_[np.arange(q), q + 1]  # everything but the pinned slot
    cov[np.ix_(keep, keep)] = fit.covariance
    return ComPoissonFit(gamma, fit.log_nu, cov, fit.loglik, fit.converged, fit.iterations)


def _capped_sample(p: ComPoissonParams, rng: np.random.Generator, cap: int):
    # location proxy lam**(1/nu); far beyond the cap every draw would hit it
    if math.log(p.lam) > p.nu * math.log(20.0 * cap):
        return cap, 1
    try:
        y = com_poisson_sample(p, rng)
    except DomainError:
        # a diverging normalizing series means the location is unbounded
        return cap, 1
    return (cap, 1) if y > cap else (y, 0)


def multiple_impute(cohort: Cohort, m: int, seed: int) -> list:
    """Steps 1 to 4: ``m`` completed cohorts with indices ``1..m``.

    The count model is fitted once; each imputation then uses its own
    random stream keyed by ``(seed, cohort.replicate_index, index)``, so
    results are deterministic and imputations can run in any order.  When
    no subject was previously at risk the model fit is skipped and all
    imputed counts are zero.
    """
    if m < 1:
        raise DomainError(f"m must be >= 1, got {m!r}")
    prior = [s for s in cohort.subjects if s.prior_risk_days > 0]
    if not prior:
        return [
            ImputedCohort(cohort, {s.id: 0 for s in cohort.subjects}, index, 0)
            for index in range(1, m + 1)
        ]
    fit = fit_imputation_model(cohort)
    out = []
    for index in range(1, m + 1):
        rng = stream(seed, DOMAIN_IMPUTE, cohort.replicate_index, index)
        params = draw_params(fit, rng)
        imputed = {s.id: 0 for s in cohort.subjects}
        cap_hits = 0
        for s in prior:
            count, hit = _capped_sample(predict_scores(params, s), rng, MAX_IMPUTED_COUNT)
            imputed[s.id] = count
            cap_hits += hit
        out.append(ImputedCohort(cohort, imputed, index, cap_hits))
    return out
