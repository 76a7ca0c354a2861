"""Stratified proportional-hazards fitting with a shared gamma frailty.

Estimation follows the penalized-partial-likelihood route.  For fixed
frailty variance ``theta`` the inner problem maximizes

    PPL(beta, omega) = pl(beta, omega) + (1/theta) * sum_i (omega_i - e^{omega_i})

over the coefficients and per-subject log frailties, where ``pl`` is the
stratified Breslow partial log-likelihood with linear predictor
``x . beta + omega_{subject}``.  Newton steps use the exact penalized
Hessian throughout.  For small subject counts the omega block is formed
densely; for large ones the same block is applied matrix-free inside a
Jacobi-preconditioned conjugate-gradient solve, so memory and per-step
cost stay linear in the number of subjects.

``theta`` itself is chosen by golden-section search on ``[0, theta_max]``
of the profile marginal log-likelihood: with ``a = 1/theta``, subject
event count ``d_i`` and cumulative frailty-free intensity ``L_i`` under
the Breslow plug-in hazard,

    Lm(theta) = sum_q d_q (log d_q - log S_q) + sum_{event rows} x . beta
              + sum_i [lgamma(a+d_i) - lgamma(a) + a log a - (a+d_i) log(a+L_i)]

whose ``theta -> 0`` limit is the plain Cox partial likelihood plus
``sum_q (d_q log d_q - d_q)``; that limit is used at the boundary so the
search compares like with like.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammaln

from .errors import (
    ConvergenceError,
    DataError,
    DivergenceError,
    SingularError,
)

__all__ = [
    "CoxOptions",
    "CoxFit",
    "StratumDroppedWarning",
    "breslow_partial_loglik",
    "fit_cox_frailty",
]


class StratumDroppedWarning(UserWarning):
    """A stratum without events was excluded from the fit."""


@dataclass(frozen=True)
class CoxOptions:
    """Fitting controls.

    ``theta=None`` estimates the frailty variance; a float fixes it
    (0 collapses to the unpenalized stratified Cox model).
    """

    theta: Optional[float] = None
    theta_max: float = 5.0
    theta_tol: float = 1e-4
    inner_tol: float = 1e-7
    max_inner: int = 50
    max_halvings: int = 10
    beta_bound: float = 15.0
    # below this many subjects the omega Hessian block is materialized as
    # a dense matrix; above it the same block is applied matrix-free and
    # solved by preconditioned conjugate gradients
    exact_omega_cutoff: int = 200

    def __post_init__(self):
        if self.theta is not None and not (0 <= self.theta):
            raise ValueError(f"theta must be >= 0, got {self.theta!r}")
        if not (self.theta_max > 0 and self.theta_tol > 0):
            raise ValueError("theta_max and theta_tol must be positive")


@dataclass(frozen=True)
class CoxFit:
    beta: np.ndarray
    se: np.ndarray
    theta: float
    loglik: float
    iterations: int
    converged: bool
    n_events: int
    strata_used: tuple
    log_frailty: dict


@dataclass
class _Prepared:
    """Analysis rows flattened across strata.

    Event-time slots of all strata are concatenated on one axis, with a
    trailing spill slot per stratum.  Difference-array scatters then
    cancel exactly at each block boundary, so a single global cumsum
    yields every stratum's risk-set sums at once; cross-block carry in
    the running-sum arrays drops out of the within-block differences.
    """

    X: np.ndarray          # (n_rows, p)
    subj: np.ndarray       # (n_rows,) subject index
    event_row: np.ndarray  # (n_rows,) bool
    q_lo: np.ndarray       # (n_rows,) first covered global slot
    q_hi: np.ndarray       # (n_rows,) last covered global slot (inclusive)
    d: np.ndarray          # (n_slots,) tied-event multiplicities, 0 at spill slots
    ev_slots: np.ndarray   # indices of slots with d > 0
    n_slots: int
    strata_meta: list      # (label, n_events, row_start, row_stop)
    subject_ids: np.ndarray
    d_subject: np.ndarray
    p: int
    n_events: int
    sum_d_log_d: float


def _prepare(rows: Sequence, n_subjects: Optional[int] = None) -> _Prepared:
    if not rows:
        raise DataError("no analysis rows")
    p = len(rows[0].x)
    if any(len(r.x) != p for r in rows):
        raise DataError("covariate vectors have inconsistent lengths")

    ids = sorted({r.subject_id for r in rows})
    if n_subjects is not None and n_subjects < len(ids):
        raise DataError(
            f"n_subjects={n_subjects} but rows reference {len(ids)} distinct subjects"
        )
    index = {sid: i for i, sid in enumerate(ids)}

    groups: dict = {}
    for r in rows:
        groups.setdefault(str(r.stratum), []).append(r)

    parts: dict = {k: [] for k in ("X", "subj", "event_row", "q_lo", "q_hi", "d")}
    strata_meta = []
    d_subject = np.zeros(len(ids))
    n_events = 0
    sum_d_log_d = 0.0
    offset = 0
    row_off = 0
    for label in sorted(groups):
        rs = groups[label]
        stops = np.array([r.stop for r in rs])
        starts = np.array([r.start for r in rs])
        status = np.array([r.status for r in rs], dtype=bool)
        if not status.any():
            warnings.warn(
                f"stratum {label} has no events and was dropped",
                StratumDroppedWarning,
                stacklevel=3,
            )
            continue
        times, d = np.unique(stops[status], return_counts=True)
        q_lo = np.searchsorted(times, starts, side="right")
        q_hi = np.searchsorted(times, stops, side="right") - 1
        covered = np.zeros(len(times) + 1)
        np.add.at(covered, q_lo, 1.0)
        np.add.at(covered, q_hi + 1, -1.0)
        if (np.cumsum(covered)[:-1] <= 0).any():
            t_bad = times[np.cumsum(covered)[:-1] <= 0][0]
            raise DataError(f"empty risk set at event time {t_bad} in stratum {label}")
        keep = np.flatnonzero(q_hi >= q_lo)  # rows covering no event time are inert
        parts["X"].append(np.array([rs[i].x for i in keep], dtype=float))
        parts["subj"].append(np.array([index[rs[i].subject_id] for i in keep], dtype=int))
        parts["event_row"].append(status[keep])
        parts["q_lo"].append(q_lo[keep] + offset)
        parts["q_hi"].append(q_hi[keep] + offset)
        parts["d"].append(np.concatenate([d.astype(float), [0.0]]))  # spill slot
        offset += len(times) + 1
        strata_meta.append((label, int(status.sum()), row_off, row_off + len(keep)))
        row_off += len(keep)
        for i in np.flatnonzero(status):
            d_subject[index[rs[i].subject_id]] += 1
        n_events += int(status.sum())
        sum_d_log_d += float(np.sum(d * np.log(d)))
    if n_events == 0:
        raise DataError("all rows are censored; nothing to fit")
    d_flat = np.concatenate(parts["d"])
    return _Prepared(
        X=np.vstack(parts["X"]),
        subj=np.concatenate(parts["subj"]),
        event_row=np.concatenate(parts["event_row"]),
        q_lo=np.concatenate(parts["q_lo"]),
        q_hi=np.concatenate(parts["q_hi"]),
        d=d_flat,
        ev_slots=np.flatnonzero(d_flat > 0),
        n_slots=offset,
        strata_meta=strata_meta,
        subject_ids=np.array(ids),
        d_subject=d_subject,
        p=p,
        n_events=n_events,
        sum_d_log_d=sum_d_log_d,
    )


def _check_identifiable(prep: _Prepared) -> None:
    varies = np.zeros(prep.p, dtype=bool)
    for _, _, r0, r1 in prep.strata_meta:
        if r1 > r0:
            varies |= np.ptp(prep.X[r0:r1], axis=0) > 0
    dead = np.flatnonzero(~varies)
    if dead.size:
        names = ", ".join(f"x{j + 1}" for j in dead)
        raise SingularError(f"covariate(s) {names} constant within every stratum")


def _riskset_cumsum(weights, q_lo, q_hi, n_slots):
    """Sum ``weights`` over the rows at risk in each slot, by difference
    arrays: O(rows + slots) instead of O(rows * slots)."""
    diff = np.bincount(q_lo, weights=weights, minlength=n_slots + 1)
    diff -= np.bincount(q_hi + 1, weights=weights, minlength=n_slots + 1)
    return np.cumsum(diff)[:-1]


@dataclass
class _PassState:
    """Everything one sweep over the rows yields at a given (beta, omega)."""

    value: float
    gbeta: np.ndarray
    hbeta: np.ndarray
    wdg: np.ndarray     # per subject: sum of w * dG1 (cumulative intensity)
    w2dg2: np.ndarray   # per subject: sum of w^2 * dG2 (diagonal curvature)
    cross: np.ndarray   # (n, p) beta/omega cross block of the information
    m2: Optional[np.ndarray]  # dense omega quadratic term, small-n path only
    w: np.ndarray       # per-row risk weight, shifted scale
    S: np.ndarray       # per-slot risk-set total, same scale


def _pl_pass(
    prep: _Prepared,
    beta: np.ndarray,
    omega: np.ndarray,
    want_frailty: bool,
    exact_omega: bool = False,
) -> _PassState:
    """One vectorized sweep over all rows.

    Computes the partial log-likelihood value, its beta gradient and
    Hessian, the per-subject weighted cumulative-hazard sums, the
    beta/omega cross block, and (when ``exact_omega``) the dense
    quadratic term of the omega Hessian.
    """
    p = prep.p
    n = len(prep.subject_ids)
    L = prep.n_slots
    ev = prep.ev_slots
    d_ev = prep.d[ev]

    eta = prep.X @ beta + omega[prep.subj]
    shift = float(eta.max())  # one global shift; it cancels in every w/S ratio
    w = np.exp(eta - shift)
    S = _riskset_cumsum(w, prep.q_lo, prep.q_hi, L)
    S_ev = S[ev]

    value = float(eta[prep.event_row].sum()) - float(d_ev @ (np.log(S_ev) + shift))

    r1 = np.zeros(L)
    r1[ev] = d_ev / S_ev
    g1 = np.concatenate([[0.0], np.cumsum(r1)])
    wdg1 = w * (g1[prep.q_hi + 1] - g1[prep.q_lo])
    wdg = np.bincount(prep.subj, weights=wdg1, minlength=n)

    Sx = np.empty((L, p))
    for j in range(p):
        Sx[:, j] = _riskset_cumsum(w * prep.X[:, j], prep.q_lo, prep.q_hi, L)
    xbar_ev = Sx[ev] / S_ev[:, None]
    gbeta = prep.X[prep.event_row].sum(axis=0) - d_ev @ xbar_ev
    hbeta = (d_ev[:, None] * xbar_ev).T @ xbar_ev - (wdg1[:, None] * prep.X).T @ prep.X

    w2dg2 = cross = m2 = None
    if want_frailty:
        r2 = np.zeros(L)
        r2[ev] = d_ev / S_ev**2
        g2 = np.concatenate([[0.0], np.cumsum(r2)])
        w2dg2 = np.bincount(
            prep.subj, weights=w * w * (g2[prep.q_hi + 1] - g2[prep.q_lo]), minlength=n
        )
        zx = np.zeros((L, p))
        zx[ev] = r2[ev, None] * Sx[ev]
        gx = np.concatenate([np.zeros((1, p)), np.cumsum(zx, axis=0)])
        contrib = wdg1[:, None] * prep.X - w[:, None] * (
            gx[prep.q_hi + 1] - gx[prep.q_lo]
        )
        cross = np.empty((n, p))
        for j in range(p):
            cross[:, j] = np.bincount(prep.subj, weights=contrib[:, j], minlength=n)
        if exact_omega:
            # dense per-subject at-risk weights, same difference-array trick
            wmat = np.zeros((n, L + 1))
            np.add.at(wmat, (prep.subj, prep.q_lo), w)
            np.add.at(wmat, (prep.subj, prep.q_hi + 1), -w)
            wmat = np.cumsum(wmat, axis=1)[:, :L]
            m2 = (wmat * r2) @ wmat.T
    return _PassState(value, gbeta, hbeta, wdg, w2dg2, cross, m2, w, S)


def breslow_partial_loglik(beta, log_frailty: Optional[Mapping], rows: Sequence):
    """Stratified Breslow partial log-likelihood and its beta derivatives.

    ``log_frailty`` maps subject id to a fixed log hazard multiplier
    (missing ids count as 0); no penalty is added.  Returns
    ``(value, gradient, hessian)`` with derivatives taken in beta only.
    """
    prep = _prepare(rows)
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (prep.p,):
        raise DataError(f"beta has length {beta.size}, rows have {prep.p} covariates")
    lf = log_frailty or {}
    omega = np.array([float(lf.get(sid, 0.0)) for sid in prep.subject_ids])
    state = _pl_pass(prep, beta, omega, want_frailty=False)
    return state.value, state.gbeta, state.hbeta


def _marginal_loglik(prep, theta, value_pl, wdg, omega):
    """Profile marginal log-likelihood at the inner solution.

    ``value_pl`` carries ``sum_events eta - sum_q d log S`` with
    ``eta = x.beta + omega``; subtracting ``sum_i d_i omega_i`` swaps the
    event-row total onto the frailty-free ``x.beta`` scale required by Lm.
    """
    d = prep.d_subject
    lm = prep.sum_d_log_d + value_pl - float(d @ omega)
    if theta == 0:
        return lm - float(d.sum())
    a = 1.0 / theta
    lam = wdg / np.exp(omega)  # frailty-free cumulative intensity per subject
    lm += float(
        np.sum(gammaln(a + d) - gammaln(a) + a * math.log(a) - (a + d) * np.log(a + lam))
    )
    return lm


_CG_RTOL = 1e-8


def _omega_matvec(prep, state: _PassState, a, omega):
    """Product with the exact penalized omega Hessian block, matrix-free.

    The block is diag(wdg + a e^omega) - M2 with
    M2[i,j] = sum_q d_q W_iq W_jq / S_q^2, where W_iq is subject i's
    at-risk weight at event time q.  M2 v reuses the risk-set cumsum
    trick, so one product costs a single sweep over the rows; w and S
    come from the state already evaluated at the current point.
    """
    w, S = state.w, state.S
    ev = prep.ev_slots
    r2 = np.zeros(prep.n_slots)
    r2[ev] = prep.d[ev] / S[ev] ** 2
    base = state.wdg + a * np.exp(omega)
    n = len(omega)

    def mv(v):
        s = _riskset_cumsum(w * v[prep.subj], prep.q_lo, prep.q_hi, prep.n_slots)
        g = np.concatenate([[0.0], np.cumsum(r2 * s)])
        m = w * (g[prep.q_hi + 1] - g[prep.q_lo])
        return base * v - np.bincount(prep.subj, weights=m, minlength=n)

    return mv


def _pcg(matvec, b, inv_diag, maxiter):
    """Conjugate gradients with a Jacobi preconditioner."""
    bnorm = float(np.linalg.norm(b))
    x = np.zeros_like(b)
    if bnorm == 0.0:
        return x
    r = b.copy()
    z = r * inv_diag
    d = z.copy()
    rz = float(r @ z)
    for _ in range(maxiter):
        ad = matvec(d)
        dad = float(d @ ad)
        if dad <= 0.0:
            raise SingularError("penalized information matrix is not positive definite")
        alpha = rz / dad
        x += alpha * d
        r -= alpha * ad
        if float(np.linalg.norm(r)) <= _CG_RTOL * bnorm:
            return x
        z = r * inv_diag
        rz_new = float(r @ z)
        d = z + (rz_new / rz) * d
        rz = rz_new
    raise ConvergenceError(
        "conjugate-gradient solve of the frailty block did not converge",
        grad_norm=float(np.linalg.norm(r)),
    )


def _newton_direction(prep, theta, omega, state: _PassState, exact):
    """Solve the (beta, omega) Newton system in information form."""
    a = 1.0 / theta
    gbeta, cross = state.gbeta, state.cross
    ev = np.exp(omega)
    gomega = prep.d_subject - state.wdg + a * (1.0 - ev)
    ja = -state.hbeta
    if exact:
        jd_full = np.diag(state.wdg + a * ev) - state.m2
        j_full = np.block([[ja, cross.T], [cross, jd_full]])
        try:
            delta = np.linalg.solve(j_full, np.concatenate([gbeta, gomega]))
        except np.linalg.LinAlgError:
            raise SingularError("penalized information matrix is singular") from None
        dbeta, domega = delta[: prep.p], delta[prep.p :]
    else:
        # eliminate beta, then CG on the omega Schur complement; the
        # Jacobi preconditioner is the near-exact diagonal of that block
        try:
            ja_f = cho_factor(ja)
        except np.linalg.LinAlgError:
            raise SingularError("penalized information matrix is singular") from None
        mv_omega = _omega_matvec(prep, state, a, omega)

        def mv_schur(v):
            return mv_omega(v) - cross @ cho_solve(ja_f, cross.T @ v)

        inv_diag = 1.0 / np.maximum(state.wdg - state.w2dg2 + a * ev, 1e-12)
        rhs = gomega - cross @ cho_solve(ja_f, gbeta)
        domega = _pcg(mv_schur, rhs, inv_diag, maxiter=max(100, len(omega)))
        dbeta = cho_solve(ja_f, gbeta - cross.T @ domega)
    return dbeta, domega, gbeta, gomega


def _inner_fit(prep, theta, beta, omega, opts):
    """Newton ascent of the PPL at fixed theta; returns the solution state."""
    a = 0.0 if theta == 0 else 1.0 / theta
    use_frailty = theta > 0
    exact = use_frailty and len(omega) <= opts.exact_omega_cutoff
    if not use_frailty:
        omega = np.zeros_like(omega)

    def penalty(om):
        return a * float(np.sum(om - np.exp(om))) if use_frailty else 0.0

    state = _pl_pass(prep, beta, omega, use_frailty, exact)
    ppl = state.value + penalty(omega)
    iterations = 0
    for iterations in range(1, opts.max_inner + 1):
        if use_frailty:
            dbeta, domega, gbeta, gomega = _newton_direction(
                prep, theta, omega, state, exact
            )
        else:
            gbeta = state.gbeta
            try:
                dbeta = np.linalg.solve(-state.hbeta, gbeta)
            except np.linalg.LinAlgError:
                raise SingularError("information matrix is singular") from None
            domega = np.zeros_like(omega)
            gomega = np.zeros_like(omega)

        step = float(np.max(np.abs(dbeta)))
        if use_frailty:
            step = max(step, float(np.max(np.abs(domega))))
        # second stop: the predicted quadratic gain has fallen below the
        # rounding noise of the PPL itself, so further value comparisons
        # would be meaningless at this problem scale
        gain = float(gbeta @ dbeta + gomega @ domega)
        if step < opts.inner_tol or gain <= 2e-11 * (1.0 + abs(ppl)):
            break

        scale = 1.0
        for _ in range(opts.max_halvings + 1):
            beta_new = beta + scale * dbeta
            omega_new = omega + scale * domega if use_frailty else omega
            state_new = _pl_pass(prep, beta_new, omega_new, use_frailty, exact)
            ppl_new = state_new.value + penalty(omega_new)
            if ppl_new >= ppl - 1e-12:
                break
            scale *= 0.5
        else:
            grad_norm = float(np.max(np.abs(np.concatenate([gbeta, gomega]))))
            raise ConvergenceError(
                "step halving failed to improve the penalized likelihood",
                last_params=np.concatenate([beta, [theta]]),
                grad_norm=grad_norm,
            )
        beta, omega, state, ppl = beta_new, omega_new, state_new, ppl_new
        if np.max(np.abs(beta)) > opts.beta_bound:
            j = int(np.argmax(np.abs(beta)))
            raise DivergenceError(
                f"coefficient x{j + 1} diverged past {opts.beta_bound} "
                "(monotone likelihood)"
            )
    else:
        grad_norm = float(np.max(np.abs(state.gbeta)))
        raise ConvergenceError(
            f"no convergence in {opts.max_inner} inner iterations",
            last_params=np.concatenate([beta, [theta]]),
            grad_norm=grad_norm,
        )

    lm = _marginal_loglik(prep, theta, state.value, state.wdg, omega)
    return beta, omega, state, lm, iterations


def _beta_se(prep, theta, omega, state: _PassState):
    """Coefficient block of the inverse penalized information at the fit."""
    ja = -state.hbeta
    cross = state.cross
    p = prep.p
    try:
        if theta > 0:
            a = 1.0 / theta
            ev = np.exp(omega)
            if state.m2 is not None:
                jd_full = np.diag(state.wdg + a * ev) - state.m2
                j_full = np.block([[ja, cross.T], [cross, jd_full]])
                cov_beta = np.linalg.inv(j_full)[:p, :p]
            else:
                # beta Schur complement with matrix-free omega-block solves
                mv = _omega_matvec(prep, state, a, omega)
                inv_diag = 1.0 / np.maximum(state.wdg - state.w2dg2 + a * ev, 1e-12)
                sol = np.column_stack(
                    [_pcg(mv, cross[:, j], inv_diag, maxiter=max(100, len(omega)))
                     for j in range(p)]
                )
                cov_beta = np.linalg.inv(ja - cross.T @ sol)
        else:
            cov_beta = np.linalg.inv(ja)
    except np.linalg.LinAlgError:
        raise SingularError("information matrix is singular at the optimum") from None
    diag = np.diag(cov_beta).copy()
    if (diag <= 0).any():
        raise SingularError("non-positive variance estimate at the optimum")
    return np.sqrt(diag)


def fit_cox_frailty(rows: Sequence, n_subjects: Optional[int] = None,
                    options: Optional[CoxOptions] = None) -> CoxFit:
    """Fit the stratified gamma-frailty proportional-hazards model.

    ``rows`` is any sequence of risk rows (subject_id, start, stop,
    status, stratum, x).  When ``options.theta`` is None the frailty
    variance is estimated by golden-section search of the profile
    marginal log-likelihood over ``[0, theta_max]``; the reported
    ``loglik`` is that profile value at the chosen ``theta``.
    """
    opts = options or CoxOptions()
    prep = _prepare(rows, n_subjects)
    _check_identifiable(prep)
    n = len(prep.subject_ids)
    p = prep.p

    cache: dict = {}
    warm = {"beta": np.zeros(p), "omega": np.zeros(n)}
    total_iter = 0

    def profile(theta: float):
        nonlocal total_iter
        key = round(theta, 12)
        if key not in cache:
            beta, omega, state, lm, its = _inner_fit(
                prep, theta, warm["beta"].copy(), warm["omega"].copy(), opts
            )
            total_iter += its
            warm["beta"], warm["omega"] = beta, omega
            cache[key] = (lm, beta, omega, state)
        return cache[key]

    if opts.theta is not None:
        theta_hat = float(opts.theta)
        lm, beta, omega, state = profile(theta_hat)
    else:
        # boundary first: also the warm start for everything else
        profile(0.0)
        invphi = (math.sqrt(5.0) - 1.0) / 2.0
        lo, hi = 0.0, opts.theta_max
        x1 = hi - invphi * (hi - lo)
        x2 = lo + invphi * (hi - lo)
        f1, f2 = profile(x1)[0], profile(x2)[0]
        while hi - lo > opts.theta_tol:
            if f1 < f2:
                lo, x1, f1 = x1, x2, f2
                x2 = lo + invphi * (hi - lo)
                f2 = profile(x2)[0]
            else:
                hi, x2, f2 = x2, x1, f1
                x1 = hi - invphi * (hi - lo)
                f1 = profile(x1)[0]
        theta_hat = max(cache, key=lambda k: cache[k][0])
        lm, beta, omega, state = cache[theta_hat]
        theta_hat = float(theta_hat)

    se = _beta_se(prep, theta_hat, omega, state)
    return CoxFit(
        beta=beta.copy(),
        se=se,
        theta=theta_hat,
        loglik=float(lm),
        iterations=total_iter,
        converged=True,
        n_events=prep.n_events,
        strata_used=tuple((label, n_ev) for label, n_ev, _, _ in prep.strata_meta),
        log_frailty={
            sid: float(om) for sid, om in zip(prep.subject_ids.tolist(), omega)
        },
    )
