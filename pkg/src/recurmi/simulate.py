"""Recurrent-event cohort generation with hidden pre-cohort history.

Subjects become at risk at ``entry_time_days <= 0`` (0 for subjects whose
risk starts with the cohort) and experience episodes sequentially: the gap
to the next event is drawn from a per-episode baseline law (episodes 1, 2,
and 3+ each have their own law) under proportional hazards with linear
predictor ``x . beta + log(frailty)``.  Events falling before cohort start
``t = 0`` are counted but hidden from the observed record, producing
left-censored episode counts; events in ``(0, follow_up_days]`` are
observed; follow-up ends administratively at ``follow_up_days``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .distributions import EpisodeLaw, Family, baseline_hazard, draw_event_time, inv_surv_baseline
from .errors import ConfigError, DomainError
from .rng import DOMAIN_COHORT, DOMAIN_SUBJECT, stream

__all__ = [
    "MODEL_SHFMI_CP",
    "MODEL_SHFMI_GT",
    "MODEL_CHFM_STRATA",
    "ALL_MODELS",
    "DAYS_PER_YEAR",
    "PopulationSpec",
    "POPULATIONS",
    "ScenarioConfig",
    "Subject",
    "Cohort",
    "ObservedCounts",
    "generate_cohort",
    "episode_hazard_ratio",
    "observed_counts",
    "cohort_rows",
    "cohort_to_csv",
    "COHORT_CSV_COLUMNS",
]

# Analysis-model identifiers.  The two SHFMI variants impute unknown prior
# episode counts and stratify on (prior-risk flag, episode number) with
# counting-process or gap-time risk intervals; CHFM.strata fits the observed
# data once, stratified on the prior-risk flag alone.
MODEL_SHFMI_CP = "SHFMI.CP"
MODEL_SHFMI_GT = "SHFMI.GT"
MODEL_CHFM_STRATA = "CHFM.strata"
ALL_MODELS = (MODEL_SHFMI_CP, MODEL_SHFMI_GT, MODEL_CHFM_STRATA)

DEFAULT_BETA = (0.25, 0.5, 0.75)

# Conversion used wherever durations are specified in years.
DAYS_PER_YEAR = 365


@dataclass(frozen=True)
class PopulationSpec:
    """Generating process for one simulated population.

    Parameters
    ----------
    episode_laws : tuple of 3 EpisodeLaw
        Baseline law for episode 1, episode 2, and episodes 3 and higher.
    beta : tuple of 3 floats
        True log hazard ratios of the binary covariates.
    covariate_prob : float
        Bernoulli success probability for each covariate.
    frailty_variance : float
        Variance of a mean-1 log-normal per-subject hazard multiplier;
        0 disables heterogeneity.
    """

    episode_laws: tuple
    beta: tuple = DEFAULT_BETA
    covariate_prob: float = 0.5
    frailty_variance: float = 0.0

    def __post_init__(self):
        laws = tuple(self.episode_laws)
        if len(laws) != 3 or not all(isinstance(l, EpisodeLaw) for l in laws):
            raise ConfigError("episode_laws must contain exactly 3 EpisodeLaw entries")
        object.__setattr__(self, "episode_laws", laws)
        beta = tuple(float(b) for b in self.beta)
        if len(beta) != 3 or not all(math.isfinite(b) for b in beta):
            raise ConfigError("beta must be 3 finite reals")
        object.__setattr__(self, "beta", beta)
        if not (0.0 <= self.covariate_prob <= 1.0):
            raise ConfigError(f"covariate_prob must be in [0,1], got {self.covariate_prob!r}")
        if not (self.frailty_variance >= 0.0):
            raise ConfigError(f"frailty_variance must be >= 0, got {self.frailty_variance!r}")


def _weib(beta0):
    return EpisodeLaw(Family.WEIBULL, beta0, 1.0)


# Six stock populations.  1-3 have constant within-episode hazards with
# increasing event dependence; 4-6 mix families so the hazard varies in time.
POPULATIONS = {
    1: PopulationSpec((_weib(8.109), _weib(7.927), _weib(7.745))),
    2: PopulationSpec((_weib(8.109), _weib(7.703), _weib(7.298))),
    3: PopulationSpec((_weib(8.109), _weib(7.193), _weib(6.276))),
    4: PopulationSpec(
        (
            EpisodeLaw(Family.LOGNORMAL, 7.195, 1.498),
            EpisodeLaw(Family.LOGLOGISTIC, 6.583, 0.924),
            EpisodeLaw(Family.WEIBULL, 6.678, 0.923),
        )
    ),
    5: PopulationSpec(
        (
            EpisodeLaw(Family.LOGLOGISTIC, 7.974, 0.836),
            EpisodeLaw(Family.WEIBULL, 7.109, 0.758),
            EpisodeLaw(Family.LOGNORMAL, 5.853, 1.989),
        )
    ),
    6: PopulationSpec(
        (
            EpisodeLaw(Family.LOGNORMAL, 8.924, 1.545),
            EpisodeLaw(Family.LOGNORMAL, 6.650, 2.399),
            EpisodeLaw(Family.LOGNORMAL, 6.696, 2.246),
        )
    ),
}


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario cell.

    ``population`` may be a stock population id (1-6) or a PopulationSpec;
    it is normalized to a PopulationSpec at construction.  Times are in
    days.  ``models`` selects which analysis models run on each replicate.
    """

    population: Union[int, PopulationSpec]
    n: int
    follow_up_days: int
    max_prior_days: int
    prop_prior: float
    replicates: int = 1
    m_imputations: int = 5
    k_cap: int = 5
    seed: int = 0
    models: tuple = ALL_MODELS

    def __post_init__(self):
        pop = self.population
        if isinstance(pop, int):
            if pop not in POPULATIONS:
                raise ConfigError(f"unknown population id {pop}; stock ids are 1..6")
            object.__setattr__(self, "population", POPULATIONS[pop])
        elif not isinstance(pop, PopulationSpec):
            raise ConfigError(f"population must be an id or PopulationSpec, got {type(pop).__name__}")
        if not (isinstance(self.n, int) and self.n >= 1):
            raise ConfigError(f"n must be an integer >= 1, got {self.n!r}")
        if not (isinstance(self.follow_up_days, int) and self.follow_up_days >= 1):
            raise ConfigError(f"follow_up_days must be an integer >= 1, got {self.follow_up_days!r}")
        if not (isinstance(self.max_prior_days, int) and self.max_prior_days >= 0):
            raise ConfigError(f"max_prior_days must be an integer >= 0, got {self.max_prior_days!r}")
        if not (0.0 <= self.prop_prior <= 1.0):
            raise ConfigError(f"prop_prior must be in [0,1], got {self.prop_prior!r}")
        if not (isinstance(self.replicates, int) and self.replicates >= 1):
            raise ConfigError(f"replicates must be an integer >= 1, got {self.replicates!r}")
        if not (isinstance(self.m_imputations, int) and self.m_imputations >= 2):
            raise ConfigError(f"m_imputations must be an integer >= 2, got {self.m_imputations!r}")
        if not (isinstance(self.k_cap, int) and self.k_cap >= 2):
            raise ConfigError(f"k_cap must be an integer >= 2, got {self.k_cap!r}")
        if not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        models = tuple(dict.fromkeys(self.models))
        if not models:
            raise ConfigError("models must not be empty")
        unknown = [m for m in models if m not in ALL_MODELS]
        if unknown:
            raise ConfigError(f"unknown model name(s) {unknown}; valid: {list(ALL_MODELS)}")
        object.__setattr__(self, "models", models)


@dataclass(frozen=True)
class Subject:
    """One subject's generated history.

    ``true_prior_count`` and ``frailty`` are generation-side ground truth,
    hidden from every estimator.  ``observed_events`` holds event times in
    ``(0, censor_time_days]`` on the cohort clock.
    """

    id: int
    x: tuple
    entry_time_days: float
    prior_risk_days: float
    true_prior_count: int
    observed_events: tuple
    censor_time_days: float
    frailty: float


@dataclass(frozen=True)
class Cohort:
    subjects: tuple
    config: ScenarioConfig
    replicate_index: int

    @property
    def n(self) -> int:
        return len(self.subjects)


def n_prior_subjects(n: int, prop_prior: float) -> int:
    """Deterministic count of previously-at-risk subjects: round-half-up."""
    return int(math.floor(n * prop_prior + 0.5))


def _simulate_subject(
    spec: PopulationSpec,
    config: ScenarioConfig,
    sid: int,
    prior: bool,
    rng: np.random.Generator,
) -> Subject:
    x = tuple(int(v) for v in (rng.random(3) < spec.covariate_prob))
    if prior and config.max_prior_days > 0:
        u = rng.uniform(0.0, config.max_prior_days)
        while u == 0.0:  # keep prior-risk membership exact
            u = rng.uniform(0.0, config.max_prior_days)
        entry = -float(u)
    else:
        entry = 0.0
    if spec.frailty_variance > 0:
        # log-normal with mean 1: sigma^2 = log(1 + variance)
        s2 = math.log1p(spec.frailty_variance)
        frailty = math.exp(rng.normal(-0.5 * s2, math.sqrt(s2)))
    else:
        frailty = 1.0
    linpred = sum(b * xi for b, xi in zip(spec.beta, x)) + math.log(frailty)

    t = entry
    k = 1
    prior_count = 0
    events = []
    follow_up = float(config.follow_up_days)
    while True:
        law = spec.episode_laws[min(k, 3) - 1]
        t += draw_event_time(law, linpred, rng)
        if not t <= follow_up:  # also terminates on inf
            break
        if t <= 0.0:
            prior_count += 1
        else:
            events.append(t)
        k += 1
    return Subject(
        id=sid,
        x=x,
        entry_time_days=entry,
        prior_risk_days=-entry,
        true_prior_count=prior_count,
        observed_events=tuple(events),
        censor_time_days=follow_up,
        frailty=frailty,
    )


def generate_cohort(config: ScenarioConfig, replicate: int) -> Cohort:
    """Generate one cohort replicate.

    The prior-risk group has exactly ``round(n * prop_prior)`` members,
    assigned to random subject slots by a cohort-level shuffle.  Every
    subject's history is a deterministic function of
    ``(seed, replicate, subject slot)``.
    """
    if not (isinstance(replicate, int) and replicate >= 0):
        raise ConfigError(f"replicate must be an integer >= 0, got {replicate!r}")
    spec = config.population
    flags = np.zeros(config.n, dtype=bool)
    flags[: n_prior_subjects(config.n, config.prop_prior)] = True
    stream(config.seed, DOMAIN_COHORT, replicate).shuffle(flags)
    subjects = tuple(
        _simulate_subject(
            spec, config, i + 1, bool(flags[i]), stream(config.seed, DOMAIN_SUBJECT, replicate, i)
        )
        for i in range(config.n)
    )
    return Cohort(subjects=subjects, config=config, replicate_index=replicate)


def episode_hazard_ratio(spec: PopulationSpec, k: int) -> float:
    """Hazard of episode ``k`` relative to episode 1.

    Evaluated at the episode-1 median time; for shape-1 Weibull laws the
    hazards are constant so the result is exactly
    ``exp(beta0_1 - beta0_k)``.  For time-varying families the value is
    descriptive of that single time point only.
    """
    if not 1 <= k <= 3:
        raise DomainError(f"k must be in 1..3, got {k!r}")
    if k == 1:
        return 1.0
    t_med = inv_surv_baseline(spec.episode_laws[0], 0.5)
    return baseline_hazard(spec.episode_laws[k - 1], t_med) / baseline_hazard(
        spec.episode_laws[0], t_med
    )


@dataclass(frozen=True)
class ObservedCounts:
    """Columnar view of per-subject observed-event counts and predictors."""

    subject_id: np.ndarray
    count: np.ndarray
    exposure_days: np.ndarray
    prior_risk_days: np.ndarray
    x: np.ndarray

    def __len__(self) -> int:
        return len(self.subject_id)


def observed_counts(cohort: Cohort) -> ObservedCounts:
    """Extract (count, exposure, prior time, covariates) per subject."""
    subs = cohort.subjects
    return ObservedCounts(
        subject_id=np.array([s.id for s in subs], dtype=np.int64),
        count=np.array([len(s.observed_events) for s in subs], dtype=np.int64),
        exposure_days=np.array([s.censor_time_days for s in subs], dtype=float),
        prior_risk_days=np.array([s.prior_risk_days for s in subs], dtype=float),
        x=np.array([s.x for s in subs], dtype=float),
    )


COHORT_CSV_COLUMNS = [
    "subject_id",
    "episode_obs",
    "start",
    "stop",
    "status",
    "x1",
    "x2",
    "x3",
    "prior_risk_days",
    "true_prior_count",
]


def cohort_rows(cohort: Cohort):
    """Iterate flat per-interval records: one per event plus a trailing
    censored interval when the last event precedes the end of follow-up."""
    for s in cohort.subjects:
        bounds = [0.0, *s.observed_events]
        for j, (a, b) in enumerate(zip(bounds, bounds[1:]), start=1):
            yield (s.id, j, a, b, 1, *s.x, s.prior_risk_days, s.true_prior_count)
        last = bounds[-1]
        if last < s.censor_time_days:
            yield (
                s.id,
                len(bounds),
                last,
                s.censor_time_days,
                0,
                *s.x,
                s.prior_risk_days,
                s.true_prior_count,
            )


def _fmt(v) -> str:
    # repr keeps floats round-trippable and byte-stable across runs
    return repr(float(v)) if isinstance(v, float) else str(v)


def cohort_to_csv(cohort: Cohort, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COHORT_CSV_COLUMNS)
        for row in cohort_rows(cohort):
            w.writerow([_fmt(v) for v in row])
