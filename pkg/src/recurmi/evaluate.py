"""Monte Carlo evaluation harness: replicates, pooling, and summaries.

One replicate generates a cohort, imputes the unknown prior episode counts,
fits the requested models, and pools per-imputation coefficients.  A
scenario runs many replicates (optionally across processes; every replicate
has its own derived random stream, so order and parallelism do not affect
results) and reduces them to relative bias, coverage, and confidence
interval length per model and coefficient.

Model identifiers and fitting recipes:

* ``SHFMI.CP``: per imputation, strata on (prior-risk flag, episode number)
  with counting-process intervals; gamma-frailty fits pooled across
  imputations.
* ``SHFMI.GT``: the same with gap-time intervals.
* ``CHFM.strata``: one unpooled fit on the observed data, stratified on the
  prior-risk flag alone.
"""

from __future__ import annotations

import csv
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .coxfrailty import StratumDroppedWarning, fit_cox_frailty
from .errors import DataError, RecurMIError, SchemaError
from .impute import multiple_impute
from .pooling import PooledFit, pool_rubin, pooled_from_single
from .riskset import (
    StrataMode,
    layout_counting_process,
    layout_gap_time,
    strata_for_cohort,
)
from .simulate import (
    MODEL_CHFM_STRATA,
    MODEL_SHFMI_CP,
    MODEL_SHFMI_GT,
    POPULATIONS,
    ScenarioConfig,
    generate_cohort,
)

__all__ = [
    "ReplicateResult",
    "ModelSummary",
    "ScenarioSummary",
    "CriterionFlags",
    "run_replicate",
    "run_scenario",
    "summarize",
    "check_criteria",
    "population_id",
    "SUMMARY_CSV_COLUMNS",
    "FLAGS_CSV_COLUMNS",
    "summaries_to_csv",
    "flags_to_csv",
    "summary_csv_to_flags",
]

# Bias magnitude at most 10%, coverage inside [92.5, 97.5]; bounds inclusive.
BIAS_LIMIT_PCT = 10.0
COVERAGE_BOUNDS_PCT = (92.5, 97.5)
# A scenario cell with more than this fraction of failed replicates is
# flagged unreliable.
MAX_FAILURE_FRACTION = 0.05


@dataclass(frozen=True)
class ReplicateResult:
    """Per-model pooled fits for one replicate, with per-model failures."""

    replicate: int
    pooled: Mapping[str, PooledFit]
    failures: Mapping[str, str]


@dataclass(frozen=True)
class ModelSummary:
    """Bias/coverage/CI-length triple per coefficient for one model."""

    model: str
    n_replicates: int
    n_failures: int
    relative_bias: np.ndarray
    coverage: np.ndarray
    avg_ci_length: np.ndarray
    unreliable: bool

    def __post_init__(self):
        for name in ("relative_bias", "coverage", "avg_ci_length"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        cov = self.coverage[np.isfinite(self.coverage)]
        if cov.size and (cov.min() < 0.0 or cov.max() > 100.0):
            raise ValueError("coverage must lie in [0, 100]")


@dataclass(frozen=True)
class ScenarioSummary:
    """All model summaries for one scenario cell."""

    config: ScenarioConfig
    truth: np.ndarray
    models: tuple
    requested: int

    def __post_init__(self):
        object.__setattr__(self, "truth", np.asarray(self.truth, dtype=float))
        for ms in self.models:
            if ms.n_replicates + ms.n_failures != self.requested:
                raise ValueError(
                    f"{ms.model}: {ms.n_replicates} + {ms.n_failures} replicates "
                    f"!= {self.requested} requested"
                )

    def model(self, name: str) -> ModelSummary:
        for ms in self.models:
            if ms.model == name:
                return ms
        raise KeyError(name)


@dataclass(frozen=True)
class CriterionFlags:
    """Threshold verdicts for one (model, coefficient) cell."""

    model: str
    coefficient: int
    relative_bias: float
    bias_ok: bool
    coverage: float
    coverage_ok: bool


def _fit_quiet(rows, n_subjects):
    # zero-event strata are routine at deep episode numbers; the per-fit
    # warning would drown a batch run
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StratumDroppedWarning)
        return fit_cox_frailty(rows, n_subjects)


def run_replicate(config: ScenarioConfig, replicate: int) -> ReplicateResult:
    """Generate, impute, fit, and pool one replicate.

    Deterministic in ``(config.seed, replicate)``.  A model that fails to
    fit is recorded under ``failures`` and does not abort the others; the
    imputation step is shared by both SHFMI variants, so its failure marks
    both.
    """
    cohort = generate_cohort(config, replicate)
    pooled = {}
    failures = {}
    imputed_models = [m for m in config.models if m != MODEL_CHFM_STRATA]
    if imputed_models:
        try:
            imps = multiple_impute(cohort, config.m_imputations, config.seed)
        except RecurMIError as exc:
            for model in imputed_models:
                failures[model] = f"{type(exc).__name__}: {exc}"
            imps = None
        if imps is not None:
            # identical imputations (no one previously at risk) need one fit
            distinct = imps if any(
                im.imputed_prior != imps[0].imputed_prior for im in imps[1:]
            ) else imps[:1]
            layouts = {
                MODEL_SHFMI_CP: layout_counting_process,
                MODEL_SHFMI_GT: layout_gap_time,
            }
            for model in imputed_models:
                layout = layouts[model]
                try:
                    fits = []
                    for im in distinct:
                        labels = strata_for_cohort(
                            cohort, im.imputed_prior, config.k_cap,
                            StrataMode.INTERACTION,
                        )
                        fits.append(_fit_quiet(layout(cohort, labels), cohort.n))
                    if len(fits) == 1:
                        fits = fits * config.m_imputations
                    pooled[model] = pool_rubin(fits)
                except RecurMIError as exc:
                    failures[model] = f"{type(exc).__name__}: {exc}"
    if MODEL_CHFM_STRATA in config.models:
        try:
            labels = strata_for_cohort(cohort, None, config.k_cap, StrataMode.SUBPOP_ONLY)
            fit = _fit_quiet(layout_counting_process(cohort, labels), cohort.n)
            pooled[MODEL_CHFM_STRATA] = pooled_from_single(fit)
        except RecurMIError as exc:
            failures[MODEL_CHFM_STRATA] = f"{type(exc).__name__}: {exc}"
    return ReplicateResult(replicate, pooled, failures)


def summarize(config: ScenarioConfig, results: Sequence[ReplicateResult]) -> ScenarioSummary:
    """Reduce replicate results to per-model bias/coverage/CI-length.

    Failed replicates are excluded per model and counted; relative bias is
    ``100 (mean estimate - truth) / truth`` and coverage is the exact
    fraction of replicates whose 95% interval contains the truth.
    """
    truth = np.asarray(config.population.beta, dtype=float)
    ordered = sorted(results, key=lambda r: r.replicate)
    requested = len(ordered)
    summaries = []
    for model in config.models:
        fits = [r.pooled[model] for r in ordered if model in r.pooled]
        n_fail = requested - len(fits)
        if not fits:
            nan = np.full(truth.shape, np.nan)
            summaries.append(ModelSummary(model, 0, n_fail, nan, nan.copy(), nan.copy(), True))
            continue
        est = np.vstack([f.qbar for f in fits])
        lo = np.vstack([f.ci_low for f in fits])
        hi = np.vstack([f.ci_high for f in fits])
        with np.errstate(divide="ignore", invalid="ignore"):
            rel_bias = 100.0 * (est.mean(axis=0) - truth) / truth
        coverage = 100.0 * ((lo <= truth) & (truth <= hi)).mean(axis=0)
        ci_len = (hi - lo).mean(axis=0)
        unreliable = n_fail > MAX_FAILURE_FRACTION * requested
        summaries.append(
            ModelSummary(model, len(fits), n_fail, rel_bias, coverage, ci_len, unreliable)
        )
    return ScenarioSummary(config, truth, tuple(summaries), requested)


def check_criteria(summary: ScenarioSummary) -> tuple:
    """Per (model, coefficient) verdicts against the bias/coverage bounds."""
    lo, hi = COVERAGE_BOUNDS_PCT
    flags = []
    for ms in summary.models:
        for j in range(summary.truth.size):
            bias = float(ms.relative_bias[j])
            cov = float(ms.coverage[j])
            flags.append(
                CriterionFlags(
                    model=ms.model,
                    coefficient=j + 1,
                    relative_bias=bias,
                    bias_ok=bool(abs(bias) <= BIAS_LIMIT_PCT),
                    coverage=cov,
                    coverage_ok=bool(lo <= cov <= hi),
                )
            )
    return tuple(flags)


def _replicate_task(args):
    config, replicate = args
    return run_replicate(config, replicate)


def run_scenario(config: ScenarioConfig, workers: int = 1) -> ScenarioSummary:
    """Run ``config.replicates`` replicates, optionally across processes.

    The reduction sorts by replicate index, so the summary is identical for
    any worker count.
    """
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers!r}")
    tasks = [(config, r) for r in range(config.replicates)]
    if workers == 1 or len(tasks) == 1:
        results = [run_replicate(config, r) for _, r in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate_task, tasks))
    return summarize(config, results)


def population_id(config: ScenarioConfig):
    """Stock population number, or 'custom' for hand-built specs."""
    for pid, spec in POPULATIONS.items():
        if spec == config.population:
            return pid
    return "custom"


SUMMARY_CSV_COLUMNS = [
    "population",
    "follow_up_days",
    "max_prior_days",
    "prop_prior",
    "n",
    "model",
    "coefficient",
    "relative_bias_pct",
    "coverage_pct",
    "avg_ci_length",
    "n_replicates",
    "n_failures",
]

FLAGS_CSV_COLUMNS = [
    "population",
    "follow_up_days",
    "max_prior_days",
    "prop_prior",
    "n",
    "model",
    "coefficient",
    "relative_bias_pct",
    "bias_ok",
    "coverage_pct",
    "coverage_ok",
]


def _fmt(v) -> str:
    # repr keeps floats round-trippable and byte-stable across runs
    return repr(float(v)) if isinstance(v, float) else str(v)


def _cell_key(summary: ScenarioSummary):
    cfg = summary.config
    return (
        population_id(cfg),
        cfg.follow_up_days,
        cfg.max_prior_days,
        cfg.prop_prior,
        cfg.n,
    )


def summaries_to_csv(summaries: Sequence[ScenarioSummary], path) -> None:
    """One row per (scenario cell, model, coefficient)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_CSV_COLUMNS)
        for summary in summaries:
            key = _cell_key(summary)
            for ms in summary.models:
                for j in range(summary.truth.size):
                    w.writerow(
                        [_fmt(v) for v in key]
                        + [
                            ms.model,
                            str(j + 1),
                            _fmt(float(ms.relative_bias[j])),
                            _fmt(float(ms.coverage[j])),
                            _fmt(float(ms.avg_ci_length[j])),
                            str(ms.n_replicates),
                            str(ms.n_failures),
                        ]
                    )


def flags_to_csv(summaries: Sequence[ScenarioSummary], path) -> None:
    """Threshold verdict grid, one row per (scenario cell, model, coefficient)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FLAGS_CSV_COLUMNS)
        for summary in summaries:
            key = _cell_key(summary)
            for flag in check_criteria(summary):
                w.writerow(
                    [_fmt(v) for v in key]
                    + [
                        flag.model,
                        str(flag.coefficient),
                        _fmt(flag.relative_bias),
                        str(int(flag.bias_ok)),
                        _fmt(flag.coverage),
                        str(int(flag.coverage_ok)),
                    ]
                )


def summary_csv_to_flags(path):
    """Recompute threshold verdicts from a previously written summary table.

    Returns ``(rows, all_ok)`` where ``rows`` are flag-table rows (without
    the header) in the input order and ``all_ok`` is False when any row
    violates a bound.

    Raises
    ------
    SchemaError
        If the header is missing any required summary column.
    DataError
        If a metric cell cannot be parsed, with its line number.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty summary file") from None
        missing = [c for c in SUMMARY_CSV_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}")
        idx = {c: header.index(c) for c in SUMMARY_CSV_COLUMNS}

        lo, hi = COVERAGE_BOUNDS_PCT
        rows, all_ok = [], True
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise DataError(
                    f"{path}: line {lineno}: expected {len(header)} fields, "
                    f"got {len(record)}"
                )
            try:
                bias = float(record[idx["relative_bias_pct"]])
                cov = float(record[idx["coverage_pct"]])
            except ValueError:
                raise DataError(
                    f"{path}: line {lineno}: non-numeric bias or coverage"
                ) from None
            bias_ok = bool(abs(bias) <= BIAS_LIMIT_PCT)
            cov_ok = bool(lo <= cov <= hi)
            all_ok = all_ok and bias_ok and cov_ok
            rows.append(
                [record[idx[c]] for c in SUMMARY_CSV_COLUMNS[:7]]
                + [_fmt(bias), str(int(bias_ok)), _fmt(cov), str(int(cov_ok))]
            )
    return rows, all_ok
