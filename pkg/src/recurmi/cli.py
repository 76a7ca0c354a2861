"""Command line interface.

Verbs
-----
``simulate CONFIG --out DIR``
    Write every cohort in the scenario grid as a CSV file.
``run CONFIG --out DIR [--threads N]``
    Full evaluation: ``summary.csv``, ``flags.csv``, one SVG figure per
    scenario group and metric, and a ``manifest.json`` written last.
``fit RISKSET [--out FILE] [--theta X] [--n-subjects N]``
    Fit one stratified gamma-frailty model to a risk-interval table.
``check SUMMARY [--out FILE]``
    Recompute threshold verdicts from an existing summary table.

Exit codes: 0 success; 1 ``check`` found violations; 2 configuration
problem (also argparse usage errors); 3 input data problem; 4 fit or
numeric failure, or ``run`` with failed replicate fits.  Errors print a
single ``recurmi: message`` line to stderr.

Every output file is written atomically (temporary file, then rename), and
the manifest is written only after everything it lists, so a manifest's
presence means the run completed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

from .config import parse_config
from .coxfrailty import CoxOptions, fit_cox_frailty
from .errors import (
    ConfigError,
    DataError,
    DomainError,
    FitError,
    NumericError,
    PoolingError,
)
from .evaluate import (
    FLAGS_CSV_COLUMNS,
    flags_to_csv,
    population_id,
    run_scenario,
    summaries_to_csv,
    summary_csv_to_flags,
)
from .figures import render_figures
from .riskset import rows_from_csv
from .simulate import cohort_to_csv, generate_cohort

__all__ = ["main", "build_parser", "RunManifest", "THREADS_ENV_VAR"]

THREADS_ENV_VAR = "RECURMI_THREADS"

FIT_CSV_COLUMNS = [
    "coefficient", "estimate", "se", "theta", "loglik", "converged", "n_events",
]


@dataclass(frozen=True)
class RunManifest:
    """Provenance record written alongside generated outputs."""

    command: str
    argv: tuple
    config_path: str
    config_sha256: str
    out_dir: str
    threads: int
    created_utc: str
    outputs: tuple


@contextmanager
def _atomic(final: Path):
    """Yield a temporary path that replaces ``final`` on success."""
    tmp = final.with_name(f"{final.name}.{os.getpid()}.tmp")
    try:
        yield tmp
        os.replace(tmp, final)
    finally:
        tmp.unlink(missing_ok=True)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, args, command: str, threads: int, outputs: list) -> None:
    manifest = RunManifest(
        command=command,
        argv=tuple(args.raw_argv),
        config_path=str(args.config),
        config_sha256=hashlib.sha256(Path(args.config).read_bytes()).hexdigest(),
        out_dir=str(out),
        threads=threads,
        created_utc=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        outputs=tuple(outputs),
    )
    with _atomic(out / "manifest.json") as tmp:
        tmp.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")


def _resolve_threads(args) -> int:
    threads = args.threads
    if threads is None:
        raw = os.environ.get(THREADS_ENV_VAR)
        if raw is not None:
            try:
                threads = int(raw)
            except ValueError:
                raise ConfigError(
                    f"{THREADS_ENV_VAR}={raw!r} is not an integer"
                ) from None
    if threads is None:
        threads = os.cpu_count() or 1
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    return threads


def cmd_simulate(args) -> int:
    cells = parse_config(args.config)
    out = _out_dir(args)
    outputs = []
    for cell in cells:
        pid = population_id(cell)
        stem = (
            f"cohort_pop{pid}_fu{cell.follow_up_days}_prior{cell.max_prior_days}"
            f"_prop{cell.prop_prior:g}_n{cell.n}"
        )
        for r in range(cell.replicates):
            name = f"{stem}_rep{r:04d}.csv"
            with _atomic(out / name) as tmp:
                cohort_to_csv(generate_cohort(cell, r), tmp)
            outputs.append(name)
    _write_manifest(out, args, "simulate", 1, outputs)
    return 0


def cmd_run(args) -> int:
    cells = parse_config(args.config)
    threads = _resolve_threads(args)
    out = _out_dir(args)

    summaries = [run_scenario(cell, workers=threads) for cell in cells]

    outputs = []
    with _atomic(out / "summary.csv") as tmp:
        summaries_to_csv(summaries, tmp)
    outputs.append("summary.csv")
    with _atomic(out / "flags.csv") as tmp:
        flags_to_csv(summaries, tmp)
    outputs.append("flags.csv")
    for name, svg in render_figures(summaries).items():
        with _atomic(out / name) as tmp:
            tmp.write_text(svg)
        outputs.append(name)
    _write_manifest(out, args, "run", threads, outputs)

    n_failures = sum(ms.n_failures for s in summaries for ms in s.models)
    if n_failures:
        print(
            f"recurmi: {n_failures} model fit(s) failed across replicates; "
            "see the n_failures column",
            file=sys.stderr,
        )
        return 4
    return 0


def _write_fit_csv(fh, fit) -> None:
    w = csv.writer(fh)
    w.writerow(FIT_CSV_COLUMNS)
    shared = [
        _fmt(float(fit.theta)),
        _fmt(float(fit.loglik)),
        str(int(fit.converged)),
        str(fit.n_events),
    ]
    for j in range(fit.beta.size):
        w.writerow(
            [f"x{j + 1}", _fmt(float(fit.beta[j])), _fmt(float(fit.se[j]))] + shared
        )


def cmd_fit(args) -> int:
    rows = rows_from_csv(args.riskset)
    try:
        options = CoxOptions(theta=args.theta)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    fit = fit_cox_frailty(rows, n_subjects=args.n_subjects, options=options)
    if args.out is None:
        _write_fit_csv(sys.stdout, fit)
    else:
        with _atomic(Path(args.out)) as tmp:
            with open(tmp, "w", newline="") as fh:
                _write_fit_csv(fh, fit)
    return 0


def cmd_check(args) -> int:
    rows, all_ok = summary_csv_to_flags(args.summary)

    def write(fh):
        w = csv.writer(fh)
        w.writerow(FLAGS_CSV_COLUMNS)
        w.writerows(rows)

    if args.out is None:
        write(sys.stdout)
    else:
        with _atomic(Path(args.out)) as tmp:
            with open(tmp, "w", newline="") as fh:
                write(fh)
    return 0 if all_ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recurmi",
        description="Recurrent-event simulation, imputation, and frailty fits.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="write every cohort in the grid as CSV")
    p_sim.add_argument("config", help="scenario INI file")
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.set_defaults(func=cmd_simulate)

    p_run = sub.add_parser("run", help="run the evaluation grid")
    p_run.add_argument("config", help="scenario INI file")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument(
        "--threads",
        type=int,
        default=None,
        help=f"worker processes (default: ${THREADS_ENV_VAR} or all cores)",
    )
    p_run.set_defaults(func=cmd_run)

    p_fit = sub.add_parser("fit", help="fit one frailty model to risk intervals")
    p_fit.add_argument("riskset", help="risk-interval CSV file")
    p_fit.add_argument("--out", default=None, help="output CSV (default: stdout)")
    p_fit.add_argument(
        "--theta",
        type=float,
        default=None,
        help="fix the frailty variance (default: estimate it)",
    )
    p_fit.add_argument(
        "--n-subjects",
        type=int,
        default=None,
        help="cohort size when the table omits event-free subjects",
    )
    p_fit.set_defaults(func=cmd_fit)

    p_chk = sub.add_parser("check", help="recompute verdicts from a summary CSV")
    p_chk.add_argument("summary", help="summary CSV file")
    p_chk.add_argument("--out", default=None, help="output CSV (default: stdout)")
    p_chk.set_defaults(func=cmd_check)

    return parser


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    args = build_parser().parse_args(argv)
    args.raw_argv = list(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"recurmi: {exc}", file=sys.stderr)
        return 2
    except (DataError, DomainError, OSError) as exc:
        print(f"recurmi: {exc}", file=sys.stderr)
        return 3
    except (FitError, NumericError, PoolingError) as exc:
        print(f"recurmi: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
