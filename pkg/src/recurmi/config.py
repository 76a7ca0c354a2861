"""INI scenario files.

A scenario file declares a grid of simulation cells in one ``[scenario]``
section.  List-valued keys (``populations``, ``n``, ``prop_prior``, and the
follow-up and max-prior keys) are comma separated and expand as a full
cross product, so

    [scenario]
    populations = 1, 3
    n = 1000
    prop_prior = 0.0, 0.5
    follow_up_years = 5
    max_prior_years = 10

yields four cells.  Durations are given either in days or in years (years
are converted at 365 days per year); giving both forms of the same key is
an error, as is any unknown key.
"""

from __future__ import annotations

import configparser
import itertools
from pathlib import Path

from .errors import ConfigError
from .simulate import ALL_MODELS, DAYS_PER_YEAR, ScenarioConfig

__all__ = ["parse_config", "parse_config_text", "DEFAULT_REPLICATES"]

DEFAULT_REPLICATES = 200

_SECTION = "scenario"
_KNOWN_KEYS = frozenset({
    "populations", "n", "prop_prior",
    "follow_up_days", "follow_up_years",
    "max_prior_days", "max_prior_years",
    "replicates", "m_imputations", "k_cap", "seed", "models",
})


def _split(raw: str, key: str) -> list:
    items = [part.strip() for part in raw.split(",")]
    items = [part for part in items if part]
    if not items:
        raise ConfigError(f"{key} must list at least one value")
    return items


def _int_list(raw: str, key: str) -> list:
    out = []
    for part in _split(raw, key):
        try:
            out.append(int(part))
        except ValueError:
            raise ConfigError(f"{key}: {part!r} is not an integer") from None
    if len(set(out)) != len(out):
        raise ConfigError(f"{key} contains duplicate values: {out}")
    return out


def _float_list(raw: str, key: str) -> list:
    out = []
    for part in _split(raw, key):
        try:
            out.append(float(part))
        except ValueError:
            raise ConfigError(f"{key}: {part!r} is not a number") from None
    if len(set(out)) != len(out):
        raise ConfigError(f"{key} contains duplicate values: {out}")
    return out


def _int_scalar(raw: str, key: str) -> int:
    try:
        return int(raw.strip())
    except ValueError:
        raise ConfigError(f"{key}: {raw.strip()!r} is not an integer") from None


def _duration_list(section, key_days: str, key_years: str, default=None) -> list:
    """Day counts from a days key or a years key, never both."""
    has_days = key_days in section
    has_years = key_years in section
    if has_days and has_years:
        raise ConfigError(f"give {key_days} or {key_years}, not both")
    if has_days:
        return _int_list(section[key_days], key_days)
    if has_years:
        return [y * DAYS_PER_YEAR for y in _int_list(section[key_years], key_years)]
    if default is not None:
        return list(default)
    raise ConfigError(f"missing required key: {key_days} or {key_years}")


def parse_config_text(text: str) -> list:
    """Parse scenario INI text into the list of grid cells."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"invalid scenario file: {exc}") from None

    sections = parser.sections()
    if _SECTION not in sections:
        raise ConfigError(f"missing [{_SECTION}] section")
    extra = [s for s in sections if s != _SECTION]
    if extra:
        raise ConfigError(f"unexpected section(s): {extra}")
    section = parser[_SECTION]

    unknown = sorted(set(section) - _KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{_SECTION}]: {unknown}")
    for key in ("populations", "n", "prop_prior"):
        if key not in section:
            raise ConfigError(f"missing required key: {key}")

    populations = _int_list(section["populations"], "populations")
    ns = _int_list(section["n"], "n")
    props = _float_list(section["prop_prior"], "prop_prior")
    follow_ups = _duration_list(section, "follow_up_days", "follow_up_years")
    max_priors = _duration_list(section, "max_prior_days", "max_prior_years", default=[0])

    replicates = _int_scalar(section.get("replicates", str(DEFAULT_REPLICATES)), "replicates")
    m_imputations = _int_scalar(section.get("m_imputations", "5"), "m_imputations")
    k_cap = _int_scalar(section.get("k_cap", "5"), "k_cap")
    seed = _int_scalar(section.get("seed", "0"), "seed")
    models = tuple(_split(section["models"], "models")) if "models" in section else ALL_MODELS

    cells = []
    for pop, fu, mp, pp, n in itertools.product(populations, follow_ups, max_priors, props, ns):
        if pp > 0.0 and mp <= 0:
            raise ConfigError(
                "max_prior_days (or max_prior_years) must be positive when "
                f"prop_prior > 0; got prop_prior={pp} with max_prior_days={mp}"
            )
        cells.append(ScenarioConfig(
            population=pop, n=n, follow_up_days=fu, max_prior_days=mp,
            prop_prior=pp, replicates=replicates, m_imputations=m_imputations,
            k_cap=k_cap, seed=seed, models=models,
        ))
    return cells


def parse_config(path) -> list:
    """Parse a scenario INI file into the list of grid cells."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_config_text(text)
