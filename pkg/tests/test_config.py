"""Tests for scenario INI parsing."""

import pytest

from recurmi.config import DEFAULT_REPLICATES, parse_config, parse_config_text
from recurmi.errors import ConfigError
from recurmi.simulate import (
    ALL_MODELS,
    MODEL_SHFMI_CP,
    MODEL_SHFMI_GT,
    POPULATIONS,
)

MINIMAL = """\
[scenario]
populations = 1
n = 500
prop_prior = 0.5
follow_up_years = 5
max_prior_years = 10
"""


class TestParsing:
    def test_minimal_file_defaults(self):
        cells = parse_config_text(MINIMAL)
        assert len(cells) == 1
        cfg = cells[0]
        assert cfg.population == POPULATIONS[1]
        assert cfg.n == 500
        assert cfg.prop_prior == 0.5
        assert cfg.follow_up_days == 5 * 365
        assert cfg.max_prior_days == 10 * 365
        assert cfg.replicates == DEFAULT_REPLICATES
        assert cfg.m_imputations == 5
        assert cfg.k_cap == 5
        assert cfg.seed == 0
        assert cfg.models == ALL_MODELS

    def test_grid_is_full_cross_product(self):
        cells = parse_config_text("""\
[scenario]
populations = 1, 3
n = 200, 1000
prop_prior = 0.0, 0.25, 0.5
follow_up_days = 730, 1825
max_prior_years = 10
""")
        assert len(cells) == 2 * 2 * 3 * 2
        keys = [
            (c.population, c.follow_up_days, c.prop_prior, c.n)
            for c in cells
        ]
        assert len(set(keys)) == len(keys)
        # population varies slowest, n fastest
        assert keys[0][1:] == (730, 0.0, 200)
        assert keys[1][3] == 1000
        assert keys[-1][0] == POPULATIONS[3]

    def test_days_given_directly(self):
        cells = parse_config_text(MINIMAL.replace(
            "follow_up_years = 5", "follow_up_days = 1000"
        ))
        assert cells[0].follow_up_days == 1000

    def test_explicit_options_override_defaults(self):
        cells = parse_config_text(MINIMAL + """\
replicates = 12
m_imputations = 3
k_cap = 4
seed = 99
models = SHFMI.CP, SHFMI.GT
""")
        cfg = cells[0]
        assert cfg.replicates == 12
        assert cfg.m_imputations == 3
        assert cfg.k_cap == 4
        assert cfg.seed == 99
        assert cfg.models == (MODEL_SHFMI_CP, MODEL_SHFMI_GT)

    def test_max_prior_defaults_to_zero_without_prior_subjects(self):
        cells = parse_config_text("""\
[scenario]
populations = 2
n = 100
prop_prior = 0.0
follow_up_years = 2
""")
        assert cells[0].max_prior_days == 0

    def test_parse_config_reads_file(self, tmp_path):
        path = tmp_path / "grid.ini"
        path.write_text(MINIMAL)
        assert parse_config(path) == parse_config_text(MINIMAL)


class TestRejections:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            parse_config(tmp_path / "nope.ini")

    def test_missing_section(self):
        with pytest.raises(ConfigError, match=r"missing \[scenario\]"):
            parse_config_text("[grid]\npopulations = 1\n")

    def test_extra_section(self):
        with pytest.raises(ConfigError, match="unexpected section"):
            parse_config_text(MINIMAL + "[output]\ndir = x\n")

    def test_unknown_key_is_named(self):
        with pytest.raises(ConfigError, match="follow_up"):
            parse_config_text(MINIMAL + "follow_up = 3\n")

    @pytest.mark.parametrize("key", ["populations", "n", "prop_prior"])
    def test_missing_required_key(self, key):
        lines = [l for l in MINIMAL.splitlines() if not l.startswith(key)]
        with pytest.raises(ConfigError, match=key):
            parse_config_text("\n".join(lines))

    def test_missing_follow_up(self):
        lines = [l for l in MINIMAL.splitlines() if not l.startswith("follow_up")]
        with pytest.raises(ConfigError, match="follow_up_days or follow_up_years"):
            parse_config_text("\n".join(lines))

    def test_both_duration_forms_rejected(self):
        with pytest.raises(ConfigError, match="not both"):
            parse_config_text(MINIMAL + "follow_up_days = 900\n")
        with pytest.raises(ConfigError, match="not both"):
            parse_config_text(MINIMAL + "max_prior_days = 900\n")

    def test_non_integer_value_is_located(self):
        with pytest.raises(ConfigError, match=r"n: 'lots'"):
            parse_config_text(MINIMAL.replace("n = 500", "n = lots"))

    def test_non_numeric_proportion(self):
        with pytest.raises(ConfigError, match="prop_prior"):
            parse_config_text(MINIMAL.replace("0.5", "half"))

    def test_duplicate_list_values(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text(MINIMAL.replace("n = 500", "n = 500, 500"))

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="invalid scenario file"):
            parse_config_text(MINIMAL + "n = 600\n")

    def test_syntax_error_rejected(self):
        with pytest.raises(ConfigError, match="invalid scenario file"):
            parse_config_text("populations = 1\n")

    def test_unknown_population_id(self):
        with pytest.raises(ConfigError, match="population id"):
            parse_config_text(MINIMAL.replace("populations = 1", "populations = 9"))

    def test_unknown_model_name(self):
        with pytest.raises(ConfigError, match="unknown model"):
            parse_config_text(MINIMAL + "models = SHFMI.CP, bogus\n")

    def test_prior_subjects_need_prior_window(self):
        with pytest.raises(ConfigError, match="must be positive when"):
            parse_config_text("""\
[scenario]
populations = 1
n = 100
prop_prior = 0.0, 0.5
follow_up_years = 2
""")

    def test_zero_prior_window_allowed_when_listed_with_positive(self):
        cells = parse_config_text("""\
[scenario]
populations = 1
n = 100
prop_prior = 0.0
follow_up_years = 2
max_prior_days = 0, 3650
""")
        assert [c.max_prior_days for c in cells] == [0, 3650]
