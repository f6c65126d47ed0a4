import pytest
from hypothesis import given
from hypothesis import strategies as st

from plugfed.config import (
    ConfigError,
    ExperimentConfig,
    config_to_text,
    load_config,
    parse_config,
)
from plugfed.model import Backend


def test_defaults_follow_the_reference_protocol():
    cfg = ExperimentConfig()
    assert cfg.split.train_fraction == 0.8
    assert cfg.aux.fraction == 0.2
    assert (cfg.partition.num_clients, cfg.partition.alpha, cfg.partition.overlap) == (10, 0.9, 0.2)
    assert cfg.noise.fractions == (0.0, 0.05, 0.1, 0.2, 0.3)
    assert cfg.fed.rounds == 30
    assert cfg.model.local_epochs == 50
    assert (cfg.thresholds.phi1, cfg.thresholds.phi2) == (30.0, 0.2)


def test_parse_basic_values():
    cfg = parse_config(
        """
        # a comment
        seed = 3
        out = /tmp/x
        noise.fractions = 0, 0.3
        fed.noise_handling = off
        model.backend = tiny_conv
        model.learning_rate =      # none: use the optimizer default
        """
    )
    assert cfg.seed == 3
    assert cfg.out == "/tmp/x"
    assert cfg.noise.fractions == (0.0, 0.3)
    assert cfg.fed.noise_handling == (False,)
    assert cfg.model.backend is Backend.TINY_CONV
    assert cfg.model.learning_rate is None


@pytest.mark.parametrize(
    "text,match",
    [
        ("seed = 1\nseed = 2\n", "<config>:2: duplicate key 'seed'"),
        ("fed.nope = 1\n", "<config>:1: unknown key 'fed.nope'"),
        ("bogus.rounds = 1\n", "unknown key"),
        ("fed.rounds\n", "expected key = value"),
        ("\nfed.rounds = many\n", "<config>:2: bad value"),
        ("fed.rounds = 0\n", "rounds"),
        ("noise.fractions = 0.2, 1.5\n", "fractions"),
    ],
)
def test_config_errors_are_located(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_round_trip_through_text():
    cfg = ExperimentConfig().with_overrides(
        seed=99, fed__rounds=4, model__learning_rate=0.25, noise__fractions=(0.1, 0.2)
    )
    assert parse_config(config_to_text(cfg)) == cfg


@given(
    st.integers(0, 2**40),
    st.integers(1, 50),
    st.floats(0.01, 100, allow_nan=False),
    st.lists(st.floats(0, 0.99), min_size=1, max_size=5, unique=True),
)
def test_round_trip_property(seed, rounds, alpha, fractions):
    cfg = ExperimentConfig().with_overrides(
        seed=seed, fed__rounds=rounds, partition__alpha=alpha, noise__fractions=tuple(fractions)
    )
    assert parse_config(config_to_text(cfg)) == cfg


def test_relative_data_path_resolves_against_config_dir(tmp_path):
    (tmp_path / "sub").mkdir()
    p = tmp_path / "sub" / "c.cfg"
    p.write_text("data.source = dataset\ndata.path = ds.csv\n")
    assert load_config(p).data.path == str(tmp_path / "sub" / "ds.csv")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "none.cfg")


def test_sub_seeds_depend_on_master_and_role():
    a = ExperimentConfig(seed=1)
    assert a.sub_seed("split") == ExperimentConfig(seed=1).sub_seed("split")
    assert a.sub_seed("split") != a.sub_seed("aux")
    assert a.sub_seed("split") != ExperimentConfig(seed=2).sub_seed("split")
