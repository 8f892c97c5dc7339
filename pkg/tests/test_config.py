import pytest

from ktie.config import default_config, parse_config, parse_text
from ktie.errors import ConfigError
from ktie.cli import DEFAULT_CONFIGS, packaged_config

from importlib import resources


def test_defaults_parse():
    cfg = default_config()
    assert cfg.grid.n_v == 16
    assert cfg.weight.gamma == (1.0, 0.0)
    assert cfg.inversion.lam == "auto"


def test_round_trip_is_stable():
    cfg = parse_text("[grid]\ndx = 0.1\ndt = 0.05\n[coefficients]\nmu = isotropic(value=0.2)\n")
    again = parse_text(cfg.to_ini())
    assert again.to_ini() == cfg.to_ini()
    assert again.digest() == cfg.digest()
    assert again.coefficients.mu == "isotropic(value=0.2)"


@pytest.mark.parametrize("name", sorted(p.name for p in resources.files("ktie").joinpath("configs").iterdir()
                                        if p.name.endswith(".ini")))
def test_packaged_configs_parse(name):
    cfg = parse_text(packaged_config(name))
    assert parse_text(cfg.to_ini()).digest() == cfg.digest()


def test_every_subcommand_has_a_default():
    for name in DEFAULT_CONFIGS.values():
        parse_text(packaged_config(name))


def test_short_horizon_rejected():
    with pytest.raises(ConfigError, match="T >= 2"):
        parse_text("[grid]\nT = 3.0\n")


def test_odd_direction_count_rejected():
    with pytest.raises(ConfigError, match="n_v"):
        parse_text("[grid]\nn_v = 15\n")


def test_violations_are_aggregated():
    text = "[grid]\nn_v = 15\nbogus = 1\n[nowhere]\na = 1\n[coefficients]\nsigma = wobble(value=1)\n"
    with pytest.raises(ConfigError) as info:
        parse_text(text)
    v = info.value.violations
    assert any("unknown key grid.bogus" in s for s in v)
    assert any("unknown section [nowhere]" in s for s in v)
    assert any("wobble" in s for s in v)
    assert any("n_v" in s for s in v)
    assert len(v) >= 4


def test_non_strict_ignores_unknown_keys():
    cfg = parse_text("[grid]\nbogus = 1\n", strict=False)
    assert cfg.grid.dx == 0.05


def test_dt_must_divide_t_and_not_exceed_dx():
    with pytest.raises(ConfigError, match="multiple"):
        parse_text("[grid]\ndt = 0.03\n")
    with pytest.raises(ConfigError, match="exceeds"):
        parse_text("[grid]\ndx = 0.05\ndt = 0.1\n")


def test_overrides_revalidate():
    cfg = default_config()
    assert cfg.with_overrides(grid__dx="0.1").grid.dx == 0.1
    with pytest.raises(ConfigError):
        cfg.with_overrides(grid__n_v="9")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "nope.ini")


def test_sections_are_read_only():
    cfg = default_config()
    with pytest.raises(TypeError):
        cfg.grid["dx"] = 1.0
