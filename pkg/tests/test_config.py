import pytest

from snnconv import config
from snnconv.errors import ConfigError


def test_defaults_and_reference_file_load():
    cfg = config.load(config.reference_path())
    assert cfg.sim["T"] == 64 and cfg.sim["v0"] == 0.5
    assert cfg.model["hidden"] == [48, 32]
    assert cfg.quant_config().levels == 64


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="sim.bogus"):
        config.loads("[sim]\nbogus = 1\n")
    with pytest.raises(ConfigError, match=r"\[extra\]"):
        config.loads("[extra]\na = 1\n")


@pytest.mark.parametrize("text", [
    "[sim]\nv0 = 1.5\n",
    "[sim]\nT = 0\n",
    "[sim]\nreadout = sideways\n",
    "[normalize]\npercentile = 0\n",
    "[stages]\ntrain = maybe\n",
    "[quant]\nlevels = many\n",
])
def test_out_of_range_values(text):
    with pytest.raises(ConfigError):
        config.loads(text)


def test_overrides_win():
    cfg = config.loads("[sim]\nT = 32\n")
    cfg.override("sim.T=128")
    assert cfg.sim["T"] == 128
    with pytest.raises(ConfigError):
        cfg.override("T=128")


def test_dumps_round_trips():
    cfg = config.load(config.reference_path())
    assert config.loads(cfg.dumps()).to_dict() == cfg.to_dict()


def test_unparseable_file(tmp_path):
    (tmp_path / "bad.ini").write_text("no section header\n")
    with pytest.raises(ConfigError):
        config.load(tmp_path / "bad.ini")
    with pytest.raises(ConfigError):
        config.load(tmp_path / "missing.ini")
