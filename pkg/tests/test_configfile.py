"""Key-value config parsing and preset resolution."""

import pytest

from condense.configfile import load_config, parse_config_text
from condense.errors import ConfigError
from condense.training import TrainSettings


def test_keys_route_to_model_or_training():
    model_kw, train_kw = parse_config_text(
        "k0 = 4\n"
        "groups = 2\n"
        "epochs = 12\n"
        "lr0 = 0.05\n"
    )
    assert model_kw == {"k0": 4, "groups": 2}
    assert train_kw == {"epochs": 12, "lr0": 0.05}


def test_comments_blanks_and_lists():
    model_kw, train_kw = parse_config_text(
        "# a comment\n"
        "\n"
        "block_layers = 2, 3, 4  # inline comment\n"
        "augment = false\n"
        "fc_condense_epoch = none\n"
    )
    assert model_kw["block_layers"] == (2, 3, 4)
    assert train_kw["augment"] is False
    assert train_kw["fc_condense_epoch"] is None


def test_bool_spellings():
    for raw, want in [("true", True), ("1", True), ("yes", True),
                      ("off", False), ("0", False)]:
        _, train_kw = parse_config_text(f"decay_bn = {raw}")
        assert train_kw["decay_bn"] is want
    with pytest.raises(ConfigError):
        parse_config_text("decay_bn = maybe")


def test_unknown_key_and_bad_syntax():
    with pytest.raises(ConfigError, match="unknown"):
        parse_config_text("wingspan = 3")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_text("epochs 12")
    with pytest.raises(ConfigError):
        parse_config_text("epochs = twelve")


def test_load_config_preset_name():
    cfg, settings = load_config("cifar-lgc-small")
    assert cfg.groups == 4
    assert settings == TrainSettings()
    with pytest.raises(ConfigError):
        load_config("no-such-preset")


def test_load_config_file_with_preset_base(tmp_path):
    p = tmp_path / "exp.cfg"
    p.write_text(
        "preset = cifar-lgc-small\n"
        "in_channels = 1\n"
        "input_resolution = 28\n"
        "epochs = 24\n"
        "seed = 7\n"
    )
    cfg, settings = load_config(str(p))
    assert cfg.groups == 4  # inherited
    assert cfg.in_channels == 1 and cfg.input_resolution == 28
    assert settings.epochs == 24 and settings.seed == 7


def test_load_config_file_standalone(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(
        "block_layers = 2, 2\n"
        "k0 = 4\n"
        "groups = 2\n"
        "condense_factor = 2\n"
        "batch_size = 32\n"
    )
    cfg, settings = load_config(str(p))
    assert cfg.block_layers == (2, 2) and cfg.k0 == 4
    assert settings.batch_size == 32
    cfg.validate()
