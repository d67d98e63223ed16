"""Experiment configuration: parsing, validation, overrides, canonical echo."""

import pytest

from masknas.config import (DEFAULTS, ExperimentConfig, apply_overrides,
                            as_dict, echo_config, parse_config,
                            parse_config_file)
from masknas.errors import ConfigError

GOOD = """
# a small experiment
dataset = synthetic:blobs2:3
seed = 11
search.nodes_per_cell = 5
search.num_cells = 1
search.init_channels = 8
search.num_candidate_ops = 2
search.candidate_ops = sep_conv_3x3,identity
search.reduction_cells = none
search.num_classes = 2
trainer.epochs = 4          # inline comment
trainer.warmup_epochs = 2
trainer.batch_size = 64
masker.epochs = 2
finetune.epochs = 2
"""


def test_parse_good_config():
    cfg = parse_config(GOOD)
    assert cfg.dataset == "synthetic:blobs2:3"
    assert cfg.seed == 11
    assert cfg.search.nodes_per_cell == 5
    assert cfg.search.candidate_ops == ("sep_conv_3x3", "identity")
    assert cfg.search.reduction_cells == ()
    assert cfg.trainer.epochs == 4
    assert cfg.trainer.warmup_epochs == 2
    assert cfg.masker.epochs == 2
    # untouched keys keep their defaults
    assert cfg.finetune.lr == ExperimentConfig().finetune.lr
    assert cfg.trainer.sigma_kind == "linear"


def test_defaults_cover_every_key_and_rebuild():
    cfg = ExperimentConfig()
    assert as_dict(cfg) == DEFAULTS
    assert cfg.trainer.epochs == 100
    assert cfg.masker.epochs == 20
    assert cfg.masker.mask_init == 0.01
    assert cfg.masker.tau == 0.005
    assert cfg.masker.lr_w_mask == 1e-4
    assert cfg.masker.lr_arch_mask == 1e-5


def test_unknown_key_reports_line_number():
    with pytest.raises(ConfigError, match="line 2.*turbo"):
        parse_config("seed = 1\nturbo = on\n")


def test_duplicate_key_reports_line_number():
    with pytest.raises(ConfigError, match="line 3.*duplicate.*seed"):
        parse_config("seed = 1\ndataset = d\nseed = 2\n")


def test_missing_equals_reports_line_number():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("just a phrase\n")


def test_bad_value_types():
    with pytest.raises(ConfigError, match="seed"):
        parse_config("seed = eleven\n")
    with pytest.raises(ConfigError, match="trainer.w_lr"):
        parse_config("trainer.w_lr = fast\n")
    with pytest.raises(ConfigError, match="search.reduction_cells"):
        parse_config("search.reduction_cells = 1,two\n")


def test_file_level_positivity_is_stricter_than_dataclasses():
    # the dataclass allows zero mask epochs programmatically, a file may not
    from masknas.masker import MaskTrainConfig
    assert MaskTrainConfig(epochs=0).validate()
    with pytest.raises(ConfigError, match="masker.epochs.*positive"):
        parse_config("masker.epochs = 0\n")
    with pytest.raises(ConfigError, match="trainer.epochs"):
        parse_config("trainer.epochs = 0\n")
    with pytest.raises(ConfigError, match="finetune.lr"):
        parse_config("finetune.lr = 0.0\n")


def test_cross_field_validation_becomes_config_error():
    with pytest.raises(ConfigError, match="warmup"):
        parse_config("trainer.epochs = 4\n")  # default warmup 10 > 4
    with pytest.raises(ConfigError, match="nodes_per_cell"):
        parse_config("search.nodes_per_cell = 2\n")


def test_echo_round_trips_byte_exactly():
    cfg = parse_config(GOOD)
    echoed = echo_config(cfg)
    assert echoed.startswith("# resolved configuration\n")
    again = parse_config(echoed)
    assert echo_config(again) == echoed
    assert as_dict(again) == as_dict(cfg)
    # echo of defaults also reparses
    assert as_dict(parse_config(echo_config(ExperimentConfig()))) == DEFAULTS


def test_echo_is_sorted_and_complete():
    lines = echo_config(ExperimentConfig()).splitlines()[1:]
    keys = [ln.split(" = ")[0] for ln in lines]
    assert keys == sorted(keys)
    assert set(keys) == set(DEFAULTS)


def test_apply_overrides():
    cfg = parse_config(GOOD)
    out = apply_overrides(cfg, ["seed=99", "trainer.w_lr = 0.2"])
    assert out.seed == 99
    assert out.trainer.w_lr == 0.2
    assert out.dataset == cfg.dataset
    with pytest.raises(ConfigError, match="not key=value"):
        apply_overrides(cfg, ["seed:99"])
    with pytest.raises(ConfigError, match="unknown"):
        apply_overrides(cfg, ["speed=99"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["trainer.epochs=0"])


def test_auto_and_none_spellings():
    cfg = parse_config("trainer.sigma_horizon = auto\n"
                       "search.reduction_cells = none\n")
    assert cfg.trainer.sigma_horizon is None
    assert cfg.search.reduction_cells == ()
    cfg2 = parse_config("trainer.sigma_horizon = 50\n"
                        "search.num_cells = 3\n"
                        "search.reduction_cells = 1,2\n")
    assert cfg2.trainer.sigma_horizon == 50
    assert cfg2.search.reduction_cells == (1, 2)
    echoed = as_dict(cfg2)
    assert echoed["trainer.sigma_horizon"] == "50"
    assert echoed["search.reduction_cells"] == "1,2"
    assert as_dict(cfg)["search.reduction_cells"] == "none"
    assert DEFAULTS["search.reduction_cells"] == "auto"


def test_parse_config_file(tmp_path):
    p = tmp_path / "exp.cfg"
    p.write_text(GOOD)
    cfg = parse_config_file(p)
    assert cfg.seed == 11
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config_file(tmp_path / "missing.cfg")


def test_float_values_echo_with_full_precision():
    cfg = apply_overrides(ExperimentConfig(), ["trainer.w_lr=0.30000000000000004"])
    assert as_dict(cfg)["trainer.w_lr"] == "0.30000000000000004"
