import json

import pytest

from mrio.config import Config, ConfigError, load_config, parse_config


def test_defaults_and_echo_round_trip():
    cfg = parse_config("", env={})
    assert cfg == Config()
    assert cfg.log_sigma_init is None and "log_sigma_init=auto" in cfg.echo()
    assert parse_config(cfg.echo(), env={}) == cfg
    odd = Config(seed=3, gamma=0.5, smooth=False, log_sigma_init=-0.25, lam=0.0)
    assert parse_config(odd.echo(), env={}) == odd


def test_key_value_with_comments_and_json():
    text = "# run\nseed = 4   # trailing\n\nT=1\nsmooth=off\nfinetune_lr=1e-4\n"
    cfg = parse_config(text, env={})
    assert (cfg.seed, cfg.T, cfg.smooth, cfg.finetune_lr) == (4, 1, False, 1e-4)
    js = parse_config(json.dumps({"seed": 4, "T": 1, "smooth": False, "finetune_lr": 1e-4}), env={})
    assert js == cfg


def test_errors_name_the_line_or_key():
    with pytest.raises(ConfigError, match="line 2: unknown key 'sed'"):
        parse_config("seed=1\nsed=2\n", env={})
    with pytest.raises(ConfigError, match="line 1: expected key=value"):
        parse_config("seed\n", env={})
    with pytest.raises(ConfigError, match="line 1: bad value for views"):
        parse_config("views=many\n", env={})
    with pytest.raises(ConfigError, match="unknown key 'bogus'"):
        parse_config('{"bogus": 1}', env={})
    with pytest.raises(ConfigError, match="line 1: invalid JSON"):
        parse_config('{"seed": }', env={})
    with pytest.raises(ConfigError, match="not an integer"):
        parse_config('{"seed": 1.5}', env={})


@pytest.mark.parametrize("text", ["views=1", "gamma=-1", "mise_target=48", "width_factor=0",
                                  "loss_mode=other", "T=0", "finetune_scope=encoder", "grid=7",
                                  "seed=-1", "finetune_lr=0"])
def test_out_of_range_values(text):
    key = text.split("=")[0]
    with pytest.raises(ConfigError, match=key):
        parse_config(text, env={})


def test_seed_environment_override(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seed=1\nT=1\n")
    assert load_config(p, env={}).seed == 1
    assert load_config(p, env={"MRIO_SEED": "9"}).seed == 9
    assert load_config(None, env={"MRIO_SEED": "5"}).seed == 5
    with pytest.raises(ConfigError, match="MRIO_SEED"):
        load_config(None, env={"MRIO_SEED": "x"})
