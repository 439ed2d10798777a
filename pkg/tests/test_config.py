"""Config parsing: table defaults, overrides, validation, round trips."""

import pytest

from minidino import config
from minidino.config import ConfigError, parse_config


def test_empty_config_gives_table_defaults(tmp_path):
    p = tmp_path / "empty.cfg"
    p.write_text("")
    cfg = parse_config(str(p))
    assert cfg.teacher_temp == 0.04
    assert cfg.student_temp == 0.1
    assert cfg.out_dim == 1024
    assert cfg.momentum_teacher == 0.9995
    assert cfg.batch_size == 64
    assert cfg.n_crops == 4
    assert cfg.n_epochs == 100
    assert cfg.optim == "SGD"
    assert cfg.clip_grad == 2.0
    assert cfg.norm_last_layer is False
    assert cfg.batch_size_eval == 8
    assert cfg.lr == 0.0005
    assert cfg.min_lr == 1e-06
    assert cfg.warmup_epochs == 10
    assert cfg.weight_decay == 0.04
    assert cfg.weight_decay_end == 0.4
    assert cfg.pretrained is True
    assert cfg.device_ids == (0,)


def test_temperature_ordering_validated():
    with pytest.raises(ConfigError, match="temperature ordering"):
        parse_config(overrides=["student_temp=0.02"])


def test_unknown_key_suggests_nearest():
    with pytest.raises(ConfigError, match="nearest known key: teacher_temp"):
        parse_config(overrides=["teachr_temp=0.05"])


def test_invalid_value_types():
    with pytest.raises(ConfigError, match="expected an integer"):
        parse_config(overrides=["batch_size=3.5"])
    with pytest.raises(ConfigError, match="expected a boolean"):
        parse_config(overrides=["norm_last_layer=2"])


def test_cli_overrides_win_over_file(tmp_path):
    p = tmp_path / "a.cfg"
    p.write_text("n_epochs = 50\nlr = 0.001\n")
    cfg = parse_config(str(p), overrides=["n_epochs=25"])
    assert cfg.n_epochs == 25
    assert cfg.lr == 0.001


def test_round_trip_echo(tmp_path):
    cfg = parse_config(overrides=[
        "n_epochs=20", "warmup_epochs=3", "augment.global_scale=(0.5,0.9)",
        "jitter.hue=0.2", "distill.alpha=0.5", "data.kind=synthetic-blobs",
        "head.hidden=(64,64)", "optim=SGD", "pretrained_path=/some/path.bin",
    ])
    p = tmp_path / "echo.cfg"
    p.write_text(config.echo_config(cfg))
    assert parse_config(str(p)) == cfg


def test_device_ids_warns_when_nondefault():
    with pytest.warns(UserWarning, match="single-device"):
        cfg = parse_config(overrides=["device_ids=[0,1]"])
    assert cfg.device_ids == (0, 1)


def test_constraint_messages():
    with pytest.raises(ConfigError, match="clip_grad"):
        parse_config(overrides=["clip_grad=0"])
    with pytest.raises(ConfigError, match="n_crops"):
        parse_config(overrides=["n_crops=1"])
    with pytest.raises(ConfigError, match="warmup_epochs"):
        parse_config(overrides=["n_epochs=5", "warmup_epochs=5"])
    with pytest.raises(ConfigError, match="scale ordering"):
        parse_config(overrides=["augment.local_scale=(0.5,1.5)"])
    with pytest.raises(ConfigError, match="only SGD"):
        parse_config(overrides=["optim=AdamW"])


def test_missing_file_is_fatal():
    with pytest.raises(ConfigError, match="not found"):
        parse_config("/nonexistent/path.cfg")


def test_malformed_line_reports_location(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("lr = 0.001\nnot a pair\n")
    with pytest.raises(ConfigError, match="bad.cfg:2"):
        parse_config(str(p))


def test_backbone_width_mult_scales_plan():
    cfg = parse_config(overrides=["backbone.width_mult=0.5"])
    bb = cfg.backbone_config()
    full = parse_config().backbone_config()
    assert all(w <= f for w, f in zip(bb.stage_widths, full.stage_widths))
    assert all(d % bb.heads == 0 for d in bb.attn_dims)


def test_config_pairs_round_trip():
    cfg = parse_config(overrides=["seed=9", "eval.k=5", "augment.global_size=32", "augment.local_size=16"])
    pairs = config.config_to_pairs(cfg)
    assert config.config_from_pairs(pairs) == cfg
