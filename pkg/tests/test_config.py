import dataclasses

import pytest

from autoview.config import (ConfigError, ConfigParseError, RunConfig, dump_config, from_dict, load_config,
                             parse_text, to_dict, with_overrides, write_effective_config)


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("")
    cfg = load_config(path)
    assert cfg == RunConfig()
    assert cfg.policy_pi_optim.lr == 6e-5
    assert cfg.policy_pi_optim.betas == [0.5, 0.999]
    assert cfg.policy_p_optim.lr == 1e-5
    assert cfg.student_optim.weight_decay_start == 0.04 and cfg.student_optim.weight_decay_end == 0.4
    assert cfg.distill.ema_momentum == 0.996


def test_round_trip_idempotent(tmp_path):
    cfg = from_dict({"seed": 3, "policy": {"levels": 2, "kinds": ["Invert", "Hue"]}, "alpha": 0.5})
    path = write_effective_config(cfg, tmp_path)
    again = load_config(path)
    assert again == cfg
    assert dump_config(load_config(path)) == path.read_text()


@pytest.mark.parametrize("data,field", [
    ({"alpha": -1}, "alpha"),
    ({"steps": 0}, "steps"),
    ({"bogus": 1}, "bogus"),
    ({"policy": {"nope": True}}, "policy.nope"),
    ({"policy": {"p_init": 1.5}}, "policy.p_init"),
    ({"policy": {"kinds": ["Mixup"]}}, "policy.kinds"),
    ({"distill": {"teacher_temp": 0.5}}, "distill.teacher_temp"),
    ({"encoder": {"arch": "resnet"}}, "encoder.arch"),
    ({"encoder": {"width": 30, "heads": 4}}, "encoder.width"),
    ({"dataset": {"kind": "folder-of-images"}}, "dataset.root"),
    ({"augment": {"mode": "mixup"}}, "augment.mode"),
    ({"batch_size": "many"}, "batch_size"),
    ({"symmetrize": 1}, "symmetrize"),
    ({"progressive": {"enabled": True, "max_size": 64}}, "progressive.max_size"),
    ({"eval": {"k_values": []}}, "eval.k_values"),
    ({"policy_pi_optim": {"betas": [0.5]}}, "policy_pi_optim.betas"),
])
def test_validation_names_field(data, field):
    with pytest.raises(ConfigError) as exc:
        from_dict(data)
    assert exc.value.field == field
    assert field in str(exc.value)


def test_parse_error_reports_line():
    with pytest.raises(ConfigParseError) as exc:
        parse_text("seed: 1\npolicy:\n  levels: [1\n")
    assert exc.value.line is not None and exc.value.line >= 3
    with pytest.raises(ConfigParseError):
        parse_text("- a\n- b\n")


def test_overrides():
    cfg = with_overrides(RunConfig(), {"policy.levels": 1, "seed": 9})
    assert cfg.policy.levels == 1 and cfg.seed == 9
    with pytest.raises(ConfigError):
        with_overrides(RunConfig(), {"policy.missing": 1})
    with pytest.raises(ConfigError):
        with_overrides(RunConfig(), {"seed.x": 1})


def test_to_dict_covers_every_field():
    d = to_dict(RunConfig())
    assert set(d) == {f.name for f in dataclasses.fields(RunConfig)}
