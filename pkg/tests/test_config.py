"""Configuration defaults, variants, overrides, persistence."""

import dataclasses

import pytest

from octaseg.config import (ABLATION_VARIANTS, RunConfig, TrainConfig,
                            apply_variant, config_from_dict, load_config,
                            save_config)
from octaseg.errors import ValidationError


def test_defaults_validate():
    cfg = RunConfig()
    cfg.validate()
    assert cfg.backbone.channels == (16, 24, 32, 48, 64)
    assert cfg.train.input_size % 16 == 0


def test_variant_table_shape():
    assert list(ABLATION_VARIANTS) == ["M0", "M1", "M2", "M3",
                                       "M*1", "M*2", "M*3"]
    base = ABLATION_VARIANTS["M0"]
    assert not any(base.values())
    full = ABLATION_VARIANTS["M*3"]
    assert all(full.values())


@pytest.mark.parametrize("name", list(ABLATION_VARIANTS))
def test_apply_variant_round_trip(name):
    t = apply_variant(TrainConfig(), name)
    for key, val in ABLATION_VARIANTS[name].items():
        assert getattr(t, key) == val


def test_apply_variant_unknown():
    with pytest.raises(ValidationError):
        apply_variant(TrainConfig(), "M9")


def test_graph_modules_need_both_aux_tasks():
    t = dataclasses.replace(TrainConfig(), use_migr=True,
                            use_boundary_task=True, use_shape_task=False)
    with pytest.raises(ValidationError):
        t.validate()


def test_input_size_must_be_divisible():
    t = dataclasses.replace(TrainConfig(), input_size=40)
    with pytest.raises(ValidationError):
        t.validate()


def test_overrides_and_yaml_round_trip(tmp_path):
    cfg = load_config(None, ["train.epochs=7", "train.lr=0.01",
                             "graph.num_nodes=6", "boundary_method=canny"])
    assert cfg.train.epochs == 7 and cfg.train.lr == 0.01
    assert cfg.graph.num_nodes == 6 and cfg.boundary_method == "canny"
    path = tmp_path / "cfg.yaml"
    save_config(cfg, path)
    again = load_config(path)
    assert again.to_dict() == cfg.to_dict()
    assert again.config_hash() == cfg.config_hash()


def test_override_errors():
    with pytest.raises(ValidationError):
        load_config(None, ["train.epochs"])
    with pytest.raises(ValidationError):
        load_config(None, ["train.nope=3"])
    with pytest.raises(ValidationError):
        load_config(None, ["train.epochs=three"])


def test_config_from_dict_round_trip():
    cfg = RunConfig()
    again = config_from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


def test_hash_tracks_content():
    a = RunConfig()
    b = load_config(None, ["train.seed=123"])
    assert a.config_hash() != b.config_hash()
    assert len(a.config_hash()) == 12
