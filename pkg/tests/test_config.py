"""Config schema: defaults, YAML roundtrip, overlay merge, strict rejection."""

import pytest

from semadv.config import (
    AttackStageConfig,
    AttributePrompt,
    ClassBias,
    ConfigError,
    ExperimentConfig,
    PlanConfig,
    ScheduleConfig,
    config_from_dict,
    config_to_dict,
    default_config,
    load_config,
    save_config,
)
from semadv.data import default_dataset_config


def test_default_config_is_complete_and_valid():
    cfg = default_config()
    assert len(cfg.attributes) >= 3
    assert cfg.attack.engine.loss_weights.lambda_1 == 1.0
    assert cfg.attack.engine.loss_weights.lambda_2 == 10.0
    assert cfg.attribute_training.weights.lambda_reg > 0


def test_dict_roundtrip_preserves_config():
    cfg = default_config()
    assert config_from_dict(config_to_dict(cfg)) == cfg


def test_yaml_roundtrip_preserves_config(tmp_path):
    cfg = default_config()
    path = save_config(cfg, tmp_path / "cfg.yaml")
    assert load_config(path) == cfg


def test_empty_document_yields_default_profile(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    assert load_config(path) == default_config()


def test_partial_overlay_merges_nested_sections(tmp_path):
    path = tmp_path / "overlay.yaml"
    path.write_text("seed: 7\nattack:\n  n_seeds: 3\n  engine:\n    lr: 0.9\n")
    cfg = load_config(path)
    assert cfg.seed == 7
    assert cfg.attack.n_seeds == 3
    assert cfg.attack.engine.lr == 0.9
    # untouched keys keep their defaults
    base = default_config()
    assert cfg.attack.engine.iterations == base.attack.engine.iterations
    assert cfg.dataset == base.dataset


def test_unknown_top_level_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_dict({"atack": {}})


def test_unknown_nested_key_names_dotted_path():
    with pytest.raises(ConfigError, match="attack"):
        config_from_dict({"attack": {"n_seedz": 1}})


def test_invalid_value_surfaces_as_config_error():
    with pytest.raises(ConfigError):
        config_from_dict({"attack": {"engine": {"lr": -0.5}}})


def test_attribute_list_replaces_base_wholesale():
    cfg = config_from_dict(
        {"attributes": [{"name": "only", "source_text": "a", "target_text": "b"}]}
    )
    assert [a.name for a in cfg.attributes] == ["only"]


def test_duplicate_attribute_names_rejected():
    spec = {"name": "x", "source_text": "a", "target_text": "b"}
    with pytest.raises(ConfigError, match="duplicate"):
        config_from_dict({"attributes": [spec, dict(spec)]})


def test_attribute_with_equal_captions_rejected():
    with pytest.raises(ConfigError, match="captions"):
        AttributePrompt("x", "same", "same")


def test_bias_must_reference_existing_class():
    with pytest.raises(ConfigError, match="unknown class"):
        config_from_dict(
            {
                "classifiers": {
                    "target_bias": [
                        {
                            "class_name": "ghost",
                            "fill_range": [0.0, 0.1],
                            "background_range": [-0.9, -0.8],
                        }
                    ]
                }
            }
        )


def test_attack_labels_must_fit_dataset():
    with pytest.raises(ConfigError, match="y_target"):
        config_from_dict({"attack": {"y_target": 9}})


def test_source_and_target_must_differ():
    with pytest.raises(ConfigError, match="differ"):
        AttackStageConfig(y_source=1, y_target=1)


def test_plan_markers_must_fit_schedule():
    with pytest.raises(ConfigError, match="t_edit"):
        ExperimentConfig(
            dataset=default_dataset_config(),
            schedule=ScheduleConfig(steps=100),
            plan=PlanConfig(steps=10, t_edit=150, t_boost=0),
        )


def test_schedule_beta_ordering_enforced():
    with pytest.raises(ConfigError, match="beta"):
        ScheduleConfig(beta_min=0.5, beta_max=0.1)


def test_class_bias_is_plain_data():
    bias = ClassBias("disc", fill_range=(0.0, 0.3), background_range=(-0.9, -0.7), seed=3)
    assert bias.seed == 3


def test_opaque_arch_dicts_pass_through():
    cfg = config_from_dict({"classifiers": {"conv_arch": {"base_channels": 8}}})
    assert cfg.classifiers.conv_arch == {"base_channels": 8}
