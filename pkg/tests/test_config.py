import dataclasses
from pathlib import Path

import pytest
import yaml

from aebsim.config import SAFEGUARD_PRESETS, ExperimentConfig, config_from_dict, config_to_dict, load_config
from aebsim.controllers import SAFEGUARDS_ON
from aebsim.errors import ConfigurationError
from aebsim.sim import Condition

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

MINIMAL = {
    "name": "t",
    "runs_per_family": 2,
    "families": ["CutIn"],
    "attacks": {"fp": {"kind": "false_positive", "start_t": [5, 10], "duration": [0.1, 0.2]}},
    "conditions": [{"label": "baseline"}, {"label": "fp", "attack": "fp"},
                   {"label": "fp+sg", "attack": "fp", "safeguards": "all"}],
    "params": {"aeb": {"ttc_threshold": 1.5}},
}


def test_minimal_config():
    cfg = config_from_dict(MINIMAL)
    assert cfg.families == ("CutIn",)
    assert cfg.params.aeb.ttc_threshold == 1.5
    assert cfg.condition("fp+sg").safeguards == SAFEGUARDS_ON
    assert cfg.condition("fp").attack.start_t == (5, 10)


def test_round_trip():
    cfg = config_from_dict(MINIMAL)
    again = config_from_dict(yaml.safe_load(yaml.safe_dump(config_to_dict(cfg))))
    assert again == cfg


@pytest.mark.parametrize("name", ["default", "hazard", "smoke"])
def test_shipped_configs_load(name):
    cfg = load_config(CONFIGS / f"{name}.yaml")
    assert cfg.conditions[0].label == "baseline"


@pytest.mark.parametrize("mutate, msg", [
    (lambda d: d.update(bogus=1), "unknown keys"),
    (lambda d: d["params"]["aeb"].update(ttc=1.0), "params.aeb"),
    (lambda d: d.update(families=["Moon"]), "unknown scenario family"),
    (lambda d: d["conditions"].append({"label": "fp"}), "duplicate condition"),
    (lambda d: d["conditions"].append({"label": "x", "attack": "nope"}), "unknown attack"),
    (lambda d: d["conditions"].append({"label": "y", "safeguards": "most"}), "unknown safeguard preset"),
    (lambda d: d.update(verbosity="loud"), "verbosity"),
    (lambda d: d.update(acceptance=["fastest_lap"]), "unknown acceptance"),
    (lambda d: d.update(calibration={"CutIn": {"cut_gapp": [1, 2]}}), "calibration key"),
    (lambda d: d["params"].update(aeb={"ttc_threshold": -1.0}), "ttc_threshold"),
    (lambda d: d.update(runs_per_family=0), "runs_per_family"),
])
def test_invalid_configs_are_rejected(mutate, msg):
    import copy
    d = copy.deepcopy(MINIMAL)
    mutate(d)
    with pytest.raises(ConfigurationError, match=msg):
        config_from_dict(d)


def test_missing_file():
    with pytest.raises(ConfigurationError, match="not found"):
        load_config("nowhere.yaml")


def test_labels_must_be_path_safe():
    with pytest.raises(ConfigurationError):
        ExperimentConfig(conditions=(Condition("a/b"),))


def test_presets_cover_single_safeguards():
    assert {k for k, v in SAFEGUARD_PRESETS.items() if sum([v.persistence, v.rate_limit, v.fallback]) == 1} == \
        {"persistence", "rate_limit", "fallback"}


def test_frozen():
    cfg = config_from_dict(MINIMAL)
    with pytest.raises(dataclasses.FrozenInstanceError):
        cfg.root_seed = 1
