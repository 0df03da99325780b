"""Experiment configuration: YAML in, frozen dataclasses out.

Unknown keys are rejected everywhere so a typo in a config never silently
falls back to a default. The layout mirrors the dataclasses one-to-one::

    name: default
    root_seed: 20240917
    runs_per_family: 120
    families: [HighwayFollowing, ...]      # optional, defaults to all six
    duration: 40.0
    output_dir: runs/default
    verbosity: metrics-only                # or: full
    parallelism: 1
    calibration: {HighwayFollowing: {hazard_prob: 1.0}}
    params: {aeb: {ttc_threshold: 1.2}, acc: {...}, tracker: {...}, ...}
    attacks: {fn: {kind: false_negative, anchor: critical, start_t: [-1, 0], duration: [0.5, 0.8]}}
    conditions:
      - {label: baseline}
      - {label: fn, attack: fn}
      - {label: fn+all, attack: fn, safeguards: all}
    acceptance: [baseline_safety, fn_effect]
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import yaml

from .controllers import AccConfig, AebConfig, SafeguardConfig, SAFEGUARDS_OFF, SAFEGUARDS_ON
from .dynamics import ActuatorModel
from .errors import ConfigurationError
from .perception import SensorConfig
from .scenarios import FAMILIES, load_calibration
from .sim import AttackPlan, Condition, FollowerModel, SimParams
from .tracker import TrackerConfig

VERBOSITY = ("full", "metrics-only")

SAFEGUARD_PRESETS: Dict[str, SafeguardConfig] = {
    "off": SAFEGUARDS_OFF,
    "all": SAFEGUARDS_ON,
    "persistence": SafeguardConfig(persistence=True),
    "rate_limit": SafeguardConfig(rate_limit=True),
    "fallback": SafeguardConfig(fallback=True),
}

_PARAM_SECTIONS = {
    "actuator": ActuatorModel,
    "sensor": SensorConfig,
    "tracker": TrackerConfig,
    "aeb": AebConfig,
    "acc": AccConfig,
    "follower": FollowerModel,
}
_PARAM_SCALARS = ("frame_dt", "dt_phys", "lane_overlap_threshold")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    root_seed: int = 20240917
    runs_per_family: int = 120
    families: Tuple[str, ...] = FAMILIES
    duration: float = 40.0
    output_dir: str = "runs/experiment"
    verbosity: str = "metrics-only"
    parallelism: int = 1
    calibration: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    params: SimParams = field(default_factory=SimParams)
    conditions: Tuple[Condition, ...] = (Condition("baseline"),)
    acceptance: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.runs_per_family < 1:
            raise ConfigurationError("runs_per_family must be >= 1")
        if not self.families:
            raise ConfigurationError("at least one scenario family is required")
        for fam in self.families:
            if fam not in FAMILIES:
                raise ConfigurationError(f"unknown scenario family {fam!r}; expected one of {FAMILIES}")
        if len(set(self.families)) != len(self.families):
            raise ConfigurationError("duplicate scenario family")
        if not self.conditions:
            raise ConfigurationError("at least one condition is required")
        labels = [c.label for c in self.conditions]
        dup = sorted({x for x in labels if labels.count(x) > 1})
        if dup:
            raise ConfigurationError(f"duplicate condition labels: {dup}")
        for lab in labels:
            if not lab or "/" in lab or lab != lab.strip():
                raise ConfigurationError(f"bad condition label {lab!r}")
        if self.verbosity not in VERBOSITY:
            raise ConfigurationError(f"verbosity must be one of {VERBOSITY}")
        if self.parallelism < 1:
            raise ConfigurationError("parallelism must be >= 1")
        if not self.duration > 0:
            raise ConfigurationError("duration must be positive")
        load_calibration(self.calibration)  # validates override keys
        from .acceptance import CHECKS
        unknown = [a for a in self.acceptance if a not in CHECKS]
        if unknown:
            raise ConfigurationError(f"unknown acceptance checks {unknown}; available: {sorted(CHECKS)}")

    def condition(self, label: str) -> Condition:
        for c in self.conditions:
            if c.label == label:
                return c
        raise KeyError(label)


# --------------------------------------------------------------------------
# parsing helpers


def _strict(section: str, data: Any, allowed: Sequence[str]) -> Dict[str, Any]:
    if data is None:
        return {}
    if not isinstance(data, Mapping):
        raise ConfigurationError(f"{section}: expected a mapping, got {type(data).__name__}")
    extra = sorted(set(data) - set(allowed))
    if extra:
        raise ConfigurationError(f"{section}: unknown keys {extra}")
    return dict(data)


def _build(cls, section: str, data: Any, base=None):
    names = [f.name for f in fields(cls)]
    kw = _strict(section, data, names)
    for k, v in kw.items():
        if isinstance(v, list):
            kw[k] = tuple(v)
    try:
        return replace(base, **kw) if base is not None else cls(**kw)
    except TypeError as exc:
        raise ConfigurationError(f"{section}: {exc}") from None


def parse_params(data: Any) -> SimParams:
    kw = _strict("params", data, list(_PARAM_SECTIONS) + list(_PARAM_SCALARS))
    out: Dict[str, Any] = {}
    for name, cls in _PARAM_SECTIONS.items():
        if name in kw:
            out[name] = _build(cls, f"params.{name}", kw[name])
    for name in _PARAM_SCALARS:
        if name in kw:
            out[name] = float(kw[name])
    return SimParams(**out)


def parse_safeguards(data: Any, where: str) -> SafeguardConfig:
    if data is None:
        return SAFEGUARDS_OFF
    if isinstance(data, str):
        if data not in SAFEGUARD_PRESETS:
            raise ConfigurationError(f"{where}: unknown safeguard preset {data!r}; "
                                     f"expected one of {sorted(SAFEGUARD_PRESETS)}")
        return SAFEGUARD_PRESETS[data]
    return _build(SafeguardConfig, where, data)


def parse_attack(data: Any, where: str) -> AttackPlan:
    return _build(AttackPlan, where, data)


def parse_conditions(data: Any, attacks: Mapping[str, AttackPlan]) -> Tuple[Condition, ...]:
    if not isinstance(data, list):
        raise ConfigurationError("conditions: expected a list")
    out = []
    for i, item in enumerate(data):
        where = f"conditions[{i}]"
        kw = _strict(where, item, ("label", "attack", "safeguards"))
        if "label" not in kw:
            raise ConfigurationError(f"{where}: missing label")
        att = kw.get("attack")
        if att is None:
            plan = AttackPlan()
        elif isinstance(att, str):
            if att not in attacks:
                raise ConfigurationError(f"{where}: unknown attack {att!r}")
            plan = attacks[att]
        else:
            plan = parse_attack(att, f"{where}.attack")
        out.append(Condition(str(kw["label"]), plan, parse_safeguards(kw.get("safeguards"), f"{where}.safeguards")))
    return tuple(out)


_TOP_KEYS = ("name", "root_seed", "runs_per_family", "families", "duration", "output_dir", "verbosity",
             "parallelism", "calibration", "params", "attacks", "conditions", "acceptance")


def config_from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    kw = _strict("config", data, _TOP_KEYS)
    raw_attacks = kw.pop("attacks", None) or {}
    if not isinstance(raw_attacks, Mapping):
        raise ConfigurationError("attacks: expected a mapping of name -> attack")
    attacks = {str(name): parse_attack(spec, f"attacks.{name}") for name, spec in raw_attacks.items()}
    out: Dict[str, Any] = {}
    for key in ("name", "output_dir", "verbosity"):
        if key in kw:
            out[key] = str(kw[key])
    for key in ("root_seed", "runs_per_family", "parallelism"):
        if key in kw:
            out[key] = int(kw[key])
    if "duration" in kw:
        out["duration"] = float(kw["duration"])
    if "families" in kw:
        out["families"] = tuple(kw["families"])
    if "calibration" in kw:
        out["calibration"] = dict(kw["calibration"] or {})
    if "params" in kw:
        out["params"] = parse_params(kw["params"])
    if "conditions" in kw:
        out["conditions"] = parse_conditions(kw["conditions"], attacks)
    if "acceptance" in kw:
        out["acceptance"] = tuple(str(x) for x in (kw["acceptance"] or ()))
    return ExperimentConfig(**out)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        data = yaml.safe_load(p.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {p}") from None
    if not isinstance(data, Mapping):
        raise ConfigurationError(f"{p}: top level must be a mapping")
    return config_from_dict(data)


def _plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    return obj


def config_to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Fully resolved config (every default spelled out); round-trips through ``config_from_dict``."""
    d = _plain(cfg)
    d["conditions"] = [{"label": c.label, "attack": _plain(c.attack), "safeguards": _plain(c.safeguards)}
                       for c in cfg.conditions]
    return d
