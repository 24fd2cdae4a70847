"""Run configuration: one YAML file with a section per phase.

Every key has a default, so an empty file (or no file) is a valid config.
Overrides use dotted keys, e.g. ``stage1.lr=0.005``.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .adapt_stage1 import StageOneSwitches
from .data_synth import DomainSpec, TaskPreset, default_domains, preset
from .integrate_stage2 import POLICIES
from .models import BackboneSpec
from .schedule import TrainSchedule


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


SCHEDULE_KEYS = set(TrainSchedule.__dataclass_fields__)

# target gap of the default toy task; see the README for why these values
DEFAULT_TARGET = {"hue_shift": -0.06, "noise": 0.15, "blur": 0.5, "brightness": 0.0}

DEFAULTS: dict = {
    "seed": 0,
    "task": {
        "setting": "non-overlapping",
        "k": 2,
        "size": 64,
        "n_train": 200,
        "n_test": 50,
        "n_source_val": 50,
        "domain_seed": 0,
        "preset_file": None,
        "domains": None,
        "target": dict(DEFAULT_TARGET),
    },
    "model": {"feature_channels": 32, "depth": 3, "downsample": 2},
    "pretrain": {"weights": {}, "total_iterations": 600, "lr": 0.05, "batch_size": 4, "log_interval": 0},
    "stage1": {"weights": {}, "total_iterations": 500, "lr": 0.01, "batch_size": 4, "log_interval": 10,
               "eval_interval": 100, "tau": 0.0},
    "stage2": {"weights": {}, "total_iterations": 300, "lr": 0.002, "batch_size": 4, "log_interval": 10,
               "eval_interval": 100, "policy": "best", "index": 0, "select_count": 40,
               "kd_temperature": 1.0, "kd_direction": "student_teacher"},
    "switches": {"self_training": True, "cross_model_consistency": True, "adversarial": True,
                 "max_squares": True, "model_integration": True},
    "ablation": {"rows": None},
}

STAGE1_EXTRA = {"tau"}
# mappings whose keys are checked downstream (domain-spec fields, loss names)
FREE_MAPPINGS = {"target", "weights"}
STAGE2_EXTRA = {"policy", "index", "select_count", "kd_temperature", "kd_direction"}


def _merge(base: dict, new: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in new.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and key not in FREE_MAPPINGS:
            if not isinstance(val, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            out[key] = _merge(base[key], val, path + ".")
        elif key in FREE_MAPPINGS:
            if not isinstance(val, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            out[key] = {**base[key], **val}
        else:
            out[key] = val
    return out


def parse_override(text: str) -> dict:
    """``a.b=value`` -> ``{"a": {"b": value}}``; the value is read as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from None
    for p in reversed(parts):
        value = {p: value}
    return value


@dataclass
class RunConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        self.validate()

    # -- construction ---------------------------------------------------
    @classmethod
    def load(cls, path=None, overrides=(), seed: int | None = None) -> "RunConfig":
        raw = copy.deepcopy(DEFAULTS)
        base = Path.cwd()
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            try:
                data = yaml.safe_load(p.read_text()) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"{p}: cannot parse YAML ({exc})") from None
            if not isinstance(data, dict):
                raise ConfigError(f"{p}: top level must be a mapping")
            raw = _merge(raw, data)
            base = p.resolve().parent
        for text in overrides:
            raw = _merge(raw, parse_override(text))
        if seed is not None:
            raw["seed"] = int(seed)
        return cls(raw, base)

    # -- checks ---------------------------------------------------------
    def validate(self) -> None:
        try:
            self.task_preset()
            self.domains()
            self.backbone_spec()
            for phase in ("pretrain", "stage1", "stage2"):
                self.schedule(phase)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        sw = self.raw["switches"]
        if not all(isinstance(v, bool) for v in sw.values()):
            raise ConfigError("switches must be booleans")
        if not sw["self_training"]:
            raise ConfigError("switches.self_training cannot be off: Stage I is built on it")
        s2 = self.raw["stage2"]
        if s2["policy"] not in POLICIES:
            raise ConfigError(f"stage2.policy must be one of {POLICIES}")
        if s2["kd_direction"] not in ("student_teacher", "teacher_student"):
            raise ConfigError("stage2.kd_direction must be student_teacher or teacher_student")
        tau = self.raw["stage1"]["tau"]
        if not isinstance(tau, (int, float)) or not 0.0 <= tau <= 1.0:
            raise ConfigError("stage1.tau must lie in [0, 1]")
        rows = self.raw["ablation"]["rows"]
        if rows is not None and not (isinstance(rows, list) and all(isinstance(r, str) for r in rows)):
            raise ConfigError("ablation.rows must be a list of row names")
        if not isinstance(self.raw["seed"], int):
            raise ConfigError("seed must be an integer")

    # -- typed views ----------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def task_preset(self) -> TaskPreset:
        t = self.raw["task"]
        if t["preset_file"]:
            p = Path(t["preset_file"])
            if not p.is_absolute():
                p = self.base_dir / p
            if not p.is_file():
                raise ConfigError(f"preset file not found: {p}")
            try:
                return TaskPreset.from_dict(yaml.safe_load(p.read_text()))
            except (KeyError, TypeError, ValueError, yaml.YAMLError) as exc:
                raise ConfigError(f"{p}: invalid task preset ({exc})") from None
        return preset(t["setting"], int(t["k"]))

    def domains(self) -> list[DomainSpec]:
        t = self.raw["task"]
        k = self.task_preset().k
        if t["domains"] is not None:
            doms = [DomainSpec.from_dict(d) for d in t["domains"]]
        else:
            doms = default_domains(int(t["domain_seed"]), int(t["size"]), k)
            d = doms[-1].to_dict()
            d.update(t["target"])
            doms[-1] = DomainSpec.from_dict(d)
        if len(doms) != k + 1:
            raise ConfigError(f"task has {k} sources; expected {k + 1} domain specs, got {len(doms)}")
        return doms

    def sizes(self) -> dict:
        t = self.raw["task"]
        return {"n_train": int(t["n_train"]), "n_test": int(t["n_test"]),
                "n_source_val": int(t["n_source_val"])}

    def backbone_spec(self) -> BackboneSpec:
        return BackboneSpec(**self.raw["model"])

    def schedule(self, phase: str, seed_offset: int = 0) -> TrainSchedule:
        sec = dict(self.raw[phase])
        extra = {"stage1": STAGE1_EXTRA, "stage2": STAGE2_EXTRA}.get(phase, set())
        for key in extra:
            sec.pop(key, None)
        unknown = set(sec) - SCHEDULE_KEYS
        if unknown:
            raise ConfigError(f"unknown {phase} keys {sorted(unknown)}")
        sec["seed"] = self.seed * 10 + seed_offset
        return TrainSchedule(**sec)

    def stage1_switches(self) -> StageOneSwitches:
        sw = self.raw["switches"]
        return StageOneSwitches(sw["cross_model_consistency"], sw["adversarial"], sw["max_squares"])

    @property
    def tau(self) -> float:
        return float(self.raw["stage1"]["tau"])

    def stage2_options(self) -> dict:
        s2 = self.raw["stage2"]
        return {k: s2[k] for k in sorted(STAGE2_EXTRA)}

    # -- identity -------------------------------------------------------
    def digest(self, *sections: str) -> str:
        """Hash of the given sections (all when none) plus the seed."""
        keys = sections or tuple(sorted(self.raw))
        blob = json.dumps({k: self.raw[k] for k in keys} | {"seed": self.seed}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)
