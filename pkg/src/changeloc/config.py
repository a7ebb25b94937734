"""Run configuration: a nested TOML file plus ``--set section.key=value`` overrides."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .boundary import LcsConfig
from .dataio import GenSpec
from .dfc import DfcConfig
from .efc import EfcConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "paths": {
        "corpus": "run/gen-data",
        "checkpoints": "run/train",
        "detections": "run/detect",
    },
    "data": {"num_test": 32},
    "dfc": {},
    "efc": {},
    "lcs": {},
    "train": {
        "dfc_epochs": 100,
        "efc_epochs": 40,
        "batch_size": 16,
        "lr": 1e-3,
        "efc_lr": 1e-3,
        "wd": 5e-4,
    },
    "eval": {
        "thresholds": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
        "tolerance": 2,
        "figures": 4,
    },
    "gradcheck": {"eps": 1e-4, "tol": 1e-3, "entries_per_param": 20, "T": 2},
}

# keys accepted in the dataclass-backed sections
_SECTION_TYPES = {"data": GenSpec, "dfc": DfcConfig, "efc": EfcConfig, "lcs": LcsConfig}
_EXTRA_KEYS = {"data": {"num_test"}}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict):
            if not isinstance(out.get(k, {}), dict):
                raise ConfigError(f"{where}{k} is not a section")
            out[k] = _merge(out.get(k, {}), v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip().split("."), value


@dataclass
class RunConfig:
    raw: dict

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    def section(self, name: str) -> dict:
        return self.raw.get(name, {})

    def path(self, name: str) -> Path:
        return Path(self.raw["paths"][name])

    def genspec(self) -> GenSpec:
        kw = {k: v for k, v in self.section("data").items() if k not in _EXTRA_KEYS["data"]}
        kw.setdefault("seed", self.seed)
        return GenSpec(**kw)

    def dfc(self, feature_dim: int | None = None) -> DfcConfig:
        kw = dict(self.section("dfc"))
        if feature_dim is not None:
            kw["feature_dim"] = feature_dim
        return DfcConfig(**kw)

    def efc(self, feature_dim: int | None = None, num_classes: int | None = None) -> EfcConfig:
        kw = dict(self.section("efc"))
        if feature_dim is not None:
            kw["feature_dim"] = feature_dim
        if num_classes is not None:
            kw["num_classes"] = num_classes
        return EfcConfig(**kw)

    def lcs(self) -> LcsConfig:
        return LcsConfig(**self.section("lcs"))

    def canonical(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def validate(self) -> None:
        seed = self.raw.get("seed")
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        for name, cls in _SECTION_TYPES.items():
            allowed = {f.name for f in fields(cls)} | _EXTRA_KEYS.get(name, set())
            unknown = set(self.section(name)) - allowed
            if unknown:
                raise ConfigError(f"unknown keys in [{name}]: {', '.join(sorted(unknown))}")
        for name, value in self.raw.items():
            if name not in DEFAULTS:
                raise ConfigError(f"unknown section {name!r}")
            if isinstance(DEFAULTS[name], dict) and name not in _SECTION_TYPES:
                unknown = set(value) - set(DEFAULTS[name])
                if unknown:
                    raise ConfigError(f"unknown keys in [{name}]: {', '.join(sorted(unknown))}")
        try:
            self.genspec()
            self.dfc()
            self.efc()
            self.lcs()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        t = self.section("train")
        if t["batch_size"] < 1 or t["dfc_epochs"] < 0 or t["efc_epochs"] < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if t["lr"] <= 0 or t["efc_lr"] <= 0 or t["wd"] < 0:
            raise ConfigError("learning rates must be positive and wd non-negative")
        th = self.section("eval")["thresholds"]
        if not th or any(not 0 < x <= 1 for x in th):
            raise ConfigError("eval.thresholds must be a non-empty list in (0, 1]")


def load_config(path=None, overrides=()) -> RunConfig:
    raw = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = _merge(raw, tomllib.load(fh))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    for item in overrides:
        keys, value = parse_override(item)
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {item}: {k} is not a section")
        node[keys[-1]] = value
    cfg = RunConfig(raw)
    cfg.validate()
    return cfg
