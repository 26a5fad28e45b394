"""Run configuration files.

A config is UTF-8 ``key = value`` text with optional sections::

    seed = 3

    [adapt]
    lambda = 0.1
    round1_epochs = 40

    [synth]
    units_per_domain = 24
    shift_scale = 1.5

    [data]
    sensors = 2,3,4,7
    window = 30

Every key is optional; unknown sections or keys are rejected.  The resolved
config (defaults applied) is a plain dict that artifacts embed verbatim.
"""
from __future__ import annotations

import configparser
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .data import DEFAULT_RUL_CAP, DEFAULT_SENSORS, DEFAULT_WINDOW, DomainShift, SynthConfig
from .pipeline import AdaptConfig

SECTIONS = ("adapt", "synth", "data", "benchmark")
_ALIASES = {"lambda": "lam"}


class ConfigError(ValueError):
    pass


@dataclass
class DataOptions:
    sensors: tuple = DEFAULT_SENSORS
    rul_cap: float = DEFAULT_RUL_CAP
    window: int = DEFAULT_WINDOW
    stride: int = 1


@dataclass
class BenchmarkOptions:
    seeds: int = 5
    drop_target_stage: Optional[str] = None


@dataclass
class RunConfig:
    seed: int = 0
    adapt: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)
    data: DataOptions = field(default_factory=DataOptions)
    benchmark: BenchmarkOptions = field(default_factory=BenchmarkOptions)

    def adapt_config(self, **overrides) -> AdaptConfig:
        return AdaptConfig(**{**self.adapt, "seed": self.seed, **overrides})

    def synth_config(self, **overrides) -> SynthConfig:
        d = {**self.synth, "seed": self.seed, **overrides}
        shift = DomainShift(**{k[len("shift_"):]: d.pop(k) for k in list(d) if k.startswith("shift_")})
        return SynthConfig(domain_shift=shift, **d)

    def resolved(self) -> dict:
        """Every setting with defaults filled in, for embedding into artifacts."""
        return {
            "seed": self.seed,
            "adapt": self.adapt_config().to_dict(),
            "synth": self.synth_config().to_dict(),
            "data": {"sensors": list(self.data.sensors), "rul_cap": self.data.rul_cap,
                     "window": self.data.window, "stride": self.data.stride},
            "benchmark": {"seeds": self.benchmark.seeds,
                          "drop_target_stage": self.benchmark.drop_target_stage},
        }


def _parse_value(raw: str):
    text = raw.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", ""):
        return None
    if "," in text:
        return tuple(_parse_value(p) for p in text.split(",") if p.strip())
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _allowed(section: str) -> set:
    if section == "adapt":
        return {f.name for f in fields(AdaptConfig)} - {"seed"} | set(_ALIASES)
    if section == "synth":
        keys = {f.name for f in fields(SynthConfig)} - {"seed", "domain_shift"}
        return keys | {f"shift_{f.name}" for f in fields(DomainShift)}
    if section == "data":
        return {f.name for f in fields(DataOptions)}
    if section == "benchmark":
        return {f.name for f in fields(BenchmarkOptions)}
    raise ConfigError(f"unknown section [{section}]")


def _tuple_fields(cls) -> set:
    """Fields whose default is a tuple, so a lone value still parses as one."""
    return {f.name for f in fields(cls) if isinstance(f.default, tuple)}


_TUPLE_FIELDS = {"adapt": _tuple_fields(AdaptConfig), "data": _tuple_fields(DataOptions)}


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(default_section="__none__", interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[__top__]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "__top__":
            unknown = set(items) - {"seed"}
            if unknown:
                raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
            if "seed" in items:
                cfg.seed = int(items["seed"])
            continue
        allowed = _allowed(section)
        unknown = set(items) - allowed
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
        values = {_ALIASES.get(k, k): _parse_value(v) for k, v in items.items()}
        for k in values.keys() & _TUPLE_FIELDS.get(section, set()):
            if not isinstance(values[k], tuple):
                values[k] = (values[k],)
        if section in ("adapt", "synth"):
            getattr(cfg, section).update(values)
        elif section == "data":
            cfg.data = DataOptions(**{**cfg.data.__dict__, **values})
        else:
            cfg.benchmark = BenchmarkOptions(**{**cfg.benchmark.__dict__, **values})
    try:
        cfg.adapt_config()
        cfg.synth_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return cfg


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def dump_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    import numpy as np

    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
