"""Strict loader for JSON run files.

Every section is optional and every field has a default; unknown keys are
errors that name the full key path.  A complete file looks like::

    {
      "machine":    {"cores": 2, "granule_size": 4096, "window_scale": 1},
      "gpt":        {"labels": [[2304, 2320, "realm"]],
                     "access": {"normal": ["normal", "full-access"]}},
      "process":    {"n_pas": 3, "pim_capacity": 4096,
                     "delegations": [{"start": 2560, "end": 2568, "tag": "data"}]},
      "cost_model": {"l1_switch": 74.13},
      "workload":   {"workers": 2, "domains_per_core": 28, "alloc_policy": "affinity"},
      "program":    "programs/zlog.toy",
      "scenario":   {"name": "...", "expected": "PermFault", "setup": [], "attack": []}
    }
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Optional

from .domains import CostModel
from .gpt import PasLabel


class ConfigError(ValueError):
    pass


@dataclass
class MachineSection:
    cores: int = 2
    granule_size: int = 4096
    window_scale: int = 1


@dataclass
class GptSection:
    labels: list = field(default_factory=list)      # [start, end, label] granule ranges
    access: Optional[dict] = None                   # overrides for the state x label table


@dataclass
class Delegation:
    start: int
    end: int
    tag: str = "data"


@dataclass
class ProcessSection:
    n_pas: int = 3
    pim_capacity: int = 4096
    delegations: List[Delegation] = field(default_factory=list)


@dataclass
class WorkloadSection:
    workers: int = 2
    connections: int = 1000
    requests_per_connection: int = 30
    domains_per_core: int = 7
    interleave: str = "round_robin_arrival"
    seed: Optional[int] = None
    burst: int = 5
    alloc_policy: str = "affinity"
    reuse_freed: bool = True
    n_pas: Optional[int] = None


@dataclass
class RunConfig:
    machine: MachineSection = field(default_factory=MachineSection)
    gpt: GptSection = field(default_factory=GptSection)
    process: ProcessSection = field(default_factory=ProcessSection)
    cost_model: CostModel = field(default_factory=CostModel)
    workload: WorkloadSection = field(default_factory=WorkloadSection)
    program: Optional[str] = None
    scenario: Optional[dict] = None

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def workload_config(self, **overrides):
        from .workload import WorkloadConfig
        args = dataclasses.asdict(self.workload)
        args.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return WorkloadConfig(cost_model=self.cost_model, **args)
        except ValueError as exc:
            raise ConfigError(f"workload: {exc}") from None

    def access_table(self):
        if self.gpt.access is None:
            return None
        from .oracles import parse_table
        try:
            return parse_table(self.gpt.access)
        except KeyError as exc:
            raise ConfigError(f"gpt.access: {exc.args[0]}") from None


_SCALARS = {int: (int,), float: (int, float), str: (str,), bool: (bool,)}


def _check_scalar(value, typ, path):
    ok = _SCALARS.get(typ)
    if ok is None:
        return value
    if isinstance(value, bool) and typ is not bool:
        raise ConfigError(f"{path}: expected {typ.__name__}, got bool")
    if not isinstance(value, ok):
        raise ConfigError(f"{path}: expected {typ.__name__}, got {type(value).__name__}")
    return typ(value)


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown key '{where}'")
    hints = _hints(cls)
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _convert(hints[name], value, sub)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from None


def _hints(cls):
    return typing.get_type_hints(cls)


def _convert(hint, value, path):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if value is None:
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    if origin in (list, List) or hint is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        if args and dataclasses.is_dataclass(args[0]):
            return [_build(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
        return value
    if hint is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return value
    return _check_scalar(value, hint, path)


def _validate(cfg: RunConfig) -> None:
    names = {l.value for l in PasLabel}
    for i, item in enumerate(cfg.gpt.labels):
        if not (isinstance(item, list) and len(item) == 3 and item[2] in names):
            raise ConfigError(f"gpt.labels[{i}]: expected [start, end, label] "
                              f"with label in {sorted(names)}")
    cfg.access_table()


def parse_config(data: Any) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    _validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return parse_config(data)
