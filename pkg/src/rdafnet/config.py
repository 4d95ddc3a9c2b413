"""Flat key-value run configuration.

A config file is a YAML mapping whose keys are the field names of the
network, block, optimizer, loss and data settings, for example::

    base_filters: 16
    blocks_per_stage: [2]
    use_afm: false
    lr_initial: 0.003
    crop: 64
    epochs: 40

Unset keys keep the values of the chosen preset.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

import yaml

from .blocks import RDAFBConfig
from .losses import LossConfig
from .network import NetworkConfig, multi_stage_config, single_stage_config
from .trainer import DataConfig, DeskProtocol, OptimizerConfig, desk_configs


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field {field_name!r}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class RunConfig:
    net: NetworkConfig
    opt: OptimizerConfig = OptimizerConfig()
    loss: LossConfig = LossConfig()
    data: DataConfig = DataConfig()
    epochs: int = 1


def preset(name: str) -> RunConfig:
    if name == "single":
        return RunConfig(single_stage_config())
    if name == "multi":
        return RunConfig(multi_stage_config())
    if name == "desk":
        p = DeskProtocol()
        net, opt = desk_configs(filters=p.filters, blocks=p.blocks, lr=p.lr)
        return RunConfig(net, opt, data=DataConfig(crop=p.crop, batch_size=p.batch_size), epochs=1)
    raise ConfigError("preset", f"unknown preset {name!r}; choose single, multi or desk")


_NET = {f.name for f in fields(NetworkConfig)} - {"block"}
_BLOCK = {f.name for f in fields(RDAFBConfig)} - {"filters"}
_OPT = {f.name for f in fields(OptimizerConfig)}
_LOSS = {f.name for f in fields(LossConfig)}
_DATA = {f.name for f in fields(DataConfig)}
_ALIASES = {"lambda": "lam", "filters": "base_filters"}


def _check_type(key: str, value, template):
    if isinstance(template, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
    elif isinstance(template, int) or key in ("max_steps", "rdb_growth"):
        if value is None and key in ("max_steps", "rdb_growth"):
            return value
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
    elif isinstance(template, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        value = float(value)
    elif isinstance(template, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def apply_overrides(base: RunConfig, values: dict) -> RunConfig:
    """Overlay flat ``values`` on ``base``, validating names, types and invariants."""
    groups: dict[str, dict] = {"net": {}, "block": {}, "opt": {}, "loss": {}, "data": {}}
    epochs = base.epochs
    block_variant = None
    for raw_key, value in values.items():
        key = _ALIASES.get(str(raw_key), str(raw_key))
        if isinstance(value, dict):
            raise ConfigError(raw_key, "nested sections are not supported; use flat keys")
        if key == "epochs":
            epochs = _check_type(key, value, 0)
            if epochs < 0:
                raise ConfigError(key, "must be >= 0")
        elif key == "block_variant":
            block_variant = _check_type(key, value, "")
        elif key == "blocks_per_stage":
            items = value if isinstance(value, list) else [value]
            groups["net"][key] = tuple(_check_type(key, v, 0) for v in items)
        elif key in _NET:
            groups["net"][key] = _check_type(key, value, getattr(base.net, key))
        elif key in _BLOCK:
            groups["block"][key] = _check_type(key, value, getattr(base.net.block, key))
        elif key in _OPT:
            groups["opt"][key] = _check_type(key, value, getattr(base.opt, key))
        elif key in _LOSS:
            groups["loss"][key] = _check_type(key, value, getattr(base.loss, key))
        elif key in _DATA:
            groups["data"][key] = _check_type(key, value, getattr(base.data, key))
        else:
            raise ConfigError(raw_key, "unknown field")

    block = base.net.block
    if block_variant is not None:
        try:
            v = RDAFBConfig.from_variant(block_variant)
        except ValueError as exc:
            raise ConfigError("block_variant", str(exc))
        block = replace(block, use_am=v.use_am, use_afm=v.use_afm, use_lrl=v.use_lrl)
    try:
        block = replace(block, **groups["block"])
    except ValueError as exc:
        keys = list(groups["block"]) or ["block_variant"]
        raise ConfigError(next((k for k in keys if k in str(exc)), keys[0]), str(exc))

    net_kw = groups["net"]
    stages = net_kw.get("stages", base.net.stages)
    bps = net_kw.get("blocks_per_stage", base.net.blocks_per_stage)
    if len(bps) == 1 and stages > 1:
        bps = bps * stages
    elif "stages" in net_kw and "blocks_per_stage" not in net_kw and len(bps) != stages:
        bps = (bps[0],) * stages
    net_kw["blocks_per_stage"] = bps
    parts = []
    for name, build in (
        ("net", lambda: replace(base.net, block=block, **net_kw)),
        ("opt", lambda: replace(base.opt, **groups["opt"])),
        ("loss", lambda: replace(base.loss, **groups["loss"])),
        ("data", lambda: replace(base.data, **groups["data"])),
    ):
        try:
            parts.append(build())
        except ValueError as exc:
            keys = list(groups[name]) or (["blocks_per_stage"] if name == "net" else [name])
            raise ConfigError(next((k for k in keys if k in str(exc)), keys[0]), str(exc))
    net, opt, loss, data = parts
    for key in ("crop", "batch_size"):
        if getattr(data, key) < 1:
            raise ConfigError(key, "must be >= 1")
    return RunConfig(net, opt, loss, data, epochs)


def load_config(path, base: RunConfig) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror or exc}")
    try:
        values = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"{path} is not valid YAML: {exc}")
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError("config", f"{path} must hold a key-value mapping")
    return apply_overrides(base, values)
