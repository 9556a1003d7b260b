"""Run configuration files: YAML sections mapped onto the config dataclasses.

Layout::

    data:    {name: mnist, root: null}
    output:  {dir: runs/default}
    distill: {ipc: 1, iterations: 2000, ...}   # DistillConfig minus policy/loss
    policy:  {policy: jitter, P: 8, ...}
    loss:    {tau: 0.7, w_c: 1.0, ...}
    eval:    {epochs: 300, repeats: 3, ...}
    mue:     {ds: [5, 6, 7, 8, 9, 10]}

Every key is optional. Unknown sections or keys raise ``ConfigError``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional

import yaml

from .engine import DistillConfig
from .evaluation import EvalConfig, MueConfig
from .losses import LossConfig
from .policies import PolicyConfig


class ConfigError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads ``1e-3`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


def _yaml_load(text: str):
    return yaml.load(text, Loader=_Loader)


@dataclass
class DataConfig:
    name: str = "mnist"
    root: Optional[str] = None


@dataclass
class OutputConfig:
    dir: str = "runs/default"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    mue: MueConfig = field(default_factory=MueConfig)

    def to_dict(self) -> dict:
        d = {
            "data": dataclasses.asdict(self.data),
            "output": dataclasses.asdict(self.output),
            "distill": {k: v for k, v in dataclasses.asdict(self.distill).items() if k not in ("policy", "loss")},
            "policy": dataclasses.asdict(self.distill.policy),
            "loss": dataclasses.asdict(self.distill.loss),
            "eval": dataclasses.asdict(self.eval),
            "mue": dataclasses.asdict(self.mue),
        }
        return _plain(d)

    def hash(self) -> str:
        """sha256 over the canonical JSON of everything except the output location."""
        d = self.to_dict()
        d.pop("output")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"), allow_nan=False)
        return hashlib.sha256(blob.encode()).hexdigest()

    def output_dir(self) -> Path:
        out = Path(self.output.dir)
        root = os.environ.get("UDD_OUTPUT_ROOT")
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


_SECTIONS = {
    "data": DataConfig,
    "output": OutputConfig,
    "distill": DistillConfig,
    "policy": PolicyConfig,
    "loss": LossConfig,
    "eval": EvalConfig,
    "mue": MueConfig,
}
_NESTED = ("policy", "loss")


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _fields(cls) -> set[str]:
    names = {f.name for f in dataclasses.fields(cls)}
    return names - set(_NESTED) if cls is DistillConfig else names


def _build(cls, values: dict, section: str):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def from_dict(raw: Optional[dict]) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    for section, body in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config key {section!r}")
        if body is None:
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        allowed = _fields(_SECTIONS[section])
        for key in body:
            if key not in allowed:
                raise ConfigError(f"unknown config key '{section}.{key}'")
    sec = {name: dict(raw.get(name) or {}) for name in _SECTIONS}
    distill = dict(sec["distill"])
    distill["policy"] = _build(PolicyConfig, sec["policy"], "policy")
    distill["loss"] = _build(LossConfig, sec["loss"], "loss")
    return RunConfig(
        data=_build(DataConfig, sec["data"], "data"),
        output=_build(OutputConfig, sec["output"], "output"),
        distill=_build(DistillConfig, distill, "distill"),
        eval=_build(EvalConfig, sec["eval"], "eval"),
        mue=_build(MueConfig, sec["mue"], "mue"),
    )


def parse_override(item: str) -> tuple[str, str, Any]:
    """``section.key=value`` with the value read as a YAML scalar or list."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not section.key=value")
    path, text = item.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"override key {path!r} is not section.key")
    try:
        value = _yaml_load(text) if text.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {item!r}: {exc}") from None
    return parts[0], parts[1], value


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the file, then ``section.key=value`` overrides."""
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = _yaml_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    raw = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    for item in overrides:
        section, key, value = parse_override(item)
        body = raw.setdefault(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        body[key] = value
    return from_dict(raw)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)
