"""Run configuration: a single YAML file with environment interpolation.

``${VAR}`` inside string values is replaced from the environment at load
time (API keys stay out of the file: endpoint sections name the variable
holding the key, never the key itself). Unknown keys are rejected so
typos fail loudly. CLI flags override whatever the file says.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import SchemaError

_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


@dataclass
class PathsConfig:
    scene_logs: str | None = None
    cache_dir: str = "reason-cache"
    output_dir: str = "out"


@dataclass
class EndpointConfig:
    url: str | None = None
    model: str = ""
    api_key_env: str | None = None
    timeout: float = 120.0
    max_attempts: int = 4
    base_delay: float = 0.5
    max_in_flight: int = 8


@dataclass
class EndpointsConfig:
    navigator: EndpointConfig = field(default_factory=EndpointConfig)
    driver: EndpointConfig = field(default_factory=EndpointConfig)


@dataclass
class SamplingConfig:
    k: int = 6
    navigator_temperature: float = 0.2
    driver_temperature: float = 0.8
    max_tokens: int = 512
    seed: int | None = None


@dataclass
class ThresholdsConfig:
    stop_speed: float = 0.5
    stop_ratio: float = 0.5
    straight_deg: float = 8.0
    hard_deg: float = 30.0


@dataclass
class DatasetConfig:
    window_frames: int = 17
    stride_frames: int = 2
    split_file: str | None = None
    thresholds: ThresholdsConfig = field(default_factory=ThresholdsConfig)


@dataclass
class FittingConfig:
    lam: float = 1.0
    refine: bool = True
    kappa_max: float = 0.3


@dataclass
class EvalConfig:
    reason: bool = True
    command: bool = True
    images: bool = True
    mode: str = "waypoint"
    include_fallback: bool = True


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    endpoints: EndpointsConfig = field(default_factory=EndpointsConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    fitting: FittingConfig = field(default_factory=FittingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _interpolate(value, path: str):
    if isinstance(value, str):
        def repl(match: re.Match) -> str:
            name = match.group(1)
            if name not in os.environ:
                raise SchemaError(f"environment variable {name} is not set", path=path)
            return os.environ[name]

        return _ENV_RE.sub(repl, value)
    if isinstance(value, dict):
        return {k: _interpolate(v, f"{path}.{k}") for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v, f"{path}[{i}]") for i, v in enumerate(value)]
    return value


def _build(cls, data: dict, path: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise SchemaError(f"unknown keys {sorted(unknown)}", path=path)
    kwargs = {}
    for name, value in data.items():
        nested = {
            "paths": PathsConfig,
            "endpoints": EndpointsConfig,
            "navigator": EndpointConfig,
            "driver": EndpointConfig,
            "sampling": SamplingConfig,
            "dataset": DatasetConfig,
            "thresholds": ThresholdsConfig,
            "fitting": FittingConfig,
            "eval": EvalConfig,
        }.get(name)
        if nested is not None and isinstance(value, dict):
            kwargs[name] = _build(nested, value, f"{path}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise SchemaError(str(exc), path=path) from exc


def load_config(path: str | Path | None) -> RunConfig:
    """Load a config file, or the defaults when ``path`` is None.

    Referenced input paths (scene logs, split file) must exist; output and
    cache directories are created later by whichever command needs them.
    """
    if path is None:
        return RunConfig()
    raw = yaml.safe_load(Path(path).read_text("utf-8"))
    if raw is None:
        return RunConfig()
    if not isinstance(raw, dict):
        raise SchemaError("config root must be a mapping", path=str(path))
    config = _build(RunConfig, _interpolate(raw, str(path)), path=str(path))

    for name, value in (
        ("paths.scene_logs", config.paths.scene_logs),
        ("dataset.split_file", config.dataset.split_file),
    ):
        if value is not None and not Path(value).exists():
            raise SchemaError(f"referenced path does not exist: {value}", path=f"{path}:{name}")
    return config


def dump_config(config: RunConfig) -> str:
    """Render the effective config as YAML (API keys are never stored)."""

    def plain(obj):
        if hasattr(obj, "__dataclass_fields__"):
            return {f.name: plain(getattr(obj, f.name)) for f in fields(obj)}
        return obj

    return yaml.safe_dump(plain(config), sort_keys=False)
