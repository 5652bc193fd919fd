"""Flat ``key = value`` run configuration with defaults, file values and flag overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .masking import ScheduleKind
from .model import QuantMode
from .progression import Ordering


@dataclass
class RunConfig:
    # data / architecture
    dataset: str = "digits"
    data_path: str = ""
    train_subset: int = 0
    test_subset: int = 0
    arch: str = "mlp"
    depth: int = 8
    width: int = 64
    batchnorm: bool = True
    # quantization and progression
    mode: str = "stompp_bnn"
    ordering: str = "forward"
    schedule: str = "cubic"
    refresh_r: int = 100
    policy: str = "stochastic"
    steps_per_layer: int = 4
    # recipe
    epochs: int = 40
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 0.0
    batch_size: int = 32
    test_batch_size: int = 256
    augment: str = "auto"
    crop_pad: int = 4
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    # run
    seed: int = 0
    out_dir: str = "runs/default"

    def validate(self):
        choices = {
            "dataset": ("digits", "mnist_idx", "cifar_bin"),
            "arch": ("mlp", "rescnn"),
            "mode": tuple(m.value for m in QuantMode),
            "ordering": tuple(o.value for o in Ordering),
            "schedule": tuple(s.value for s in ScheduleKind),
            "policy": ("stochastic", "deterministic"),
            "augment": ("auto", "on", "off"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} = {getattr(self, key)!r}; expected one of {', '.join(allowed)}")
        if self.weight_decay != 0:
            raise ConfigError("weight_decay must be 0")
        for key in ("depth", "width", "refresh_r", "steps_per_layer", "epochs", "batch_size", "test_batch_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        return self

    def use_augment(self) -> bool:
        if self.augment == "auto":
            return self.dataset == "cifar_bin"
        return self.augment == "on"

    def to_text(self) -> str:
        lines = [f"{f.name} = {_render(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw).validate()


FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _render(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def coerce(key: str, raw: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            try:
                return int(raw)
            except ValueError:
                f = float(raw)  # accepts 1e4
                if not f.is_integer():
                    raise
                return int(f)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            out[key] = coerce(key, val)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


def resolve(path=None, overrides=None):
    """Merge defaults < file < overrides.  Returns ``(config, source_of_each_key)``."""
    values, sources = {}, {f.name: "default" for f in fields(RunConfig)}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        for k, v in parse_config_text(p.read_text(encoding="utf-8"), str(p)).items():
            values[k], sources[k] = v, "file"
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        values[k] = coerce(k, v) if isinstance(v, str) else v
        sources[k] = "flag"
    return RunConfig(**values).validate(), sources
