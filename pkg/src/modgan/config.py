"""Training configuration: YAML/JSON file, ``key=value`` overrides, stable hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    task: str = "translation"
    data: str = ""
    schema: str = ""
    image_size: int = 64
    width: float = 1.0
    n_res: int = 6
    d_layers: int = 0
    z_dim: int = 64
    lambda_cls: float = 1.0
    lambda_cyc: float = 10.0
    lambda_gp: float = 10.0
    batch_size: int = 16
    lr_initial: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epochs_flat: int = 10
    epochs_decay: int = 10
    n_critic: int = 5
    use_mask: bool = True
    use_cyclic: bool = True
    gen_encoder: bool = False
    seed: int = 0
    log_every: int = 10
    keep_checkpoints: int = 3

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.task not in ("translation", "generation"):
            raise ConfigError(f"task must be 'translation' or 'generation', got {self.task!r}")
        for key in ("lambda_cls", "lambda_cyc", "lambda_gp"):
            v = getattr(self, key)
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"{key} must be a finite value >= 0, got {v}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs_flat < 0 or self.epochs_decay < 0:
            raise ConfigError("epochs must be >= 0")
        if self.n_critic < 1:
            raise ConfigError("n_critic must be >= 1")
        if self.width <= 0:
            raise ConfigError("width must be > 0")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")

    @property
    def epochs(self) -> int:
        return self.epochs_flat + self.epochs_decay

    @property
    def disc_layers(self) -> int:
        """Discriminator depth; 0 selects min(6, log2(image_size))."""
        return self.d_layers or min(6, int(math.log2(self.image_size)))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**{k: _coerce(k, v) for k, v in d.items()})

    @classmethod
    def load(cls, path: str | Path | None, overrides: list[str] | None = None) -> "TrainConfig":
        """Defaults, then the file, then ``key=value`` overrides (highest precedence)."""
        d: dict = {}
        if path:
            try:
                loaded = yaml.safe_load(Path(path).read_text()) or {}
            except (OSError, yaml.YAMLError) as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
            if not isinstance(loaded, dict):
                raise ConfigError(f"config {path} must be a mapping")
            d.update(_flatten(loaded))
        for item in overrides or []:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            d[key.strip().rsplit(".", 1)[-1]] = yaml.safe_load(raw) if raw.strip() else ""
        return cls.from_dict(d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _flatten(d: dict, prefix: str = "") -> dict:
    """Nested mappings become dotted keys; the last component must be a field name."""
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return {k.rsplit(".", 1)[-1]: v for k, v in out.items()}


def _coerce(key: str, value):
    field_type = {f.name: f.type for f in dataclasses.fields(TrainConfig)}[key]
    try:
        if field_type == "bool":
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes"):
                    return True
                if value.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(value)
            return bool(value)
        if field_type == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if field_type == "float":
            return float(value)
        return "" if value is None else str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {value!r} for {key} ({field_type})") from None
