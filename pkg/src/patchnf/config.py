"""Run configuration: one flat record covering aggregation, adapter, flow,
training, and scoring knobs, loadable from JSON with field-name overrides.

Cross-field constraints are validated before any work starts so the CLI can
fail fast with an actionable message.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .adapter import MODES as ADAPTER_MODES
from .errors import ConfigError

THRESHOLD_POLICIES = ("train-max", "train-quantile", "fixed")


@dataclass
class RunConfig:
    # aggregation
    patch_size: int = 3
    scale_count: int = 3
    base_size: list[int] | None = None  # [H_g, W_g]; None -> inferred from data
    align_corners: bool = True
    # adapter
    channels_out: int = 768
    adapter_mode: str = "frozen-random"
    ortho_penalty: float = 1e-2
    # flow
    flow_steps: int = 1
    bottleneck: int = 128
    clamp: float = 2.0
    # training
    learning_rate: float = 2e-4
    weight_decay: float = 1e-5
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    precision: str = "f32"
    grad_check: bool = False
    shuffle: bool = True
    # scoring / evaluation
    image_size: list[int] = field(default_factory=lambda: [768, 768])
    threshold_policy: str = "train-max"
    threshold_param: float = 0.95
    fpr_limit: float = 0.3
    threads: int = 1

    def validate(self) -> "RunConfig":
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch_size must be odd and >= 1, got {self.patch_size}")
        if self.scale_count not in (1, 2, 3):
            raise ConfigError(f"scale_count must be in 1..3, got {self.scale_count}")
        if self.channels_out < 2 or self.channels_out % 2 != 0:
            raise ConfigError(f"channels_out must be even and >= 2, got {self.channels_out}")
        if self.adapter_mode not in ADAPTER_MODES:
            raise ConfigError(f"adapter_mode must be one of {ADAPTER_MODES}, got {self.adapter_mode!r}")
        if self.flow_steps < 1:
            raise ConfigError(f"flow_steps must be >= 1, got {self.flow_steps}")
        if self.bottleneck < 1:
            raise ConfigError(f"bottleneck must be >= 1, got {self.bottleneck}")
        if self.clamp <= 0:
            raise ConfigError(f"clamp must be positive, got {self.clamp}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.threshold_policy not in THRESHOLD_POLICIES:
            raise ConfigError(
                f"threshold_policy must be one of {THRESHOLD_POLICIES}, got {self.threshold_policy!r}"
            )
        if self.threshold_policy == "train-quantile" and not (0 < self.threshold_param <= 1):
            raise ConfigError(f"quantile must be in (0, 1], got {self.threshold_param}")
        if not (0 < self.fpr_limit <= 1):
            raise ConfigError(f"fpr_limit must be in (0, 1], got {self.fpr_limit}")
        if self.base_size is not None and (
            len(self.base_size) != 2 or any(int(v) < 1 for v in self.base_size)
        ):
            raise ConfigError(f"base_size must be [H, W] with positive extents, got {self.base_size}")
        if len(self.image_size) != 2 or any(int(v) < 1 for v in self.image_size):
            raise ConfigError(f"image_size must be [H, W] with positive extents, got {self.image_size}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def dtype(self):
        import numpy as np

        return np.float32 if self.precision == "f32" else np.float64


_FIELDS = {f.name: f for f in fields(RunConfig)}


def config_from_dict(values: dict, origin: str = "config") -> RunConfig:
    unknown = set(values) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"{origin}: unknown config fields {sorted(unknown)}")
    return RunConfig(**values).validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        values = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_dict(values, str(path))


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply CLI-provided key=value overrides on top of a loaded config."""
    values = cfg.to_dict()
    for key, raw in overrides.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config field {key!r}")
        values[key] = _coerce(key, raw)
    return config_from_dict(values, "overrides")


def _coerce(key: str, raw):
    if not isinstance(raw, str):
        return raw
    ftype = str(_FIELDS[key].type)
    if "bool" in ftype:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if "list" in ftype:
        if raw.lower() in ("none", "null"):
            return None
        return [int(v) for v in raw.split(",")]
    if "int" in ftype:
        return int(raw)
    if "float" in ftype:
        return float(raw)
    return raw
