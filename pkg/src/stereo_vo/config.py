"""Pipeline configuration and its flat key=value file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    coupling_lambda: float = 1.0  # static-stereo energy weight
    window_keyframes: int = 7
    active_points: int = 2000
    candidate_budget: int = 800
    huber_gamma: float = 9.0
    gradient_constant: float = 50.0
    pyramid_levels: int = 5
    weight_flow: float = 1.0 / 17.0
    weight_flow_translation: float = 1.0 / 17.0
    weight_brightness: float = 1.0 / 3.0
    freeze_intrinsics: bool = True
    seed: int = 0
    output_dir: str = "out"

    def __post_init__(self):
        positive = ("window_keyframes", "active_points", "candidate_budget",
                    "huber_gamma", "gradient_constant", "pyramid_levels",
                    "weight_flow", "weight_flow_translation", "weight_brightness")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"config field {name} must be positive, got {getattr(self, name)}")
        if self.coupling_lambda < 0:
            raise ConfigError(f"coupling_lambda must be >= 0, got {self.coupling_lambda}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}


def _parse_value(name: str, raw: str, lineno: int):
    ftype = _FIELD_TYPES[name]
    try:
        if ftype == "bool":
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config line {lineno}: bad value for {name}: {exc}") from exc


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Parse 'key = value' lines (comments with #) into a PipelineConfig;
    errors carry the offending line number."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, value, lineno)
    base_values = dataclasses.asdict(base) if base is not None else {}
    base_values.update(values)
    return PipelineConfig(**base_values)


def load_config(path: str, base: PipelineConfig | None = None) -> PipelineConfig:
    with open(path, "r", encoding="ascii") as fh:
        return parse_config(fh.read(), base)


def format_config(cfg: PipelineConfig) -> str:
    lines = []
    for f in dataclasses.fields(PipelineConfig):
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"
