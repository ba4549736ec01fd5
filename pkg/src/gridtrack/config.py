"""Flat key-value run configuration with exact round-tripping.

The on-disk format is one `key = value` per line, `#` comments, no sections.
Unknown keys are rejected. Every run writes its fully resolved configuration
(defaults included) next to its outputs, which together with the seed is
sufficient to reproduce the run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import latent_grid as lg
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig(TrainConfig):
    # inputs / outputs
    clouds_dir: str = ""
    reference_mesh: str = ""
    output_dir: str = "run_out"
    # synthetic generation (synth_kind empty = use files)
    synth_kind: str = ""
    synth_frames: int = 17
    synth_points: int = 2000
    synth_subdivisions: int = 3
    # metric reporting
    compute_metrics: bool = True
    fscore_threshold_pct: float = 0.5
    metric_surface_samples: int = 0  # 0 = compare mesh vertices directly

    def train_config(self) -> TrainConfig:
        keep = {f.name for f in dataclasses.fields(TrainConfig)}
        values = {k: v for k, v in dataclasses.asdict(self).items() if k in keep}
        return TrainConfig(**values)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text: str, target_type) -> object:
    text = text.strip()
    if target_type is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if target_type is int:
        return int(text)
    if target_type is float:
        return float(text)  # accepts inf / nan spellings
    return text


def emit(config: RunConfig) -> str:
    """Serialized form; `parse(emit(c))` reproduces `c` exactly."""
    lines = ["# gridtrack run configuration"]
    for name, f in _FIELDS.items():
        lines.append(f"{name} = {_format_value(getattr(config, name))}")
    tc = config.train_config()
    lams = ", ".join(repr(v) for v in tc.grid_lambdas())
    rates = ", ".join(repr(v) for v in tc.grid_learning_rates())
    lines.append(f"# resolved per-level smoothing weights: {lams}")
    lines.append(f"# resolved per-level learning rates: {rates}")
    return "\n".join(lines) + "\n"


def parse(text: str) -> RunConfig:
    """Parse the flat key-value format, rejecting unknown keys."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown configuration key {key!r}")
        field_type = _FIELDS[key].type
        py_type = {"int": int, "float": float, "bool": bool, "str": str}.get(
            field_type if isinstance(field_type, str) else field_type.__name__, str)
        try:
            values[key] = _parse_value(value, py_type)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return parse(path.read_text())


def save(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(emit(config))
