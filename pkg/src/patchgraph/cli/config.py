"""Run configuration: JSON file plus ``--key value`` overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path

from ..errors import ConfigError, UsageError


@dataclass
class RunConfig:
    seed: int = 0
    # graph
    k: int = 8
    patch_size: int = 256
    # model
    n_layers: int = 4
    d_model: int = 128
    d_attn: int = 128
    n_bins: int = 4
    gated_attention: bool = False
    dense_include_input: bool = True
    # optimisation
    learning_rate: float = 2e-4
    weight_decay: float = 1e-5
    epochs: int = 20
    accumulation_steps: int = 32
    folds: int = 5
    workers: int = 1
    # ablations
    zero_layers: bool = False
    feature_space_edges: bool = False
    # paths
    data_dir: str = "cohort"
    output_dir: str = "run"
    predictions: str = ""
    # synth
    n_patients: int = 200
    grid_side: int = 8
    n_phenotypes: int = 4
    feature_dim: int = 64
    noise_sigma: float = 0.1
    # segment
    raster: str = ""
    downsample_factor: int = 32
    min_foreground_fraction: float = 0.5
    slide_id: str = "slide0"
    # per-patient subcommands
    patient: str = ""
    fold: int = -1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.folds < 2:
            raise ConfigError("folds: must be >= 2")
        if self.accumulation_steps < 1:
            raise ConfigError("accumulation_steps: must be >= 1")
        if self.k < 1:
            raise ConfigError("k: must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs: must be >= 0")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate/weight_decay: must be >= 0")
        if self.n_layers < 0 or self.d_model < 1 or self.d_attn < 1 or self.n_bins < 1:
            raise ConfigError("n_layers/d_model/d_attn/n_bins: invalid size")
        if self.workers < 1:
            raise ConfigError("workers: must be >= 1")

    @property
    def effective_layers(self) -> int:
        return 0 if self.zero_layers else self.n_layers

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, raw, source: str):
    kind = _FIELDS[name].type
    try:
        if kind == "bool":
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() in ("1", "true", "yes", "on"):
                return True
            if str(raw).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            if isinstance(raw, bool) or (isinstance(raw, float) and not raw.is_integer()):
                raise ValueError(raw)
            return int(raw)
        if kind == "float":
            if isinstance(raw, bool):
                raise ValueError(raw)
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot read {raw!r} from {source} as {kind}") from None


def parse_overrides(tokens: list[str]) -> dict:
    """Turn ``["--learning-rate", "1e-3", "--zero_layers", "true"]`` into a dict."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"--{key}: missing value")
            value = tokens[i + 1]
            i += 2
        name = key.replace("-", "_")
        if name not in _FIELDS:
            raise UsageError(f"unknown option --{key}")
        out[name] = _coerce(name, value, "command line")
    return out


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path}: expected a JSON object")
        for key, value in raw.items():
            if key not in _FIELDS:
                raise ConfigError(f"{key}: unknown field in {path}")
            values[key] = _coerce(key, value, path)
    values.update(overrides or {})
    return RunConfig(**values)
