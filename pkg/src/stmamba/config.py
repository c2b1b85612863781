"""Run configuration: one flat key=value namespace shared by file and flags.

Precedence, lowest to highest: built-in defaults, config file, the
STMAMBA_OUT_DIR environment variable (output directory only), command-line
flags.  Unknown keys are rejected by name; every key carries its own bounds.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

from .errors import ConfigError

ENV_OUT_DIR = "STMAMBA_OUT_DIR"


@dataclass(frozen=True)
class Key:
    name: str
    type: type
    default: object
    help: str
    choices: Optional[tuple] = None
    minimum: Optional[float] = None
    below_one: bool = False      # value must be < 1 (for rates)


SCHEMA: list[Key] = [
    Key("data", str, "", "dataset directory (meta.json + data.bin)"),
    Key("out", str, "out", "output directory for artifacts"),
    Key("checkpoint", str, "", "checkpoint file to load (eval/predict)"),
    Key("seed", int, 0, "seed for all random streams", minimum=0),
    # model shape
    Key("H", int, 12, "history steps fed to the model", minimum=1),
    Key("Z", int, 12, "future steps predicted", minimum=1),
    Key("d_f", int, 24, "width of each embedding part", minimum=1),
    Key("d_a", int, 80, "width of the adaptive position embedding", minimum=1),
    Key("d_h", int, 0, "hidden width; 0 derives 3*d_f + d_a, otherwise must match",
        minimum=0),
    Key("n_state", int, 64, "states per channel in the scan", minimum=1),
    Key("expand", int, 2, "inner-width multiplier of the scan layer", minimum=1),
    Key("d_conv", int, 4, "causal convolution taps", minimum=1),
    Key("n_layers", int, 1, "stacked residual scan blocks", minimum=1),
    Key("mlp_hidden", int, 0, "refinement MLP width; 0 means 4*d_h", minimum=0),
    Key("dropout", float, 0.1, "dropout rate inside residual blocks",
        minimum=0.0, below_one=True),
    Key("selective_source", str, "input", "where per-step scan maps come from",
        choices=("input", "output_feedback")),
    Key("dtype", str, "float32", "parameter/activation precision",
        choices=("float32", "float64")),
    # training
    Key("lr", float, 1e-3, "Adam learning rate", minimum=0.0),
    Key("batch", int, 16, "windows per optimizer step", minimum=1),
    Key("patience", int, 30, "non-improving epochs before stopping", minimum=1),
    Key("max_epochs", int, 200, "hard epoch cap", minimum=1),
    Key("lr_decay", float, 0.5, "learning-rate factor on stagnation",
        minimum=1e-9, below_one=True),
    Key("decay_patience", int, 10, "stale epochs between decays", minimum=1),
    Key("loss", str, "mae", "training loss", choices=("mae", "huber")),
    Key("mask_threshold", float, 1.0, "|target| floor for MAPE", minimum=0.0),
    Key("max_steps", int, 0, "optimizer-step cap; 0 = unlimited", minimum=0),
    Key("splits", str, "0.6,0.2,0.2", "train,val,test fractions"),
    # synthetic data
    Key("synth_sensors", int, 8, "sensors in generated data", minimum=1),
    Key("synth_days", int, 14, "days of generated data", minimum=2),
    Key("synth_noise", float, 4.0, "noise level of generated data", minimum=0.0),
    # conversion
    Key("csv", str, "", "CSV file to convert"),
    Key("n_sensors", int, 0, "sensor count of the CSV being converted", minimum=0),
    Key("n_features", int, 1, "features per sensor in the CSV", minimum=1),
    Key("interval", int, 5, "minutes between rows", minimum=1),
    Key("start", int, 0, "unix seconds of the first row", minimum=0),
    # benchmark
    Key("bench_sizes", str, "512,1024,2048,4096", "comma-separated sweep lengths"),
    Key("bench_reps", int, 5, "timing repetitions per size", minimum=1),
    # prediction
    Key("window_index", int, 0, "which test window to predict", minimum=0),
]

_BY_NAME = {k.name: k for k in SCHEMA}


class RunConfig:
    """Attribute access over the merged key=value namespace."""

    def __init__(self, values: dict):
        self.__dict__.update(values)

    def as_dict(self) -> dict:
        return {k.name: getattr(self, k.name) for k in SCHEMA}


def _coerce(key: Key, raw: str):
    try:
        if key.type is int:
            return int(raw)
        if key.type is float:
            return float(raw)
        return raw
    except ValueError as err:
        raise ConfigError(
            f"key {key.name} expects {key.type.__name__}, got {raw!r}"
        ) from err


def read_config_file(path) -> dict[str, object]:
    """Parse a key=value file; '#' starts a comment, later keys win."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err}") from err
    values: dict[str, object] = {}
    for lineno, raw in enumerate(lines, 1):
        text = raw.strip()
        if not text or text.startswith("#"):
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        name, _, value = text.partition("=")
        name = name.strip()
        key = _BY_NAME.get(name)
        if key is None:
            raise ConfigError(f"{path}:{lineno}: unknown config key {name!r}")
        values[name] = _coerce(key, value.strip())
    return values


def _validate(values: dict) -> dict:
    for key in SCHEMA:
        value = values[key.name]
        if key.type in (int, float) and not isinstance(value, (int, float)):
            raise ConfigError(f"key {key.name} expects {key.type.__name__},"
                              f" got {value!r}")
        if key.type is int and not isinstance(value, int):
            raise ConfigError(f"key {key.name} expects int, got {value!r}")
        if key.minimum is not None and value < key.minimum:
            raise ConfigError(
                f"{key.name} must be >= {key.minimum:g}, got {value!r}"
            )
        if key.below_one and value >= 1.0:
            raise ConfigError(f"{key.name} must be < 1, got {value!r}")
        if key.choices is not None and value not in key.choices:
            raise ConfigError(
                f"{key.name} must be one of {', '.join(key.choices)}, got {value!r}"
            )
    if values["d_h"] and values["d_h"] != 3 * values["d_f"] + values["d_a"]:
        raise ConfigError(
            f"d_h={values['d_h']} contradicts 3*d_f + d_a ="
            f" {3 * values['d_f'] + values['d_a']}; drop d_h or fix the widths"
        )
    parse_splits(values["splits"])
    return values


def parse_splits(text: str) -> tuple[float, float, float]:
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 3:
        raise ConfigError(f"splits needs three comma-separated fractions, got {text!r}")
    try:
        ratios = tuple(float(p) for p in parts)
    except ValueError as err:
        raise ConfigError(f"splits must be numeric, got {text!r}") from err
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(
            f"splits must be positive and sum to 1, got {text!r}"
        )
    return ratios


def resolve(file_path: Optional[str], overrides: dict[str, object]) -> RunConfig:
    """Merge defaults < file < environment < explicit overrides, then validate."""
    values = {k.name: k.default for k in SCHEMA}
    if file_path:
        values.update(read_config_file(file_path))
    env_out = os.environ.get(ENV_OUT_DIR)
    if env_out:
        values["out"] = env_out
    for name, value in overrides.items():
        if name not in _BY_NAME:
            raise ConfigError(f"unknown config key {name!r}")
        if value is not None:
            values[name] = value
    return RunConfig(_validate(values))


def format_effective(cfg: RunConfig) -> str:
    """One key=value line per schema entry, in schema order."""
    return "\n".join(f"{k.name}={getattr(cfg, k.name)}" for k in SCHEMA)
