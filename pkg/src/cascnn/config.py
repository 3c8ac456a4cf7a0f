"""Run configuration: a closed key=value schema with command-line overrides.

File format: one ``key = value`` per line, ``#`` starts a comment, blank
lines are ignored. Precedence is defaults < file < command line.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Mapping


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_width(text: str) -> str:
    value = Fraction(text.strip())
    if value <= 0:
        raise ValueError("width must be positive")
    return str(value)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise ValueError("must be >= 1")
    return value


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise ValueError("must be >= 0")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise ValueError("must be > 0")
    return value


def _qf(text: str) -> int:
    value = int(text)
    if not 1 <= value <= 100:
        raise ValueError("quality factor must be in 1..100")
    return value


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str


SCHEMA: tuple[Key, ...] = (
    Key("data", str, None, "dataset directory written by `degrade` (manifest.csv, ref/, dist/)"),
    Key("qf", _qf, None, "expected quality factor of the dataset; checked against the manifest if set"),
    Key("width", parse_width, "1", "channel width multiplier, e.g. 1, 1/4, 1/8"),
    Key("lr", _positive_float, 1e-4, "Adam learning rate"),
    Key("batch", _positive_int, 20, "mini-batch size"),
    Key("epochs", _positive_int, 100, "maximum number of epochs"),
    Key("seed", int, 0, "seed for shuffling"),
    Key("init_seed", int, 0, "seed for weight initialisation (train only)"),
    Key("train_split", str, "train", "manifest split used for training"),
    Key("val_split", str, "val", "manifest split used for validation"),
    Key("patience", _positive_int, 5, "epochs without a new best validation loss before the lr is halved"),
    Key("stop_window", _positive_int, 10, "convergence window in epochs"),
    Key("stop_gain", float, 1e-3, "minimum relative improvement over the window to keep going"),
    Key("keep_best", _bool, True, "finish with the best-validation parameters"),
    Key("checkpoint", str, "cascnn.casc", "output checkpoint path"),
    Key("checkpoint_every", _non_negative_int, 0, "also checkpoint every N epochs (0 = only at the end)"),
    Key("log", str, "epochs.csv", "epoch log CSV path"),
)

KEYS: dict[str, Key] = {k.name: k for k in SCHEMA}


@dataclass(frozen=True)
class RunConfig:
    data: str | None
    qf: int | None
    width: str
    lr: float
    batch: int
    epochs: int
    seed: int
    init_seed: int
    train_split: str
    val_split: str
    patience: int
    stop_window: int
    stop_gain: float
    keep_best: bool
    checkpoint: str
    checkpoint_every: int
    log: str


def parse_text(text: str, origin: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{origin}:{lineno}: expected key = value, got {raw.strip()!r}")
        if key not in KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def read_file(path) -> dict[str, str]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror or exc}") from exc
    return parse_text(text, str(p))


def resolve(file_values: Mapping[str, str] | None = None,
            overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Validate and merge. Overrides may be raw strings or already-typed values; ``None`` means unset."""
    merged: dict[str, Any] = {k.name: k.default for k in SCHEMA}
    for source in (file_values or {}, overrides or {}):
        for name, raw in source.items():
            if name not in KEYS:
                raise ConfigError(f"unknown key {name!r}")
            if raw is None:
                continue
            try:
                merged[name] = KEYS[name].parse(str(raw))
            except ValueError as exc:
                raise ConfigError(f"invalid value for {name!r}: {raw!r} ({exc})") from exc
    return RunConfig(**merged)


def describe() -> str:
    width = max(len(k.name) for k in SCHEMA)
    return "\n".join(f"  {k.name:<{width}}  {k.help} (default: {k.default})" for k in SCHEMA)

