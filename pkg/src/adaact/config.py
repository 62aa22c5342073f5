"""Run configuration: ``key = value`` files merged with command-line overrides.

Keys are the field names of :class:`TrainConfig` and :class:`SynthConfig`.
A key that exists in both (``seed``) sets both. Values are parsed as JSON
when possible, so lists and mappings can be written inline::

    # smaller corpus, longer training
    videos_per_activity = 10
    epochs = 50
    mean_lengths = {"SIL": 12, "take_cup": 20, "pour_coffee": 30, "pour_juice": 30, "stir": 24, "drink": 20}
    activities = {"coffee": ["SIL", "take_cup", "pour_coffee", "SIL"]}
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import Activity, SynthConfig
from .train import TrainConfig


class RunConfigError(ValueError):
    pass


def _field_types(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


TRAIN_KEYS = _field_types(TrainConfig)
SYNTH_KEYS = _field_types(SynthConfig)


def _coerce(key: str, raw: str, kind):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    try:
        if kind is bool:
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "yes", "no", "1", "0"):
                    raise ValueError(value)
                return value.lower() in ("true", "yes", "1")
            return bool(value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            if isinstance(value, bool):
                raise ValueError(value)
            return int(value)
        if kind is float:
            return float(value)
        if kind is str:
            return str(value)
    except (TypeError, ValueError) as exc:
        raise RunConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from exc
    # structured SynthConfig fields
    if key == "activities":
        if not isinstance(value, dict):
            raise RunConfigError("activities: expected a mapping of name -> list of actions")
        return [Activity(k, list(v)) for k, v in value.items()]
    if key == "ambiguous_pairs":
        if not isinstance(value, list) or any(len(p) != 2 for p in value):
            raise RunConfigError("ambiguous_pairs: expected a list of [a, b] pairs")
        return [tuple(p) for p in value]
    if key == "mean_lengths":
        if not isinstance(value, dict):
            raise RunConfigError("mean_lengths: expected a mapping of action -> mean length")
        return {k: float(v) for k, v in value.items()}
    if key == "actions":
        if not isinstance(value, list):
            raise RunConfigError("actions: expected a list of names")
        return [str(v) for v in value]
    return value


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    explicit: set = field(default_factory=set)

    def set(self, key: str, raw: str) -> None:
        key = key.strip()
        known = False
        if key in TRAIN_KEYS:
            setattr(self.train, key, _coerce(key, raw, TRAIN_KEYS[key]))
            known = True
        if key in SYNTH_KEYS:
            setattr(self.synth, key, _coerce(key, raw, SYNTH_KEYS[key]))
            known = True
        if not known:
            raise RunConfigError(f"unknown configuration key {key!r}")
        self.explicit.add(key)

    def explicit_train_keys(self) -> list[str]:
        """TrainConfig keys set by the file or the command line."""
        return sorted(k for k in self.explicit if k in TRAIN_KEYS)

    def update_text(self, text: str, source: str = "<config>") -> None:
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise RunConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, raw = line.split("=", 1)
            try:
                self.set(key, raw.strip())
            except RunConfigError as exc:
                raise RunConfigError(f"{source}:{lineno}: {exc}") from exc

    def validate(self) -> None:
        try:
            self.train.validate()
            self.synth.validate()
        except ValueError as exc:
            raise RunConfigError(str(exc)) from exc

    def resolved(self) -> dict:
        """Every key with its final value, for logging."""
        out = {"train": dataclasses.asdict(self.train), "synth": dataclasses.asdict(self.synth)}
        return json.loads(json.dumps(out, default=str))


def load_run_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    """File first, then ``--seed``, then ``--set`` overrides in order."""
    rc = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise RunConfigError(f"cannot read config {path}: {exc}") from exc
        rc.update_text(text, str(path))
    if seed is not None:
        rc.set("seed", str(seed))
    for item in overrides:
        if "=" not in item:
            raise RunConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        rc.set(k, v)
    rc.validate()
    return rc
