"""
Flat run-configuration documents.

One JSON object holds every tunable key; unknown keys are rejected and each
value must match the declared type. Keys map onto the underlying objects as:

* ``TrainConfig`` fields, unprefixed (``lr``, ``batch_size``, ``use_sgc`` ...)
* ``CVPlan`` fields: ``images_per_class``, ``folds``, ``synth_per_class``, ``cv_seed``
  and the classifier as ``clf_lr``, ``clf_momentum``, ``clf_batch_size``,
  ``clf_epochs``, ``clf_width``, ``clf_flip``
* ``ToySpec`` fields prefixed ``toy_`` (``toy_num_classes``, ``toy_seed`` ...)
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Tuple

from .data import ToySpec
from .errors import ConfigError
from .evaluation import ClassifierConfig, CVPlan
from .training import TrainConfig

_SCALARS = (bool, int, float, str)


def _field_types(cls) -> Dict[str, type]:
    hints = {}
    defaults = cls()
    for f in dataclasses.fields(cls):
        value = getattr(defaults, f.name)
        if isinstance(value, _SCALARS):
            hints[f.name] = type(value)
    return hints


def _schema() -> Dict[str, Tuple[str, str, type]]:
    """key -> (target, field name, type)."""
    schema = {}
    for name, tp in _field_types(TrainConfig).items():
        schema[name] = ("train", name, tp)
    schema["images_per_class"] = ("plan", "images_per_class", int)
    schema["folds"] = ("plan", "folds", int)
    schema["synth_per_class"] = ("plan", "synth_per_class", int)
    schema["cv_seed"] = ("plan", "seed", int)
    for name, tp in _field_types(ClassifierConfig).items():
        schema[f"clf_{name}"] = ("classifier", name, tp)
    for f in dataclasses.fields(ToySpec):
        if f.name in ("num_classes", "images_per_class", "resolution", "seed", "overlap"):
            schema[f"toy_{f.name}"] = ("toy", f.name, type(getattr(ToySpec(), f.name)))
    return schema


SCHEMA = _schema()


def coerce(key: str, value: Any) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key '{key}'")
    tp = SCHEMA[key][2]
    if tp is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"'{key}' must be true or false, got {value!r}")
    if tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"'{key}' must be an integer, got {value!r}")
    if tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"'{key}' must be a number, got {value!r}")
    if not isinstance(value, str):
        raise ConfigError(f"'{key}' must be a string, got {value!r}")
    return value


def parse_override(text: str) -> Tuple[str, Any]:
    """``key=value`` with the value parsed by the key's declared type."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not of the form key=value")
    key, raw = (s.strip() for s in text.split("=", 1))
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key '{key}'")
    tp = SCHEMA[key][2]
    try:
        if tp is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            value: Any = low in ("true", "1", "yes")
        elif tp is int:
            value = int(raw)
        elif tp is float:
            value = float(raw)
        else:
            value = raw
    except ValueError:
        raise ConfigError(f"cannot parse '{raw}' as {tp.__name__} for '{key}'") from None
    return key, value


def load_document(path=None, overrides: Iterable[str] = ()) -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        for k, v in raw.items():
            values[k] = coerce(k, v)
    for text in overrides:
        k, v = parse_override(text)
        values[k] = v
    return values


def _pick(values: Dict[str, Any], target: str) -> Dict[str, Any]:
    return {SCHEMA[k][1]: v for k, v in values.items() if SCHEMA[k][0] == target}


def train_config(values: Dict[str, Any]) -> TrainConfig:
    return TrainConfig(**_pick(values, "train"))


def cv_plan(values: Dict[str, Any]) -> CVPlan:
    return CVPlan(classifier=ClassifierConfig(**_pick(values, "classifier")), **_pick(values, "plan"))


def toy_spec(values: Dict[str, Any]) -> ToySpec:
    return ToySpec(**_pick(values, "toy"))
