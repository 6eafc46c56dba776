"""Cross-disease attention network: training, evaluation and checks from Python."""

import json as _json

from . import _core
from ._core import (
    CanetError,
    ConfigError,
    DataError,
    DimensionError,
    NumericalError,
    ParameterError,
    UndefinedMetricError,
    UsageError,
    auc,
    gradcheck,
    joint_accuracy,
    predict,
    resolve_key,
)

__all__ = [
    "CanetError",
    "ConfigError",
    "DataError",
    "DimensionError",
    "NumericalError",
    "ParameterError",
    "UndefinedMetricError",
    "UsageError",
    "auc",
    "default_config",
    "evaluate",
    "gradcheck",
    "joint_accuracy",
    "param_count",
    "predict",
    "resolve_key",
    "synth",
    "train",
    "with_overrides",
]


def default_config():
    return _json.loads(_core.default_config())


def with_overrides(config=None, **overrides):
    """Copy of `config` with short or dotted keys set, e.g. lambda=0.5."""
    out = _json.loads(_json.dumps(config or {}))
    for key, value in overrides.items():
        section, name = resolve_key(key).split(".", 1)
        out.setdefault(section, {})[name] = value
    return out


def train(config=None, out_dir=None):
    return _json.loads(_core.train(_json.dumps(config or {}), None if out_dir is None else str(out_dir)))


def evaluate(checkpoint, manifest=None):
    return _json.loads(_core.evaluate(str(checkpoint), None if manifest is None else str(manifest)))


def param_count(config=None):
    return _json.loads(_core.param_count(_json.dumps(config or {})))


def synth(config, n, out_dir):
    return _core.synth(_json.dumps(config or {}), n, str(out_dir))
