"""Run configuration: a flat ``key = value`` file whose keys are the fields of
TrainConfig, DimensionConfig and RunConfig. Missing keys keep their defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .model import DimensionConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    dims: DimensionConfig = field(default_factory=DimensionConfig)
    train_path: Optional[str] = None
    dev_path: Optional[str] = None
    test_path: Optional[str] = None
    embeddings: Optional[str] = None
    format: str = "tokens"
    positive_labels: tuple = ("1", "c", "i")
    methods: tuple = ("attention", "backprop", "relfreq")
    out: Optional[str] = None

    def to_text(self) -> str:
        lines = []
        for key, value in sorted(flatten(self).items()):
            lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"


_RUN_KEYS = [f.name for f in dataclasses.fields(RunConfig) if f.name not in ("train", "dims")]
_TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig)]
_DIM_KEYS = [f.name for f in dataclasses.fields(DimensionConfig)]
TUPLE_KEYS = {"seeds", "positive_labels", "methods"}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    return str(value)


def flatten(config: RunConfig) -> dict:
    out = {k: getattr(config.train, k) for k in _TRAIN_KEYS}
    out.update({k: getattr(config.dims, k) for k in _DIM_KEYS})
    out.update({k: getattr(config, k) for k in _RUN_KEYS})
    return out


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _convert(key: str, text: str, default):
    if key in TUPLE_KEYS:
        items = text.replace(",", " ").split()
        return tuple(int(x) for x in items) if key == "seeds" else tuple(items)
    if text.lower() in ("none", "null", ""):
        return None
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or key == "clip_norm":
        return float(text)
    return text


def build_config(values: dict, base: Optional[RunConfig] = None) -> RunConfig:
    """Apply string ``values`` on top of ``base`` (defaults if omitted)."""
    base = base or RunConfig()
    flat = flatten(base)
    unknown = set(values) - set(flat)
    if unknown:
        raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    for key, text in values.items():
        flat[key] = text if not isinstance(text, str) else _convert(key, text, flat[key])
    return RunConfig(
        train=TrainConfig(**{k: flat[k] for k in _TRAIN_KEYS}),
        dims=DimensionConfig(**{k: flat[k] for k in _DIM_KEYS}),
        **{k: flat[k] for k in _RUN_KEYS},
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    return build_config(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
