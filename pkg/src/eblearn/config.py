"""Experiment configuration: JSON files, shipped presets and flag overrides."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

from .training import TrainConfig

__all__ = ["ExperimentConfig", "preset_names", "load_preset", "read_config", "resolve_config"]

RUN_KEYS = ("preset", "data_dir", "out", "limit", "test_limit")


@dataclass
class ExperimentConfig:
    """A training configuration plus where the data and outputs live."""

    train: TrainConfig
    preset: Optional[str] = None
    data_dir: Optional[str] = None
    out: Optional[str] = None
    limit: Optional[int] = None
    test_limit: Optional[int] = None

    def __post_init__(self):
        for name in ("limit", "test_limit"):
            value = getattr(self, name)
            if value is not None and int(value) < 1:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        run = {k: d[k] for k in RUN_KEYS if k in d}
        train = TrainConfig.from_dict({k: v for k, v in d.items() if k not in RUN_KEYS})
        return cls(train, **run)

    def to_dict(self) -> dict:
        d = self.train.to_dict()
        d.update({k: getattr(self, k) for k in RUN_KEYS})
        return d

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def preset_names() -> list:
    files = resources.files("eblearn").joinpath("presets").iterdir()
    return sorted(f.name[:-5] for f in files if f.name.endswith(".json"))


def load_preset(name: str) -> dict:
    if name not in preset_names():
        raise FileNotFoundError(f"no preset named {name!r}; available: {', '.join(preset_names())}")
    text = resources.files("eblearn").joinpath("presets", f"{name}.json").read_text()
    return json.loads(text)


def read_config(path_or_preset: str) -> dict:
    """Contents of a JSON config file, or of the shipped preset with that name."""
    path = Path(path_or_preset)
    if path.is_file():
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ValueError(f"{path}: invalid JSON ({err})") from None
        if not isinstance(data, dict):
            raise ValueError(f"{path}: expected a JSON object")
        return data
    return load_preset(path_or_preset)


def resolve_config(source: Optional[str] = None, overrides: Optional[dict] = None,
                   env=os.environ) -> ExperimentConfig:
    """File or preset values, then non-``None`` overrides, then environment defaults.

    ``data_dir`` falls back to ``$EBL_DATA_DIR`` and ``workers`` to the number
    of available cores.
    """
    values = read_config(source) if source else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if values.get("data_dir") is None and env.get("EBL_DATA_DIR"):
        values["data_dir"] = env["EBL_DATA_DIR"]
    if "workers" not in values:
        values["workers"] = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") \
            else (os.cpu_count() or 1)
    return ExperimentConfig.from_dict(values)
