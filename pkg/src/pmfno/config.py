"""JSON run configuration with fail-closed parsing."""
from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

from .dataset import PARAM_CLASSES, SYSTEMS, DatasetConfig, make_params
from .models import ModelConfig
from .training import TrainConfig

SECTIONS = ("system", "dataset", "model", "train", "eval")


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    horizons: list = field(default_factory=lambda: ["1x", "10x"])
    pole_frames: int | None = None
    pole_gate: float = 0.02


# model keys that come from the system rather than the config
_DERIVED_MODEL_KEYS = ("grid", "state_channels")


@dataclass
class RunConfig:
    system: str
    params: object
    dataset: DatasetConfig
    model: ModelConfig
    train: TrainConfig
    eval: EvalConfig
    raw: dict

    @property
    def grid(self):
        return self.model.grid

    def to_dict(self):
        return {
            "system": {"name": self.system, **self.params.to_dict()},
            "dataset": asdict(self.dataset),
            "model": {k: v for k, v in self.model.to_dict().items() if k not in _DERIVED_MODEL_KEYS},
            "train": asdict(self.train),
            "eval": asdict(self.eval),
        }


def _defaults(cls):
    out = {}
    for f in fields(cls):
        if f.default is not MISSING:
            out[f.name] = f.default
        elif f.default_factory is not MISSING:
            out[f.name] = f.default_factory()
    return out


def _check_keys(section, given, allowed):
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")


def _build(section, cls, values, exclude=()):
    allowed = [f.name for f in fields(cls) if f.name not in exclude]
    _check_keys(section, values, allowed)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def grid_of(params):
    if hasattr(params, "nx"):
        return (params.nx, params.ny)
    return (params.grid_points,)


def parse(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys("top level", doc, SECTIONS)
    sys_sec = dict(doc.get("system") or {})
    name = sys_sec.pop("name", "string")
    if name not in SYSTEMS:
        raise ConfigError(f"unknown system {name!r}; expected one of {', '.join(SYSTEMS)}")
    ds_sec = dict(doc.get("dataset") or {})
    grid = ds_sec.pop("grid", None)
    if grid is not None:
        grid = [grid] if isinstance(grid, int) else list(grid)
        keys = ("nx", "ny") if name == "wave2d" else ("grid_points",)
        if len(grid) != len(keys):
            raise ConfigError(f"[dataset] grid needs {len(keys)} entries for {name}, got {grid}")
        for k, n in zip(keys, grid):
            if k in sys_sec and sys_sec[k] != n:
                raise ConfigError(f"[dataset] grid {grid} conflicts with [system] {k}={sys_sec[k]}")
            sys_sec[k] = int(n)
    try:
        params = make_params(name, sys_sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[system] {exc}") from exc
    dataset = _build("dataset", DatasetConfig, ds_sec)
    model_sec = dict(doc.get("model") or {})
    _check_keys("model", model_sec, [f.name for f in fields(ModelConfig) if f.name not in _DERIVED_MODEL_KEYS])
    model_sec["grid"] = grid_of(params)
    model_sec["state_channels"] = 3 if name == "wave2d" else 2
    model = _build("model", ModelConfig, model_sec)
    train = _build("train", TrainConfig, dict(doc.get("train") or {}))
    ev = _build("eval", EvalConfig, dict(doc.get("eval") or {}))
    return RunConfig(name, params, dataset, model, train, ev, doc)


def load(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse(doc)


def documented_keys():
    """``(section, key, default)`` for every accepted config key."""
    rows = [("system", "name", "string")]
    seen = set()
    for system in SYSTEMS:
        for k, v in _defaults(PARAM_CLASSES[system]).items():
            if k not in seen:
                seen.add(k)
                rows.append(("system", k, v))
    rows.append(("dataset", "grid", None))
    rows += [("dataset", k, v) for k, v in _defaults(DatasetConfig).items()]
    rows += [("model", k, v) for k, v in _defaults(ModelConfig).items() if k not in _DERIVED_MODEL_KEYS]
    rows += [("train", k, v) for k, v in _defaults(TrainConfig).items()]
    rows += [("eval", k, v) for k, v in _defaults(EvalConfig).items()]
    return rows


def help_text():
    lines = ["config keys (section.key = default):"]
    for section, key, default in documented_keys():
        lines.append(f"  {section}.{key} = {json.dumps(default)}")
    lines.append("  system keys apply to the system named by system.name; "
                 "dataset.grid overrides the system grid size.")
    return "\n".join(lines)
