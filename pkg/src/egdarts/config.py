"""Run configuration: one JSON document covering data, both search stages and training.

Shipped defaults follow the published hyper-parameter table. Unknown keys are
rejected with the dotted path of the offending field.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .block_search import BlockSearchConfig
from .network import TABLE_I_BOUNDS, Bounds

DATASETS = ("cifar10", "cifar100", "synth")
EVALUATORS = ("trained", "surrogate")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class SynthConfig:
    n: int = 2000
    classes: int = 4
    size: int = 16
    noise: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class DataConfig:
    dataset: str = "cifar10"
    path: str | None = None  # directory or file; EGDARTS_DATA_DIR when unset
    weight_fraction: float = 0.5
    mean: tuple[float, float, float] | None = None
    std: tuple[float, float, float] | None = None
    synth: SynthConfig = SynthConfig()


@dataclass(frozen=True)
class NetworkSearchConfig:
    population: int = 15
    generations: int = 20
    crossover: float = 0.9
    mutation: float = 0.1
    evaluator: str = "trained"
    surrogate_kind: str = "tradeoff"
    epochs: int = 36
    batch_size: int = 128
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 5e-4
    latency_runs: int = 0
    bounds: Bounds = TABLE_I_BOUNDS


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 600
    batch_size: int = 128
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = True
    latency_runs: int = 0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str | None = None
    data: DataConfig = DataConfig()
    block_search: BlockSearchConfig = field(default_factory=BlockSearchConfig)
    network_search: NetworkSearchConfig = NetworkSearchConfig()
    train: TrainConfig = TrainConfig()

    def to_json(self) -> dict:
        return _to_json(self)

    def canonical(self) -> str:
        """Serialised form used for hashing; excludes the output directory."""
        obj = self.to_json()
        obj.pop("out", None)
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def with_overrides(self, **kw) -> "RunConfig":
        cfg = self
        if kw.get("seed") is not None:
            cfg = dataclasses.replace(cfg, seed=int(kw["seed"]))
        if kw.get("out") is not None:
            cfg = dataclasses.replace(cfg, out=str(kw["out"]))
        if kw.get("dataset") is not None:
            cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, dataset=kw["dataset"]))
        if kw.get("evaluator") is not None:
            cfg = dataclasses.replace(cfg, network_search=dataclasses.replace(cfg.network_search,
                                                                              evaluator=kw["evaluator"]))
        validate(cfg)
        return cfg


def _to_json(obj) -> Any:
    if isinstance(obj, Bounds):
        return obj.to_json()
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_json(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_json(v) for v in obj]
    return obj


_NESTED = {"data": DataConfig, "synth": SynthConfig, "network_search": NetworkSearchConfig, "train": TrainConfig}


def _check_type(path: str, value, default) -> None:
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(path, f"expected {type(default).__name__}, got {type(value).__name__} {value!r}")


def _build(cls, obj: Mapping, path: str):
    if not isinstance(obj, Mapping):
        raise ConfigError(path, f"expected an object, got {type(obj).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - set(names))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"{where}{unknown[0]}", f"unknown key (allowed: {', '.join(sorted(names))})")
    defaults = cls()
    kw = {}
    for key, value in obj.items():
        fpath = f"{path}.{key}" if path else key
        default = getattr(defaults, key)
        if key in _NESTED and dataclasses.is_dataclass(default):
            kw[key] = _build(_NESTED[key], value, fpath)
        elif key == "bounds":
            try:
                kw[key] = Bounds.from_json(value)
            except (ValueError, TypeError, IndexError) as exc:
                raise ConfigError(fpath, str(exc)) from None
        elif key == "block_search":
            kw[key] = _block_search(value, fpath)
        elif key in ("mean", "std"):
            if value is not None and (not isinstance(value, list) or len(value) != 3):
                raise ConfigError(fpath, "expected null or a list of 3 numbers")
            kw[key] = None if value is None else tuple(float(v) for v in value)
        elif key in ("path", "out"):
            if value is not None and not isinstance(value, str):
                raise ConfigError(fpath, "expected a string or null")
            kw[key] = value
        else:
            _check_type(fpath, value, default)
            kw[key] = float(value) if isinstance(default, float) else value
    return cls(**kw)


def _block_search(obj: Mapping, path: str) -> BlockSearchConfig:
    if not isinstance(obj, Mapping):
        raise ConfigError(path, "expected an object")
    names = {f.name for f in dataclasses.fields(BlockSearchConfig)}
    unknown = sorted(set(obj) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", f"unknown key (allowed: {', '.join(sorted(names))})")
    defaults = BlockSearchConfig()
    kw = {}
    for key, value in obj.items():
        fpath = f"{path}.{key}"
        if key == "stages":
            if not isinstance(value, list) or not all(isinstance(s, list) and len(s) == 2 for s in value):
                raise ConfigError(fpath, "expected a list of [depth, ops_after] pairs")
            kw[key] = tuple((int(d), int(k)) for d, k in value)
            continue
        _check_type(fpath, value, getattr(defaults, key))
        kw[key] = float(value) if isinstance(getattr(defaults, key), float) else value
    try:
        return BlockSearchConfig(**kw)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def validate(cfg: RunConfig) -> RunConfig:
    d = cfg.data
    if d.dataset not in DATASETS:
        raise ConfigError("data.dataset", f"must be one of {', '.join(DATASETS)}, got {d.dataset!r}")
    if not 0 < d.weight_fraction < 1:
        raise ConfigError("data.weight_fraction", f"must lie in (0, 1), got {d.weight_fraction}")
    if d.std is not None and any(s <= 0 for s in d.std):
        raise ConfigError("data.std", "entries must be > 0")
    s = d.synth
    if s.classes < 2:
        raise ConfigError("data.synth.classes", "must be >= 2")
    if s.size < 8:
        raise ConfigError("data.synth.size", "must be >= 8")
    if s.n < 2 * s.classes:
        raise ConfigError("data.synth.n", "must give at least 2 samples per class")
    if s.noise < 0:
        raise ConfigError("data.synth.noise", "must be >= 0")
    ns = cfg.network_search
    if ns.population < 2:
        raise ConfigError("network_search.population", "must be >= 2")
    if ns.generations < 0:
        raise ConfigError("network_search.generations", "must be >= 0")
    for name in ("crossover", "mutation"):
        if not 0 <= getattr(ns, name) <= 1:
            raise ConfigError(f"network_search.{name}", "must lie in [0, 1]")
    if ns.evaluator not in EVALUATORS:
        raise ConfigError("network_search.evaluator", f"must be one of {', '.join(EVALUATORS)}, got {ns.evaluator!r}")
    if ns.surrogate_kind not in ("tradeoff", "inverse"):
        raise ConfigError("network_search.surrogate_kind", "must be 'tradeoff' or 'inverse'")
    for sect, obj in (("network_search", ns), ("train", cfg.train)):
        if obj.epochs < 0:
            raise ConfigError(f"{sect}.epochs", "must be >= 0")
        if obj.batch_size < 1:
            raise ConfigError(f"{sect}.batch_size", "must be >= 1")
        if obj.lr <= 0:
            raise ConfigError(f"{sect}.lr", "must be > 0")
        if not 0 <= obj.momentum < 1:
            raise ConfigError(f"{sect}.momentum", "must lie in [0, 1)")
        if obj.weight_decay < 0:
            raise ConfigError(f"{sect}.weight_decay", "must be >= 0")
        if obj.latency_runs < 0:
            raise ConfigError(f"{sect}.latency_runs", "must be >= 0")
    return cfg


def from_json(obj: Mapping) -> RunConfig:
    return validate(_build(RunConfig, obj, ""))


def load(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read config {p}: {exc.strerror}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{p} is not valid JSON (line {exc.lineno}, column {exc.colno}): {exc.msg}") from None
    return from_json(obj)


def desk_scale() -> RunConfig:
    """Small synthetic configuration that runs the whole pipeline on one CPU core."""
    return from_json(DESK_SCALE)


DESK_SCALE = {
    "seed": 0,
    "data": {"dataset": "synth", "synth": {"n": 2000, "classes": 4, "size": 16}},
    "block_search": {"stages": [[2, 8], [3, 4], [4, 1]], "epochs": 1, "batch_size": 32, "init_channels": 4,
                     "mode": "first_order", "warmup_steps": 2, "history_window": 8},
    "network_search": {"population": 8, "generations": 5, "epochs": 3,
                       "bounds": {"v0": [8, 12], "v1": [1, 2], "v2": [1, 2], "v3": [1, 2],
                                  "v4": [1.0, 1.5], "v5": [1.0, 1.5]}},
    "train": {"epochs": 3, "augment": False},
}
