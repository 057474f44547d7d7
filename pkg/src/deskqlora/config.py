"""Run configuration: flat ``key = value`` files with command-line overrides.

Top-level keys set :class:`RunConfig` fields. ``model.<field>`` and
``train.<field>`` keys override :class:`ModelConfig` and
:class:`TrainConfig` fields. Lines starting with ``#`` are comments.

    out = runs/demo
    task = qgen
    iters = 200
    model.window = 16
    train.learning_rate = 3e-3
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .model import ModelConfig
from .trainkit import TrainConfig


class ConfigError(ValueError):
    pass


TASKS = ("qgen", "eval")
CLIENTS = ("stub", "http")
PRESETS = ("desk", "full")


@dataclass
class RunConfig:
    out: Path = Path("run")
    registry: Path | None = None
    task: str = "qgen"
    seed: int = 0
    client: str = "stub"
    preset: str = "desk"
    iters: int = 200
    n_assignments: int | None = None
    eval_per_question: int = 1
    fresh_eval_questions: bool = True
    max_workers: int = 4
    gen_tokens: int = 96
    rank_limit: int | None = None
    candidates: tuple[str, ...] = ("qlora-finetuned", "quantized-base", "reference")
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.client not in CLIENTS:
            raise ConfigError(f"client must be one of {CLIENTS}, got {self.client!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.iters < 1:
            raise ConfigError("iters must be >= 1")
        self.out = Path(self.out)
        if self.registry is not None:
            self.registry = Path(self.registry)

    def registry_path(self) -> Path:
        if self.registry is not None:
            return self.registry
        return Path(str(resources.files("deskqlora") / "data" / "default_registry.json"))

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(**self.model)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model config: {exc}") from None

    def train_config(self) -> TrainConfig:
        overrides = dict(self.train)
        overrides.setdefault("seed", self.seed)
        try:
            if self.preset == "full":
                return TrainConfig(max_iters=self.iters, **overrides)
            return TrainConfig.desk(self.iters, **overrides)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train config: {exc}") from None

    # layout
    @property
    def data_dir(self) -> Path:
        return self.out / "data"

    @property
    def split_dir(self) -> Path:
        return self.out / "splits"

    @property
    def train_dir(self) -> Path:
        return self.out / "train" / self.task

    @property
    def rank_dir(self) -> Path:
        return self.out / "rank" / self.task

    @property
    def report_dir(self) -> Path:
        return self.out / "report" / self.task


def _coerce(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = [a for a in typing.get_args(tp) if a is not type(None)]
    if origin is typing.Union or (origin is not None and type(None) in typing.get_args(tp)):
        if raw.lower() in ("none", "null", "inf", ""):
            return None
        return _coerce(raw, args[0], key)
    if origin is tuple:
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    if tp is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if tp is Path:
        return Path(raw)
    try:
        return tp(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


_RUN_TYPES = {k: v for k, v in _field_types(RunConfig).items() if k not in ("model", "train")}
_MODEL_TYPES = _field_types(ModelConfig)
_TRAIN_TYPES = _field_types(TrainConfig)


def parse_pairs(pairs: dict[str, str]) -> dict:
    """Typed values for raw ``key -> string`` pairs (top-level, ``model.*``, ``train.*``)."""
    out: dict = {"model": {}, "train": {}}
    for key, raw in pairs.items():
        if key.startswith("model."):
            name = key[len("model.") :]
            if name not in _MODEL_TYPES:
                raise ConfigError(f"unknown model setting {name!r}")
            out["model"][name] = _coerce(raw, _MODEL_TYPES[name], key)
        elif key.startswith("train."):
            name = key[len("train.") :]
            if name not in _TRAIN_TYPES or name == "max_iters":
                raise ConfigError(f"unknown train setting {name!r} (set max_iters via 'iters')")
            out["train"][name] = _coerce(raw, _TRAIN_TYPES[name], key)
        elif key in _RUN_TYPES:
            out[key] = _coerce(raw, _RUN_TYPES[key], key)
        else:
            raise ConfigError(f"unknown setting {key!r}")
    return out


def read_config_file(path) -> dict[str, str]:
    pairs: dict[str, str] = {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        k, v = s.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Config file values, then ``overrides`` (already typed) on top."""
    values = parse_pairs(read_config_file(path)) if path else {"model": {}, "train": {}}
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k in ("model", "train"):
            values[k].update(v)
        else:
            values[k] = v
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
