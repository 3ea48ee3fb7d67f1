"""Experiment configuration: JSON documents mapped onto frozen dataclasses.

An experiment document looks like::

    {
      "task": "copy",
      "task_params": {"length": 100},
      "cell": "lstm",
      "variant": "UR",
      "hidden": 128,
      "gate": {"downsize": 1},
      "train": {"steps": 30000, "batch_size": 32},
      "seeds": {"init": 0, "data": 0},
      "output_dir": "runs/copy_ur",
      "sweep": {"variants": ["--", "UR"], "seeds": [0, 1, 2]}
    }

Every block is optional except ``task``. Unknown keys are errors, reported
with their dotted path. ``train`` and ``gate`` hold overrides only; defaults
come from ``TrainConfig`` and from the task (the forgetting scenario trains
at 1e-4).
"""

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .gatelib import VARIANT_NAMES, GateConfig

logger = logging.getLogger("urgate.config")

CELL_KINDS = ("lstm", "gru", "janet")
PRECISIONS = ("float64", "float32")

# Accepted task parameters and their defaults.
TASK_PARAMS: dict[str, dict[str, Any]] = {
    "copy": {"length": 100},
    "adding": {"length": 200},
    "forgetting": {"length": 100, "bias_offset": 6.0},
    "pixel": {"images": None, "labels": None, "limit": 1024, "permute": False},
}
GATE_KEYS = {"forget_bias": float, "t_max": int, "eps": float, "downsize": int}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 32
    steps: int = 30000
    eval_interval: int = 500
    eval_batch_size: int = 1024
    seed: int = 0
    data_seed: int = 0
    deterministic: bool = True
    precision: str = "float64"

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ConfigError(f"train.learning_rate must be >= 0, got {self.learning_rate}")
        if not self.clip_norm > 0:
            raise ConfigError(f"train.clip_norm must be > 0, got {self.clip_norm}")
        for name in ("batch_size", "steps", "eval_interval", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1, got {getattr(self, name)}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("train.beta1/beta2 must lie in [0, 1) and adam_eps be > 0")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"train.precision must be one of {PRECISIONS}, got {self.precision!r}")


TRAIN_KEYS = {
    f.name: f.type for f in dataclasses.fields(TrainConfig) if f.name not in ("seed", "data_seed")
}


@dataclass(frozen=True)
class SweepSpec:
    variants: tuple[str, ...]
    seeds: tuple[int, ...]
    quantiles: tuple[float, float] = (0.2, 0.8)


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    task_params: dict[str, Any] = field(default_factory=dict)
    cell: str = "lstm"
    variant: str = "UR"
    hidden: int = 128
    gate: dict[str, Any] = field(default_factory=dict)
    train: dict[str, Any] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=lambda: {"init": 0, "data": 0})
    output_dir: str = "runs/default"
    sweep: SweepSpec | None = None

    # --- Derived views ---

    def resolved_task_params(self) -> dict[str, Any]:
        return {**TASK_PARAMS[self.task], **self.task_params}

    def gate_config(self, variant: str | None = None) -> GateConfig:
        cfg = GateConfig.from_variant(variant or self.variant, **self.gate)
        cfg.validate(self.hidden)
        return cfg

    def train_config(self, base: TrainConfig | None = None) -> TrainConfig:
        """Train settings: ``base`` (task defaults) overlaid with the document's overrides."""
        cfg = dataclasses.replace(
            base or TrainConfig(),
            **self.train,
            seed=self.seeds["init"],
            data_seed=self.seeds["data"],
        )
        cfg.validate()
        return cfg

    def with_overrides(
        self,
        seed: int | None = None,
        output_dir: str | None = None,
        deterministic: bool | None = None,
        variant: str | None = None,
    ) -> "ExperimentConfig":
        changes: dict[str, Any] = {}
        if seed is not None:
            changes["seeds"] = {**self.seeds, "init": seed}
        if output_dir is not None:
            changes["output_dir"] = output_dir
        if deterministic is not None:
            changes["train"] = {**self.train, "deterministic": deterministic}
        if variant is not None:
            changes["variant"] = variant
        return dataclasses.replace(self, **changes)

    # --- Serialization ---

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "task": self.task,
            "task_params": dict(self.task_params),
            "cell": self.cell,
            "variant": self.variant,
            "hidden": self.hidden,
            "gate": dict(self.gate),
            "train": dict(self.train),
            "seeds": dict(self.seeds),
            "output_dir": self.output_dir,
        }
        if self.sweep is not None:
            out["sweep"] = {
                "variants": list(self.sweep.variants),
                "seeds": list(self.sweep.seeds),
                "quantiles": list(self.sweep.quantiles),
            }
        return out

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("experiment config must be a JSON object")
        _reject_unknown(doc, {f.name for f in dataclasses.fields(cls)}, "")
        task = doc.get("task")
        if task not in TASK_PARAMS:
            raise ConfigError(f"task: must be one of {sorted(TASK_PARAMS)}, got {task!r}")

        task_params = _mapping(doc, "task_params")
        _reject_unknown(task_params, set(TASK_PARAMS[task]), "task_params.")
        gate = _mapping(doc, "gate")
        _reject_unknown(gate, set(GATE_KEYS), "gate.")
        for key in gate:
            gate[key] = _typed(gate[key], GATE_KEYS[key], f"gate.{key}")
        train = _mapping(doc, "train")
        _reject_unknown(train, set(TRAIN_KEYS), "train.")
        for key in train:
            train[key] = _typed(train[key], TRAIN_KEYS[key], f"train.{key}")
        seeds = {"init": 0, "data": 0, **_mapping(doc, "seeds")}
        _reject_unknown(seeds, {"init", "data"}, "seeds.")
        seeds = {k: _typed(v, int, f"seeds.{k}") for k, v in seeds.items()}

        sweep = None
        if doc.get("sweep") is not None:
            block = _mapping(doc, "sweep")
            _reject_unknown(block, {"variants", "seeds", "quantiles"}, "sweep.")
            variants = tuple(block.get("variants") or ())
            sweep_seeds = tuple(_typed(s, int, "sweep.seeds") for s in block.get("seeds") or ())
            quantiles = tuple(float(q) for q in block.get("quantiles", (0.2, 0.8)))
            if not variants or not sweep_seeds:
                raise ConfigError("sweep: needs at least one variant and one seed")
            for name in variants:
                _check_variant(name, "sweep.variants")
            if len(quantiles) != 2 or not 0.0 <= quantiles[0] < quantiles[1] <= 1.0:
                raise ConfigError(f"sweep.quantiles: need 0 <= lo < hi <= 1, got {list(quantiles)}")
            sweep = SweepSpec(variants, sweep_seeds, quantiles)

        config = cls(
            task=task,
            task_params=task_params,
            cell=doc.get("cell", "lstm"),
            variant=doc.get("variant", "UR"),
            hidden=_typed(doc.get("hidden", 128), int, "hidden"),
            gate=gate,
            train=train,
            seeds=seeds,
            output_dir=str(doc.get("output_dir", "runs/default")),
            sweep=sweep,
        )
        config.validate()
        return config

    def validate(self) -> None:
        """Check every constraint before any work starts."""
        if self.cell not in CELL_KINDS:
            raise ConfigError(f"cell: must be one of {list(CELL_KINDS)}, got {self.cell!r}")
        _check_variant(self.variant, "variant")
        if self.hidden < 1:
            raise ConfigError(f"hidden: must be >= 1, got {self.hidden}")
        for name in self.sweep.variants if self.sweep else (self.variant,):
            try:
                self.gate_config(name)
            except ConfigError as e:
                raise ConfigError(f"gate ({name}): {e}") from e
        TrainConfig(**self.train).validate()
        params = self.resolved_task_params()
        length = params.get("length")
        if self.task == "copy" and (not isinstance(length, int) or length < 1):
            raise ConfigError(f"task_params.length: copy needs an integer >= 1, got {length!r}")
        if self.task in ("adding", "forgetting") and (
            not isinstance(length, int) or length < 2 or length % 2
        ):
            raise ConfigError(f"task_params.length: adding needs an even integer >= 2, got {length!r}")
        if self.task == "pixel":
            for key in ("images", "labels"):
                if not params[key]:
                    raise ConfigError(f"task_params.{key}: pixel task needs an IDX file path")
                _typed(params[key], str, f"task_params.{key}")
            if _typed(params["limit"], int, "task_params.limit") < 1:
                raise ConfigError("task_params.limit: must be >= 1")
            _typed(params["permute"], bool, "task_params.permute")


def _check_variant(name: str, path: str) -> None:
    if name not in VARIANT_NAMES:
        raise ConfigError(
            f"{path}: unknown gate variant {name!r}; valid variants: "
            + ", ".join(repr(v) for v in VARIANT_NAMES)
        )


def _reject_unknown(block: dict[str, Any], allowed: set[str], prefix: str) -> None:
    unknown = sorted(set(block) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")


def _mapping(doc: dict[str, Any], key: str) -> dict[str, Any]:
    value = doc.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"{key}: must be a JSON object")
    return dict(value)


def _typed(value: Any, kind, path: str):
    """Coerce JSON scalars to the declared field type, refusing lossy casts."""
    if value is None:
        raise ConfigError(f"{path}: must not be null")
    if kind in (bool, "bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if kind in (int, "int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if kind in (float, "float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if kind in (str, "str"):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def load_experiment(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    config = ExperimentConfig.from_dict(doc)
    logger.debug(f"Loaded experiment config from {path}: {config.to_dict()}")
    return config


def dump_experiment(config: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
    return path
