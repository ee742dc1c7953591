"""Experiment configuration: a sectioned TOML file with strict keys.

Sections: ``[model]``, ``[data]``, ``[train]``, ``[seeds]``, ``[fisher]``
(the learning-dynamics probe), ``[fun]`` (the FUN selection probe) and
``[output]``. Unknown sections or keys are rejected. ``dump_config`` writes a
file that ``load_config`` reads back to an equal object.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from funfreeze.data import ShiftTaskSpec
from funfreeze.errors import ConfigError
from funfreeze.fisher import FisherProbeConfig
from funfreeze.schedule import SchedulerKind
from funfreeze.train import Seeds, TrainConfig, steps_from_epochs


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 32
    layers: int = 6
    classes: int = 4
    reduction_factor: int = 16
    identity_init: bool = True
    pretrain_steps: int = 300
    pretrain_lr: float = 3e-3
    aux_examples: int = 2000
    aux_classes: int = 8


@dataclass(frozen=True)
class TrainSection:
    steps: int = 1500
    epochs: int = 0  # when > 0, overrides steps: ceil(n_train / batch_size) * epochs
    batch_size: int = 32
    k: int = 100
    scheduler: str = "GU"
    permutation: tuple[int, ...] = ()
    lr: float = 5e-3
    lr_schedule: str = "linear"
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    clip_trainable_only: bool = True
    eval_every: int = 100
    fisher_log_every: int = 100
    checkpoint_every: int = 0


@dataclass(frozen=True)
class ProbeSection:
    n_batches: int = 40
    batch_size: int = 32
    estimator: str = "batch_square"


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "runs"
    window: int = 5
    alpha: float = 0.5
    write_data: bool = True


@dataclass(frozen=True)
class DataSection:
    spec: ShiftTaskSpec = ShiftTaskSpec()
    # directory holding train.jsonl / val.jsonl / test_*.jsonl; replaces generation
    path: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = ModelConfig()
    data: DataSection = DataSection()
    train: TrainSection = TrainSection()
    seeds: Seeds = Seeds()
    fisher: ProbeSection = ProbeSection()
    fun: ProbeSection = ProbeSection()
    output: OutputConfig = OutputConfig()

    def scheduler_kind(self, seeds: Seeds | None = None) -> SchedulerKind:
        seeds = seeds or self.seeds
        t = self.train
        if t.scheduler == "Fixed":
            return SchedulerKind.fixed(t.permutation)
        if t.scheduler == "Random":
            return SchedulerKind("Random", seed=seeds.scheduler)
        if t.scheduler == "FUN":
            return SchedulerKind.fun(_probe(self.fun, seeds.fisher))
        return SchedulerKind(t.scheduler)

    def train_config(self, seeds: Seeds | None = None, scheduler: SchedulerKind | None = None) -> TrainConfig:
        seeds = seeds or self.seeds
        t = self.train
        steps = steps_from_epochs(self.data.spec.n_train, t.batch_size, t.epochs) if t.epochs > 0 else t.steps
        return TrainConfig(
            steps=steps,
            batch_size=t.batch_size,
            k=t.k,
            scheduler=scheduler or self.scheduler_kind(seeds),
            lr=t.lr,
            lr_schedule=t.lr_schedule,
            weight_decay=t.weight_decay,
            max_grad_norm=t.max_grad_norm,
            clip_trainable_only=t.clip_trainable_only,
            seeds=seeds,
            eval_every=t.eval_every,
            fisher_log_every=t.fisher_log_every,
            fisher_probe=_probe(self.fisher, seeds.fisher),
            checkpoint_every=t.checkpoint_every,
        )

    def validate(self) -> None:
        m = self.model
        if m.hidden != self.data.spec.h or m.classes != self.data.spec.C:
            raise ConfigError(
                f"model (hidden={m.hidden}, classes={m.classes}) does not match data (h={self.data.spec.h}, "
                f"C={self.data.spec.C})"
            )
        if self.data.path and m.pretrain_steps:
            raise ConfigError("pretraining needs a generated task; set model.pretrain_steps = 0 with data.path")
        self.train_config().validate(m.layers)


def _probe(section: ProbeSection, seed: int) -> FisherProbeConfig:
    return FisherProbeConfig(
        n_batches=section.n_batches, batch_size=section.batch_size, estimator=section.estimator, seed=seed
    )


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {sorted(unknown)}")
    values = {}
    for name, value in raw.items():
        default = getattr(cls(), name)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"[{where}] {name} must be a boolean")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"[{where}] {name} must be an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"[{where}] {name} must be a number")
            value = float(value)
        elif isinstance(default, tuple):
            value = tuple(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"[{where}] {name} must be a string")
        values[name] = value
    return cls(**values)


SECTIONS = ("model", "data", "train", "seeds", "fisher", "fun", "output")


def config_from_dict(raw: dict) -> ExperimentConfig:
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    data_raw = dict(raw.get("data", {}))
    path = data_raw.pop("path", "")
    if not isinstance(path, str):
        raise ConfigError("[data] path must be a string")
    cfg = ExperimentConfig(
        model=_build(ModelConfig, raw.get("model", {}), "model"),
        data=DataSection(_build(ShiftTaskSpec, data_raw, "data"), path),
        train=_build(TrainSection, raw.get("train", {}), "train"),
        seeds=_build(Seeds, raw.get("seeds", {}), "seeds"),
        fisher=_build(ProbeSection, raw.get("fisher", {}), "fisher"),
        fun=_build(ProbeSection, raw.get("fun", {}), "fun"),
        output=_build(OutputConfig, raw.get("output", {}), "output"),
    )
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    data = asdict(cfg.data.spec)
    data["path"] = cfg.data.path
    train = asdict(cfg.train)
    train["permutation"] = list(cfg.train.permutation)
    return {
        "model": asdict(cfg.model),
        "data": data,
        "train": train,
        "seeds": asdict(cfg.seeds),
        "fisher": asdict(cfg.fisher),
        "fun": asdict(cfg.fun),
        "output": asdict(cfg.output),
    }


def load_config(path) -> ExperimentConfig:
    try:
        raw = tomli.loads(Path(path).read_text())
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def with_overrides(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """Replace fields section by section, e.g. ``with_overrides(cfg, train={"scheduler": "FUN"})``."""
    raw = config_to_dict(cfg)
    for name, updates in sections.items():
        raw[name].update(updates)
    return config_from_dict(raw)


__all__ = [
    "DataSection",
    "ExperimentConfig",
    "ModelConfig",
    "OutputConfig",
    "ProbeSection",
    "TrainSection",
    "config_from_dict",
    "config_to_dict",
    "dump_config",
    "load_config",
    "with_overrides",
]
