"""Declarative run configuration (YAML) and the toy-model factory it describes.

Top-level keys::

    seed: 0                      # master seed (trainer seed, init seed, split seed)
    topology: "1-1"              # dashed or bracketed; "[]" is the single-policy case
    task:     {stages: [...], length: 6, base: 2, n_train: null}
    model:    {rank, window, pairs, n_buckets, copy_strength, copy_offset, eos_bias, init_scale, noise}
    trainer:  any TrainConfig field (lr, steps, batch_size, ...)
    schedule: {topologies: [...], seeds: [...], stages: [{...trainer overrides...}], control_steps: stage}
    sweep:    {budgets: [...], seeds: [...], architectures: [single, multi], multi_width: 1, workers: 1}
    endpoint: {base_url, model, token_env, timeout, max_new_tokens, mode}
    output_dir: runs/example

Unknown keys are rejected so that typos do not silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from neuromas.errors import NeuroMASError
from neuromas.policy import FeatureConfig, PolicySet, Vocabulary, init_policies, make_base
from neuromas.tasks import PipelineTaskFamily, TaskInstance, split_instances
from neuromas.topology import Topology, parse_topology
from neuromas.trainer import TrainConfig


class ConfigError(NeuroMASError):
    pass


def _check_keys(section: str, data: dict, allowed) -> None:
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")


def topology_from_text(text) -> Topology:
    if isinstance(text, (list, tuple)):
        return Topology(tuple(int(w) for w in text))
    text = str(text).strip()
    if text in ("[]", "", "single", "none"):
        return Topology(())
    return parse_topology(text)


@dataclass(frozen=True)
class TaskSpec:
    stages: tuple[str, ...]
    length: int
    base: int = 10
    n_train: int | None = None

    def family(self) -> PipelineTaskFamily:
        return PipelineTaskFamily(tuple(self.stages), self.length, self.base)

    def split(self, n_dev: int, seed: int) -> tuple[list[TaskInstance], list[TaskInstance]]:
        return split_instances(self.family(), self.n_train, n_dev, seed)

    @classmethod
    def from_dict(cls, data: dict) -> "TaskSpec":
        _check_keys("task", data, ("stages", "length", "base", "n_train"))
        try:
            return cls(tuple(data["stages"]), int(data["length"]), int(data.get("base", 10)), data.get("n_train"))
        except KeyError as exc:
            raise ConfigError(f"task: missing key {exc}") from None


@dataclass(frozen=True)
class ModelSpec:
    """Toy-policy hyperparameters.

    ``window`` and ``copy_offset`` default to ``length + 2`` and ``length + 1``,
    which lines the copied input digit up with the digit being generated.
    """

    rank: int = 2
    window: int | None = None
    pairs: bool = True
    n_buckets: int = 2
    copy_strength: float = 2.0
    copy_offset: int | None = None
    eos_bias: float = -2.0
    init_scale: float = 0.5
    noise: float = 0.0

    @classmethod
    def from_dict(cls, data: dict | None) -> "ModelSpec":
        data = dict(data or {})
        _check_keys("model", data, [f.name for f in fields(cls)])
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ToyModel:
    """Everything needed to instantiate policies for any topology on one task."""

    vocab: Vocabulary
    features: FeatureConfig
    base: Any
    rank: int
    init_scale: float

    def init(self, topology: Topology, seed: int, rank: int | None = None) -> PolicySet:
        return init_policies(
            topology, self.vocab, self.features, self.rank if rank is None else rank, self.base,
            seed=seed, init_scale=self.init_scale,
        )


def build_model(task: TaskSpec, model: ModelSpec, *, window: int | None = None, depth: int = 4, width: int = 4) -> ToyModel:
    vocab = Vocabulary.digits(task.base)
    w = window or model.window or task.length + 2
    feats = FeatureConfig(window=w, pairs=model.pairs, n_buckets=model.n_buckets,
                          max_depth=max(depth, 4), max_width=max(width, 4))
    offset = model.copy_offset or task.length + 1
    if offset > w:
        offset = None
    base = make_base(vocab, feats, copy_offset=offset, copy_strength=model.copy_strength if offset else 0.0,
                     eos_bias=model.eos_bias, noise=model.noise)
    return ToyModel(vocab, feats, base, model.rank, model.init_scale)


@dataclass
class RunConfig:
    seed: int = 0
    topology: Topology = field(default_factory=lambda: parse_topology("1-1"))
    task: TaskSpec | None = None
    model: ModelSpec = field(default_factory=ModelSpec)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    schedule: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    endpoint: dict = field(default_factory=dict)
    output_dir: str = "runs/default"
    source: str = ""

    def require_task(self) -> TaskSpec:
        if self.task is None:
            raise ConfigError("config has no 'task' section")
        return self.task

    def build_model(self) -> ToyModel:
        task = self.require_task()
        depth = max([self.topology.depth] + [topology_from_text(t).depth for t in self.schedule.get("topologies", [])])
        width = max([self.topology.max_width] + [topology_from_text(t).max_width for t in self.schedule.get("topologies", [])])
        return build_model(task, self.model, depth=depth, width=width)

    def splits(self) -> tuple[list[TaskInstance], list[TaskInstance]]:
        return self.require_task().split(self.trainer.dev_size, self.seed)


_TOP_KEYS = ("seed", "topology", "task", "model", "trainer", "schedule", "sweep", "endpoint", "output_dir")


def config_from_dict(data: dict, source: str = "") -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    _check_keys("config", data, _TOP_KEYS)
    seed = int(data.get("seed", 0))
    task = TaskSpec.from_dict(data["task"]) if data.get("task") else None
    trainer_data = dict(data.get("trainer") or {})
    trainer_data.setdefault("seed", seed)
    if task is not None:
        trainer_data.setdefault("max_tokens", task.family().output_length)
    try:
        trainer = TrainConfig.from_dict(trainer_data)
        topology = topology_from_text(data.get("topology", "1-1"))
    except NeuroMASError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(
        seed=seed,
        topology=topology,
        task=task,
        model=ModelSpec.from_dict(data.get("model")),
        trainer=trainer,
        schedule=dict(data.get("schedule") or {}),
        sweep=dict(data.get("sweep") or {}),
        endpoint=dict(data.get("endpoint") or {}),
        output_dir=str(data.get("output_dir", "runs/default")),
        source=source,
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    return config_from_dict(data or {}, str(path))
