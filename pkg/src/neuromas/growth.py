"""Progressive topology growth: carry trained deltas into a larger topology.

Inherited nodes keep bit-exact copies of their deltas (and baselines). New
nodes get an inactive delta whose second factor is zero, so right after growth
they sample exactly like the frozen base. The base block is shared, never
copied or modified.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

from neuromas.errors import GrowthError
from neuromas.policy import PolicySet, delta_rng, zero_delta
from neuromas.tasks import TaskInstance
from neuromas.topology import InheritanceMap, Topology, growth_map
from neuromas.trainer import BaselineState, TrainConfig, train_loop, write_metrics

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "neuromas.schedule"
COMPARISON_COLUMNS = ("seed", "stage", "topology", "from_scratch_best_dev", "progressive_best_dev")


def grow(policies: PolicySet, target: Topology, *, seed: int | None = None) -> PolicySet:
    """New policy set on ``target``; the input is left untouched.

    Fresh deltas draw their first factor from the same per-node stream that
    :func:`init_policies` uses, keyed by ``seed`` (default: the seed the source
    was initialised with).
    """
    mapping = growth_map(policies.topology, target)
    if seed is None:
        seed = int(policies.meta.get("init_seed", 0))
    scale = float(policies.meta.get("init_scale", 0.1))
    dim, m = policies.featurizer.dim, policies.vocab.size
    for node in target.addresses():
        # raises if the feature config has no tag for this slot
        policies.features.tag_index(node)
    deltas = {new: policies.delta(old).copy() for new, old in mapping.inherited.items()}
    for node in mapping.fresh:
        deltas[node] = zero_delta(policies.rank, dim, m, delta_rng(seed, node), scale)
    meta = dict(policies.meta)
    meta["grown_from"] = str(policies.topology)
    return PolicySet(policies.vocab, policies.features, policies.rank, policies.base, deltas, target, meta)


def grow_baselines(baselines: BaselineState, mapping: InheritanceMap) -> BaselineState:
    values = {new: baselines[old] for new, old in mapping.inherited.items()}
    values.update({node: 0.0 for node in mapping.fresh})
    return BaselineState(values, baselines.rho)


@dataclass
class StageRecord:
    stage: int
    topology: Topology
    source_checkpoint: str | None
    inherited: list[str]
    fresh: list[str]
    initial_dev: float
    best_dev: float
    best_step: int
    dev_curve: list[tuple[int, float]]
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "topology": self.topology.dashed(),
            "source_checkpoint": self.source_checkpoint,
            "inherited": self.inherited,
            "fresh": self.fresh,
            "initial_dev": self.initial_dev,
            "best_dev": self.best_dev,
            "best_step": self.best_step,
            "dev_curve": [list(p) for p in self.dev_curve],
            "checkpoint": self.checkpoint,
        }


@dataclass
class ScheduleResult:
    stages: list[StageRecord]
    final: PolicySet
    baselines: BaselineState
    history: list[list[dict]] = field(default_factory=list)

    @property
    def best_devs(self) -> list[float]:
        return [s.best_dev for s in self.stages]


def _stage_configs(configs: TrainConfig | Sequence[TrainConfig], n: int) -> list[TrainConfig]:
    if isinstance(configs, TrainConfig):
        return [configs] * n
    configs = list(configs)
    if len(configs) != n:
        raise GrowthError(f"{n} schedule stages but {len(configs)} trainer configs")
    return configs


def growth_schedule_run(
    schedule: Sequence[Topology],
    configs: TrainConfig | Sequence[TrainConfig],
    train_tasks: Sequence[TaskInstance],
    dev_tasks: Sequence[TaskInstance],
    initial: PolicySet,
    *,
    out_dir: str | Path | None = None,
) -> ScheduleResult:
    """Train ``schedule[0]`` from ``initial``, then grow from each stage's best checkpoint.

    The optimizer is rebuilt at every stage, so moment estimates never cross a
    growth step. Baselines do carry over for inherited nodes.
    """
    if not schedule:
        raise GrowthError("empty growth schedule")
    if initial.topology != schedule[0]:
        raise GrowthError(f"initial policies are on {initial.topology}, schedule starts at {schedule[0]}")
    # validate the whole chain before spending any compute
    for a, b in zip(schedule, schedule[1:]):
        growth_map(a, b)
    configs = _stage_configs(configs, len(schedule))
    out = Path(out_dir) if out_dir is not None else None

    policies, baselines = initial, None
    stages: list[StageRecord] = []
    histories: list[list[dict]] = []
    source_ckpt: str | None = None
    inherited: list[str] = []
    fresh = [str(a) for a in schedule[0].addresses()]
    for i, (topo, cfg) in enumerate(zip(schedule, configs), start=1):
        if i > 1:
            mapping = growth_map(policies.topology, topo)
            policies = grow(policies, topo)
            baselines = grow_baselines(baselines, mapping)
            inherited = [str(a) for a in sorted(mapping.inherited)]
            fresh = [str(a) for a in mapping.fresh]
        result = train_loop(policies, topo, train_tasks, dev_tasks, cfg, baselines=baselines)
        ckpt = None
        if out is not None:
            stage_dir = out / f"stage{i}_{topo.dashed()}"
            ckpt = str(result.best.save(stage_dir / "best.json"))
            write_metrics(result.history, stage_dir / "metrics.csv")
        stages.append(StageRecord(i, topo, source_ckpt, inherited, fresh, result.initial_dev,
                                  result.best_dev, result.best_step, list(result.checkpoints), ckpt))
        histories.append(result.history)
        log.info("stage %d %s best dev %.3f", i, topo, result.best_dev)
        policies, baselines, source_ckpt = result.best, result.baselines, ckpt
    run = ScheduleResult(stages, policies, baselines, histories)
    if out is not None:
        write_manifest(run, schedule, out / "manifest.json")
    return run


def write_manifest(run: ScheduleResult, schedule: Sequence[Topology], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": MANIFEST_FORMAT,
        "schedule": [t.dashed() for t in schedule],
        "stages": [s.to_dict() for s in run.stages],
    }
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


@dataclass
class ComparisonRow:
    seed: int
    stage: int
    topology: Topology
    from_scratch_best_dev: float
    progressive_best_dev: float

    def to_row(self) -> dict:
        return {
            "seed": self.seed,
            "stage": self.stage,
            "topology": self.topology.dashed(),
            "from_scratch_best_dev": repr(float(self.from_scratch_best_dev)),
            "progressive_best_dev": repr(float(self.progressive_best_dev)),
        }


def compare_schedule(
    schedule: Sequence[Topology],
    configs: TrainConfig | Sequence[TrainConfig],
    train_tasks: Sequence[TaskInstance],
    dev_tasks: Sequence[TaskInstance],
    make_policies: Callable[[Topology, int], PolicySet],
    seeds: Sequence[int],
    *,
    control_steps: str = "stage",
    out_dir: str | Path | None = None,
) -> list[ComparisonRow]:
    """Progressive schedule vs. training each schedule topology from scratch, per seed.

    ``control_steps="stage"`` trains a from-scratch control with its own stage's
    config; ``"cumulative"`` gives it the summed step budget of every stage up
    to and including that one.
    """
    if control_steps not in ("stage", "cumulative"):
        raise GrowthError(f"control_steps must be 'stage' or 'cumulative', got {control_steps!r}")
    configs = _stage_configs(configs, len(schedule))
    rows: list[ComparisonRow] = []
    for seed in seeds:
        seeded = [replace(c, seed=seed) for c in configs]
        sub = Path(out_dir) / f"seed{seed}" if out_dir is not None else None
        prog = growth_schedule_run(
            schedule, seeded, train_tasks, dev_tasks, make_policies(schedule[0], seed),
            out_dir=sub / "progressive" if sub else None,
        )
        for i, topo in enumerate(schedule):
            cfg = seeded[i]
            if control_steps == "cumulative":
                cfg = replace(cfg, steps=sum(c.steps for c in seeded[: i + 1]))
            if i == 0:
                # the first progressive stage is itself a from-scratch run
                scratch_best = prog.stages[0].best_dev
            else:
                res = train_loop(make_policies(topo, seed), topo, train_tasks, dev_tasks, cfg)
                scratch_best = res.best_dev
                if sub is not None:
                    write_metrics(res.history, sub / "scratch" / f"{topo.dashed()}.csv")
            rows.append(ComparisonRow(seed, i + 1, topo, scratch_best, prog.stages[i].best_dev))
            log.info("seed %d %s scratch %.3f progressive %.3f", seed, topo, scratch_best, prog.stages[i].best_dev)
    if out_dir is not None:
        write_comparison(rows, Path(out_dir) / "comparison.csv")
    return rows


def write_comparison(rows: Sequence[ComparisonRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARISON_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r.to_row())
    return path
