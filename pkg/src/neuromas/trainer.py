"""Joint terminal-reward training of every node delta.

Each node's loss term is ``-(r - b_v) * mean_token_logprob_v`` where ``r`` is the
single terminal reward shared by all nodes and ``b_v`` is the node's
exponential-moving-average baseline. A node's term only touches its own delta.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from neuromas.errors import TrainingError
from neuromas.messaging import NONE, Footer
from neuromas.policy import GREEDY, SAMPLE, NodeGrad, PolicySet, grad_mean_logprob, grad_sequence_logprob, mean_logprob
from neuromas.runtime import Trace, enumerate_traces, forward
from neuromas.tasks import TaskInstance, exact_match_reward
from neuromas.topology import NodeAddress, Topology

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step",
    "mean_reward",
    "loss",
    "grad_norm_preclip",
    "grad_norm_postclip",
    "dev_accuracy",
    "wallclock_s",
)


# -- baselines --------------------------------------------------------------------


def update_baseline(b: float, r: float, rho: float) -> float:
    if not 0.0 <= b <= 1.0:
        raise TrainingError(f"baseline must lie in [0, 1], got {b}")
    if not 0.0 <= r <= 1.0:
        raise TrainingError(f"reward must lie in [0, 1], got {r}")
    if not 0.0 < rho < 1.0:
        raise TrainingError(f"decay must lie in (0, 1), got {rho}")
    return rho * b + (1.0 - rho) * r


@dataclass
class BaselineState:
    values: dict[NodeAddress, float]
    rho: float = 0.9

    @classmethod
    def zeros(cls, topology: Topology, rho: float = 0.9) -> "BaselineState":
        return cls({a: 0.0 for a in topology.addresses()}, rho)

    def __getitem__(self, node: NodeAddress) -> float:
        try:
            return self.values[node]
        except KeyError:
            raise TrainingError(f"no baseline for node {node}") from None

    def observe(self, reward: float) -> None:
        for node, b in self.values.items():
            self.values[node] = update_baseline(b, reward, self.rho)

    def copy(self) -> "BaselineState":
        return BaselineState(dict(self.values), self.rho)

    def to_dict(self) -> dict:
        return {"rho": self.rho, "values": {str(k): v for k, v in sorted(self.values.items())}}

    @classmethod
    def from_dict(cls, data: dict) -> "BaselineState":
        return cls({NodeAddress.parse(k): float(v) for k, v in data["values"].items()}, float(data["rho"]))


# -- configuration ----------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-2
    clip: float = 1.0
    batch_size: int = 16
    steps: int = 200
    checkpoint_interval: int = 20
    dev_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    baseline_decay: float = 0.9
    max_tokens: int = 8
    seed: int = 0
    record_wallclock: bool = False

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise TrainingError(f"learning rate must be > 0, got {self.lr}")
        if self.clip <= 0:
            raise TrainingError(f"clip norm must be > 0, got {self.clip}")
        if self.batch_size < 1:
            raise TrainingError(f"batch size must be >= 1, got {self.batch_size}")
        if self.steps < 0 or self.checkpoint_interval < 1:
            raise TrainingError("steps must be >= 0 and checkpoint_interval >= 1")

    @classmethod
    def from_dict(cls, data: dict | None) -> "TrainConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise TrainingError(f"unknown trainer settings: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


class AdamW:
    """Adam with decoupled weight decay over every node delta."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr, self.beta1, self.beta2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.t = 0
        self.m: dict[tuple[NodeAddress, str], np.ndarray] = {}
        self.v: dict[tuple[NodeAddress, str], np.ndarray] = {}

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "AdamW":
        return cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)

    def step(self, policies: PolicySet, grads: dict[NodeAddress, NodeGrad]) -> None:
        """Descend along ``grads`` (gradients of the loss)."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for node, g in grads.items():
            delta = policies.delta(node)
            for name, param, grad in (("A", delta.A, g.A), ("B", delta.B, g.B)):
                key = (node, name)
                m = self.m.setdefault(key, np.zeros_like(param))
                v = self.v.setdefault(key, np.zeros_like(param))
                m *= self.beta1
                m += (1 - self.beta1) * grad
                v *= self.beta2
                v += (1 - self.beta2) * grad * grad
                if self.wd:
                    param -= self.lr * self.wd * param
                param -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- loss and gradients ---------------------------------------------------------------


def _require_reward(trace: Trace) -> float:
    if trace.reward is None:
        raise TrainingError("trace has not been scored (reward is missing)")
    return float(trace.reward)


def surrogate_loss(trace: Trace, baselines: BaselineState, policies: PolicySet) -> tuple[float, dict[NodeAddress, float]]:
    """Total sampled loss and the per-node terms ``-(r - b_v) * mean_logprob_v``."""
    r = _require_reward(trace)
    terms = {}
    for rec in trace.records:
        lbar = mean_logprob(policies, rec.node, rec.context_tokens, rec.sample.tokens)
        terms[rec.node] = -(r - baselines[rec.node]) * lbar
    return float(sum(terms.values())), terms


def surrogate_grad(
    trace: Trace, baselines: BaselineState, policies: PolicySet, *, mean_tokens: bool = True
) -> dict[NodeAddress, NodeGrad]:
    """Gradient of the sampled loss; node v's block depends only on its own record.

    With ``mean_tokens=False`` the full-sequence log-prob is used instead of the
    per-token mean, which gives the textbook score-function estimator.
    """
    r = _require_reward(trace)
    out = {}
    for rec in trace.records:
        adv = r - baselines[rec.node]
        if adv == 0.0:
            continue
        fn = grad_mean_logprob if mean_tokens else grad_sequence_logprob
        g = fn(policies, rec.node, rec.context_tokens, rec.sample.tokens)
        out[rec.node] = NodeGrad(-adv * g.A, -adv * g.B, g.base)
    return out


def global_norm(grads: dict[NodeAddress, NodeGrad]) -> float:
    return float(np.sqrt(sum(float((g.A**2).sum() + (g.B**2).sum()) for g in grads.values())))


def clip_grads(grads: dict[NodeAddress, NodeGrad], max_norm: float) -> tuple[float, float]:
    pre = global_norm(grads)
    if pre > max_norm:
        scale = max_norm / pre
        for g in grads.values():
            g.A *= scale
            g.B *= scale
    return pre, min(pre, max_norm)


def score(trace: Trace, task: TaskInstance) -> float:
    trace.reward = exact_match_reward(task.gold, trace.answer)
    return trace.reward


@dataclass
class StepMetrics:
    mean_reward: float
    loss: float
    grad_norm_preclip: float
    grad_norm_postclip: float


def train_step(
    policies: PolicySet,
    topology: Topology,
    batch: Sequence[TaskInstance],
    baselines: BaselineState,
    config: TrainConfig,
    optimizer: AdamW,
    *,
    episode_offset: int = 0,
    footer: Footer = Footer(NONE),
) -> StepMetrics:
    """One sampled batch: forward, score, node-wise surrogate gradient, clip, AdamW.

    Baselines stream through the batch; each instance's loss uses the values
    held before its own reward is observed.
    """
    if not batch:
        raise TrainingError("empty batch")
    total: dict[NodeAddress, NodeGrad] = {}
    rewards, losses = [], []
    for i, task in enumerate(batch):
        tr = forward(
            policies, topology, task.input, seed=config.seed, episode=episode_offset + i, mode=SAMPLE,
            footer=footer, task_kind=task.task_kind, max_tokens=config.max_tokens,
        )
        r = score(tr, task)
        rewards.append(r)
        losses.append(sum(-(r - baselines[rec.node]) * rec.sample.mean_logprob for rec in tr.records))
        for node, g in surrogate_grad(tr, baselines, policies).items():
            acc = total.get(node)
            if acc is None:
                total[node] = g
            else:
                acc.A += g.A
                acc.B += g.B
        baselines.observe(r)
    n = len(batch)
    for g in total.values():
        g.A /= n
        g.B /= n
    pre, post = clip_grads(total, config.clip)
    if total:
        optimizer.step(policies, total)
    return StepMetrics(float(np.mean(rewards)), float(np.mean(losses)), pre, post)


def evaluate(
    policies: PolicySet,
    topology: Topology,
    tasks: Sequence[TaskInstance],
    *,
    max_tokens: int,
    footer: Footer = Footer(NONE),
    seed: int = 0,
) -> float:
    """Greedy-decoding exact-match accuracy."""
    if not tasks:
        return 0.0
    hits = 0.0
    for i, task in enumerate(tasks):
        tr = forward(policies, topology, task.input, seed=seed, episode=i, mode=GREEDY,
                     footer=footer, task_kind=task.task_kind, max_tokens=max_tokens)
        hits += exact_match_reward(task.gold, tr.answer)
    return hits / len(tasks)


@dataclass
class TrainResult:
    best: PolicySet
    best_step: int
    best_dev: float
    initial_dev: float
    final: PolicySet
    baselines: BaselineState
    history: list[dict] = field(default_factory=list)
    checkpoints: list[tuple[int, float]] = field(default_factory=list)


def train_loop(
    policies: PolicySet,
    topology: Topology,
    train_tasks: Sequence[TaskInstance],
    dev_tasks: Sequence[TaskInstance],
    config: TrainConfig,
    *,
    baselines: BaselineState | None = None,
    footer: Footer = Footer(NONE),
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    """Train for ``config.steps`` and keep the best greedy dev checkpoint (earliest on ties).

    The starting parameters are evaluated as step 0 and are a candidate.
    """
    train_ids = {t.input for t in train_tasks}
    if any(t.input in train_ids for t in dev_tasks):
        raise TrainingError("train and dev sets overlap")
    if not train_tasks and config.steps:
        raise TrainingError("no training tasks")
    policies = policies.copy()
    baselines = baselines.copy() if baselines is not None else BaselineState.zeros(topology, config.baseline_decay)
    optimizer = AdamW.from_config(config)
    rng = np.random.default_rng([config.seed, 1])
    t0 = time.perf_counter()
    history: list[dict] = []
    checkpoints: list[tuple[int, float]] = []

    def checkpoint(step: int, row: dict) -> float:
        acc = evaluate(policies, topology, dev_tasks, max_tokens=config.max_tokens, footer=footer, seed=config.seed)
        row["dev_accuracy"] = acc
        checkpoints.append((step, acc))
        if checkpoint_dir is not None:
            policies.save(Path(checkpoint_dir) / f"step{step:06d}.json")
        return acc

    row0 = _row(0, None, t0, config)
    best_dev = initial_dev = checkpoint(0, row0)
    history.append(row0)
    best, best_step = policies.copy(), 0
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(train_tasks), size=config.batch_size)
        batch = [train_tasks[i] for i in idx]
        metrics = train_step(
            policies, topology, batch, baselines, config, optimizer,
            episode_offset=(step - 1) * config.batch_size, footer=footer,
        )
        row = _row(step, metrics, t0, config)
        if step % config.checkpoint_interval == 0 or step == config.steps:
            acc = checkpoint(step, row)
            if acc > best_dev:
                best_dev, best, best_step = acc, policies.copy(), step
            log.info("step %d reward %.3f dev %.3f", step, metrics.mean_reward, acc)
        history.append(row)
    return TrainResult(best, best_step, best_dev, initial_dev, policies, baselines, history, checkpoints)


def _row(step: int, m: StepMetrics | None, t0: float, config: TrainConfig) -> dict:
    row = {c: "" for c in METRIC_COLUMNS}
    row["step"] = step
    if m is not None:
        row.update(asdict(m))
    if config.record_wallclock:
        row["wallclock_s"] = round(time.perf_counter() - t0, 3)
    return row


def write_metrics(history: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: _fmt(v) for k, v in row.items()})
    return path


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -- exact oracles -------------------------------------------------------------------------


def estimate_gradient_bruteforce(
    policies: PolicySet,
    topology: Topology,
    question: str,
    gold: str,
    baselines: BaselineState | None,
    max_tokens: int,
    **kwargs,
) -> dict[NodeAddress, np.ndarray]:
    """Exact policy gradient: sum over every joint trace of p * (r - b_v) * grad log pi_v."""
    out = {a: np.zeros(policies.delta(a).size) for a in topology.addresses()}
    for tr, p in enumerate_traces(policies, topology, question, max_tokens, **kwargs):
        r = exact_match_reward(gold, tr.answer)
        for rec in tr.records:
            b = baselines[rec.node] if baselines is not None else 0.0
            if p == 0.0 or r == b:
                continue
            g = grad_sequence_logprob(policies, rec.node, rec.context_tokens, rec.sample.tokens)
            out[rec.node] += p * (r - b) * g.flat()
    return out
