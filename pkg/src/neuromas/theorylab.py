"""Parameter-budget sweeps comparing a modular chain against a single policy.

For each budget ``q`` both architectures get (nearly) ``q`` trainable
parameters, are trained under the same task split, and the best dev
exact-match error over seeds is recorded. Best-of-seeds is the empirical
stand-in for the smallest error achievable within the class, which cannot be
observed directly.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from neuromas.config import ModelSpec, TaskSpec, build_model
from neuromas.errors import SweepError
from neuromas.policy import param_count
from neuromas.topology import Topology
from neuromas.trainer import TrainConfig, train_loop

log = logging.getLogger(__name__)

SINGLE = "single"
MULTI = "multi"
BUDGET_TOLERANCE = 0.10
CELL_COLUMNS = ("architecture", "q", "seed", "params", "rank", "window", "error")


def chain_topology(K: int, width: int = 1) -> Topology:
    if K < 1 or width < 1:
        raise SweepError(f"chain needs K >= 1 and width >= 1, got K={K}, width={width}")
    return Topology((width,) * K)


@dataclass(frozen=True)
class SweepSpec:
    task: TaskSpec
    budgets: tuple[int, ...]
    seeds: tuple[int, ...] = (0, 1, 2)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    architectures: tuple[str, ...] = (SINGLE, MULTI)
    multi_width: int = 1
    windows: tuple[int, ...] = ()
    max_rank: int = 64
    split_seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        b = list(self.budgets)
        if not b:
            raise SweepError("no budgets given")
        if any(x <= 0 for x in b) or any(x >= y for x, y in zip(b, b[1:])):
            raise SweepError(f"budgets must be positive and strictly increasing, got {b}")
        if not self.seeds:
            raise SweepError("no seeds given")
        for a in self.architectures:
            if a not in (SINGLE, MULTI):
                raise SweepError(f"unknown architecture {a!r}")

    def topology(self, arch: str) -> Topology:
        if arch == SINGLE:
            return Topology(())
        return chain_topology(self.task.family().K, self.multi_width)

    def candidate_windows(self) -> tuple[int, ...]:
        return self.windows or (self.model.window or self.task.length + 2,)

    @classmethod
    def from_config(cls, sweep: dict, task: TaskSpec, trainer: TrainConfig, model: ModelSpec, seed: int = 0) -> "SweepSpec":
        allowed = {"budgets", "seeds", "architectures", "multi_width", "windows", "max_rank", "workers"}
        unknown = set(sweep) - allowed
        if unknown:
            raise SweepError(f"sweep: unknown keys {sorted(unknown)}")
        if "budgets" not in sweep:
            raise SweepError("sweep: missing 'budgets'")
        return cls(
            task=task,
            budgets=tuple(int(q) for q in sweep["budgets"]),
            seeds=tuple(int(s) for s in sweep.get("seeds", (0, 1, 2))),
            trainer=trainer,
            model=model,
            architectures=tuple(sweep.get("architectures", (SINGLE, MULTI))),
            multi_width=int(sweep.get("multi_width", 1)),
            windows=tuple(int(w) for w in sweep.get("windows", ())),
            max_rank=int(sweep.get("max_rank", 64)),
            split_seed=seed,
            workers=int(sweep.get("workers", 1)),
        )


@dataclass(frozen=True)
class CellPlan:
    architecture: str
    q: int
    rank: int
    window: int
    params: int


def params_per_rank(spec: SweepSpec, arch: str, window: int | None = None) -> int:
    """Total trainable parameters of ``arch`` at rank 1; every budget is a multiple of this."""
    window = window or spec.candidate_windows()[0]
    topo = spec.topology(arch)
    model = build_model(spec.task, replace(spec.model, window=window, rank=1), depth=topo.depth, width=topo.max_width)
    return param_count(model.init(topo, 0, rank=1), "total-trainable")


def plan_cell(spec: SweepSpec, arch: str, q: int) -> CellPlan:
    """Pick (rank, window) whose total trainable count is closest to ``q``."""
    best: CellPlan | None = None
    achievable = []
    for window in spec.candidate_windows():
        unit = params_per_rank(spec, arch, window)
        for rank in range(1, spec.max_rank + 1):
            n = unit * rank
            achievable.append(n)
            if best is None or abs(n - q) < abs(best.params - q):
                best = CellPlan(arch, q, rank, window, n)
    if best is None or abs(best.params - q) / q > BUDGET_TOLERANCE:
        near = sorted(set(achievable), key=lambda n: abs(n - q))[:6]
        raise SweepError(
            f"budget q={q} cannot be realised for {arch} within {BUDGET_TOLERANCE:.0%}; "
            f"nearest achievable budgets: {sorted(near)}"
        )
    return best


@dataclass(frozen=True)
class CellResult:
    architecture: str
    q: int
    seed: int
    params: int
    rank: int
    window: int
    error: float

    def to_row(self) -> dict:
        return {k: (repr(v) if isinstance(v, float) else v) for k, v in self.__dict__.items()}


def run_cell(spec: SweepSpec, plan: CellPlan, seed: int) -> CellResult:
    topo = spec.topology(plan.architecture)
    model = build_model(spec.task, replace(spec.model, window=plan.window, rank=plan.rank),
                        depth=topo.depth, width=topo.max_width)
    policies = model.init(topo, seed)
    realised = param_count(policies, "total-trainable")
    train, dev = spec.task.split(spec.trainer.dev_size, spec.split_seed)
    cfg = replace(spec.trainer, seed=seed)
    res = train_loop(policies, topo, train, dev, cfg)
    log.info("%s q=%d seed=%d rank=%d best dev %.3f", plan.architecture, plan.q, seed, plan.rank, res.best_dev)
    return CellResult(plan.architecture, plan.q, seed, realised, plan.rank, plan.window, 1.0 - res.best_dev)


@dataclass(frozen=True)
class Fit:
    slope: float
    intercept: float
    r2: float
    n_points: int
    residuals: tuple[float, ...] = ()
    excluded: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r2": self.r2, "n_points": self.n_points,
                "residuals": list(self.residuals), "excluded_q": list(self.excluded)}


def fit_exponent(points: Sequence[tuple[float, float]]) -> Fit:
    """OLS of log(error) on log(q). Zero errors are dropped with a warning."""
    kept, dropped = [], []
    for q, e in points:
        if q <= 0:
            raise SweepError(f"budget must be positive, got {q}")
        if e < 0:
            raise SweepError(f"error must be >= 0, got {e}")
        (dropped if e == 0 else kept).append((q, e))
    if dropped:
        warnings.warn(f"excluding {len(dropped)} zero-error point(s) from the log-log fit", RuntimeWarning, stacklevel=2)
    if len(kept) < 3:
        raise SweepError(f"need at least 3 points with error > 0 to fit, got {len(kept)}")
    x = np.log([q for q, _ in kept])
    y = np.log([e for _, e in kept])
    X = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float((resid**2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return Fit(float(slope), float(intercept), r2, len(kept), tuple(float(r) for r in resid),
               tuple(float(q) for q, _ in dropped))


@dataclass
class OrderingReport:
    per_budget: list[dict]
    q0: int | None

    @property
    def q0_text(self) -> str:
        return "none observed" if self.q0 is None else str(self.q0)

    def to_dict(self) -> dict:
        return {"per_budget": self.per_budget, "q0": self.q0, "q0_text": self.q0_text}


@dataclass
class SweepResult:
    spec: SweepSpec
    cells: list[CellResult]

    def best(self, arch: str) -> dict[int, float]:
        """Best-of-seeds error per budget."""
        out: dict[int, float] = {}
        for c in self.cells:
            if c.architecture == arch:
                out[c.q] = min(out.get(c.q, math.inf), c.error)
        return dict(sorted(out.items()))

    def fits(self) -> dict[str, dict]:
        out = {}
        for arch in self.spec.architectures:
            pts = list(self.best(arch).items())
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    out[arch] = fit_exponent(pts).to_dict()
            except SweepError as exc:
                out[arch] = {"error": str(exc)}
        return out


def check_ordering(result: SweepResult) -> OrderingReport:
    """Per shared budget, the sign of multi minus single error, and the crossover budget.

    ``q0`` is the smallest tested budget from which multi is strictly better at
    every larger tested budget.
    """
    multi, single = result.best(MULTI), result.best(SINGLE)
    shared = sorted(set(multi) & set(single))
    if not shared:
        raise SweepError("no budget was run for both architectures")
    rows = []
    for q in shared:
        diff = multi[q] - single[q]
        rows.append({"q": q, "multi_error": multi[q], "single_error": single[q], "sign": int(np.sign(diff))})
    q0 = None
    for row in reversed(rows):
        if row["sign"] < 0:
            q0 = row["q"]
        else:
            break
    return OrderingReport(rows, q0)


def _run_job(args):
    spec, plan, seed = args
    return run_cell(spec, plan, seed)


def run_sweep(spec: SweepSpec) -> SweepResult:
    plans = [plan_cell(spec, arch, q) for arch in spec.architectures for q in spec.budgets]
    jobs = [(spec, p, s) for p in plans for s in spec.seeds]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            cells = list(pool.map(_run_job, jobs))
    else:
        cells = [_run_job(j) for j in jobs]
    for c in cells:
        if abs(c.params - c.q) / c.q > BUDGET_TOLERANCE:
            raise SweepError(f"cell {c.architecture} q={c.q} realised {c.params} parameters")
    return SweepResult(spec, cells)


def write_sweep(result: SweepResult, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells_path = out / "sweep_cells.csv"
    with cells_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CELL_COLUMNS, lineterminator="\n")
        w.writeheader()
        for c in result.cells:
            w.writerow(c.to_row())
    ordering = check_ordering(result) if {SINGLE, MULTI} <= set(result.spec.architectures) else None
    summary = {
        "family": result.spec.task.family().to_dict(),
        "error_statistic": "best-of-seeds dev exact-match error (proxy for the class minimum)",
        "seeds": list(result.spec.seeds),
        "best_error": {a: {str(q): e for q, e in result.best(a).items()} for a in result.spec.architectures},
        "fits": result.fits(),
        "ordering": ordering.to_dict() if ordering else None,
    }
    summary_path = out / "sweep_summary.json"
    summary_path.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return cells_path, summary_path
