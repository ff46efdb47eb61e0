"""Terminal rewards and synthetic staged digit-string tasks.

A pipeline family composes ``K`` named stage primitives over digit strings in a
fixed base. Instances are generated by one evaluator and can be re-checked by
:func:`oracle_answer`, which is written independently (string arithmetic rather
than numpy arrays).
"""

from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from neuromas.errors import TaskError
from neuromas.messaging import NO_ANSWER, TASK_KINDS, VERBATIM


def exact_match_reward(gold, predicted) -> float:
    """1 if the canonical answers are byte-equal, else 0. NO_ANSWER never matches."""
    if predicted is NO_ANSWER or gold is NO_ANSWER:
        return 0.0
    return 1.0 if predicted == gold else 0.0


@dataclass(frozen=True)
class TaskInstance:
    input: str
    gold: str
    task_kind: str = VERBATIM
    id: str = ""
    family: str = ""
    params: dict = field(default_factory=dict, compare=False, hash=False)

    def to_dict(self) -> dict:
        return {"id": self.id, "input": self.input, "gold": self.gold, "task_kind": self.task_kind}


# -- stage primitives -------------------------------------------------------------

_STAGE_RE = re.compile(
    r"^(?P<op>identity|reverse|neighbor-sum|carry|prefix-sum|shift-right|rotate-left|digit-sum|add|select)"
    r"(?:-(?P<arg>\d+))?(?:-mod-(?P<mod>\d+))?$"
)
_NEEDS_ARG = {"add", "select"}
_LENGTH_PRESERVING = {"identity", "reverse", "neighbor-sum", "carry", "prefix-sum", "shift-right", "rotate-left", "add"}


@dataclass(frozen=True)
class Stage:
    op: str
    arg: int | None
    mod: int

    @property
    def name(self) -> str:
        s = self.op if self.arg is None else f"{self.op}-{self.arg}"
        return s


def parse_stage(name: str, base: int) -> Stage:
    m = _STAGE_RE.match(name.strip())
    if not m:
        raise TaskError(f"unknown stage {name!r}")
    op, arg, mod = m.group("op"), m.group("arg"), m.group("mod")
    if (op in _NEEDS_ARG) != (arg is not None):
        raise TaskError(f"stage {name!r}: {op} {'needs' if op in _NEEDS_ARG else 'takes no'} integer argument")
    mod_value = int(mod) if mod is not None else base
    if not 1 <= mod_value <= base:
        # outputs must stay inside the input alphabet
        raise TaskError(f"stage {name!r}: modulus {mod_value} exceeds the digit base {base}")
    return Stage(op, int(arg) if arg is not None else None, mod_value)


def _apply_stage(stage: Stage, x: np.ndarray) -> np.ndarray:
    b = stage.mod
    if stage.op == "identity":
        return x.copy()
    if stage.op == "add":
        return (x + stage.arg) % b
    if stage.op == "reverse":
        return x[::-1].copy()
    if stage.op == "neighbor-sum":
        left = np.concatenate([[0], x[:-1]])
        return (x + left) % b
    if stage.op == "carry":
        # bump a digit whose left neighbour is the top digit
        left = np.concatenate([[0], x[:-1]])
        return (x + (left == b - 1)) % b
    if stage.op == "prefix-sum":
        return np.cumsum(x) % b
    if stage.op == "shift-right":
        return np.concatenate([[0], x[:-1]]).astype(x.dtype)
    if stage.op == "rotate-left":
        return np.roll(x, -1)
    if stage.op == "digit-sum":
        return np.array([x.sum() % b])
    if stage.op == "select":
        if not 1 <= stage.arg <= len(x):
            raise TaskError(f"select-{stage.arg} on a string of length {len(x)}")
        return x[stage.arg - 1 : stage.arg].copy()
    raise TaskError(f"unhandled stage {stage.op}")


@dataclass(frozen=True)
class PipelineTaskFamily:
    """``K`` stage primitives applied in order to a random digit string of length ``length``."""

    stages: tuple[str, ...]
    length: int
    base: int = 10
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise TaskError("a pipeline family needs at least one stage (K >= 1)")
        if not 2 <= self.base <= 10:
            raise TaskError(f"digit base must be in 2..10, got {self.base}")
        if self.length < 1:
            raise TaskError(f"input length must be >= 1, got {self.length}")
        n = self.length
        for s in self.parsed_stages():
            if s.op == "select" and not 1 <= s.arg <= n:
                raise TaskError(f"select-{s.arg} applied to strings of length {n}")
            n = n if s.op in _LENGTH_PRESERVING else 1
        if not self.name:
            object.__setattr__(self, "name", ">".join(self.stages))

    @property
    def K(self) -> int:
        return len(self.stages)

    @property
    def alphabet(self) -> str:
        return "".join(str(d) for d in range(self.base))

    def parsed_stages(self) -> list[Stage]:
        return [parse_stage(s, self.base) for s in self.stages]

    @property
    def output_length(self) -> int:
        n = self.length
        for s in self.parsed_stages():
            n = n if s.op in _LENGTH_PRESERVING else 1
        return n

    def describe(self) -> str:
        return "apply " + " then ".join(s.name for s in self.parsed_stages()) + " to"

    def render_input(self, digits: str) -> str:
        return f"{self.describe()} {digits}"

    def evaluate(self, digits: str) -> str:
        x = np.array([int(c) for c in digits], dtype=np.int64)
        for stage in self.parsed_stages():
            x = _apply_stage(stage, x)
        return "".join(str(int(d)) for d in x)

    def instance(self, digits: str) -> TaskInstance:
        return TaskInstance(
            self.render_input(digits),
            self.evaluate(digits),
            VERBATIM,
            id=f"{self.name}:{digits}",
            family=self.name,
            params={"digits": digits},
        )

    def to_dict(self) -> dict:
        return {"stages": list(self.stages), "length": self.length, "base": self.base, "name": self.name}

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineTaskFamily":
        return cls(tuple(data["stages"]), int(data["length"]), int(data.get("base", 10)), data.get("name", ""))


def generate_pipeline_instance(family: PipelineTaskFamily, rng: np.random.Generator) -> TaskInstance:
    digits = "".join(str(int(d)) for d in rng.integers(0, family.base, size=family.length))
    return family.instance(digits)


def all_instances(family: PipelineTaskFamily) -> list[TaskInstance]:
    return [family.instance("".join(t)) for t in itertools.product(family.alphabet, repeat=family.length)]


def split_instances(
    family: PipelineTaskFamily, n_train: int | None, n_dev: int, seed: int
) -> tuple[list[TaskInstance], list[TaskInstance]]:
    """Disjoint train/dev sets drawn without replacement from every possible input."""
    pool = all_instances(family)
    order = np.random.default_rng(seed).permutation(len(pool))
    if n_dev >= len(pool):
        raise TaskError(f"dev size {n_dev} leaves no training inputs out of {len(pool)}")
    dev = [pool[i] for i in order[:n_dev]]
    rest = [pool[i] for i in order[n_dev:]]
    train = rest if n_train is None else rest[:n_train]
    return train, dev


# -- independent reference evaluator -----------------------------------------------

_INPUT_TAIL_RE = re.compile(r"\bto (\S+)$")


def _oracle_stage(name: str, base: int) -> Callable[[str], str]:
    tokens = name.split("-")
    if tokens[-2:-1] == ["mod"]:
        mod = int(tokens[-1])
        tokens = tokens[:-2]
    else:
        mod = base
    head = "-".join(tokens)
    if head == "identity":
        return lambda s: s
    if head == "reverse":
        return lambda s: "".join(reversed(s))
    if head == "neighbor-sum":
        return lambda s: "".join(str((int(s[i]) + (int(s[i - 1]) if i else 0)) % mod) for i in range(len(s)))
    if head == "carry":
        top = str(mod - 1)
        return lambda s: "".join(
            str((int(s[i]) + (1 if i and s[i - 1] == top else 0)) % mod) for i in range(len(s))
        )
    if head == "prefix-sum":
        def prefix(s: str) -> str:
            acc, out = 0, []
            for ch in s:
                acc = (acc + int(ch)) % mod
                out.append(str(acc))
            return "".join(out)
        return prefix
    if head == "shift-right":
        return lambda s: ("0" + s)[: len(s)]
    if head == "rotate-left":
        return lambda s: s[1:] + s[:1]
    if head == "digit-sum":
        return lambda s: str(sum(int(c) for c in s) % mod)
    if head.startswith("add-"):
        k = int(head[4:])
        return lambda s: "".join(str((int(c) + k) % mod) for c in s)
    if head.startswith("select-"):
        i = int(head[7:])
        return lambda s: s[i - 1]
    raise TaskError(f"oracle does not know stage {name!r}")


def oracle_answer(family: PipelineTaskFamily, x: str) -> str:
    """Recompute the gold answer from the rendered input text."""
    m = _INPUT_TAIL_RE.search(x.strip())
    if not m:
        raise TaskError(f"malformed pipeline input {x!r}")
    digits = m.group(1)
    if len(digits) != family.length or any(c not in family.alphabet for c in digits):
        raise TaskError(f"malformed digit string {digits!r} for base {family.base}, length {family.length}")
    value = digits
    for name in family.stages:
        value = _oracle_stage(name, family.base)(value)
    return value


# -- task files -----------------------------------------------------------------------


def load_task_file(path: str | Path) -> list[TaskInstance]:
    """JSON lines with fields ``id``, ``input``, ``gold``, ``task_kind``."""
    tasks = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                kind = row.get("task_kind", VERBATIM)
                if kind not in TASK_KINDS:
                    raise TaskError(f"unknown task_kind {kind!r}")
                tasks.append(TaskInstance(str(row["input"]), str(row["gold"]), kind, str(row.get("id", lineno))))
            except (KeyError, json.JSONDecodeError) as exc:
                raise TaskError(f"{path}:{lineno}: bad task line ({exc})") from exc
    return tasks


def save_task_file(tasks: Iterable[TaskInstance], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for t in tasks:
            fh.write(json.dumps(t.to_dict()) + "\n")
    return path
