"""Role-free node prompts and the deterministic message parser.

Prompts carry only the task input, the node's structural position, the
topology, and incoming messages. The templates live as text files next to this
module so they can be diffed against the reference listings byte for byte.
"""

from __future__ import annotations

import re
import textwrap
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Sequence

from neuromas.errors import MessagingError
from neuromas.topology import NodeAddress, Topology

MULTIPLE_CHOICE = "multiple-choice"
YES_NO = "yes-no"
CODE = "code"
NONE = "none"
VERBATIM = "verbatim"

FOOTER_KINDS = (MULTIPLE_CHOICE, YES_NO, CODE, NONE)
TASK_KINDS = (MULTIPLE_CHOICE, YES_NO, CODE, VERBATIM)

# words a renderer must never inject into a node prompt
ROLE_WORDS = ("planner", "solver", "critic", "verifier", "judge", "reviewer")


class _NoAnswer:
    """Canonical value of a generation that matches no answer pattern."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "NO_ANSWER"

    def __bool__(self) -> bool:
        return False

    def __reduce__(self):
        return (_NoAnswer, ())


NO_ANSWER = _NoAnswer()


@dataclass(frozen=True)
class Footer:
    kind: str = NONE
    function_prompt: str = ""

    def __post_init__(self) -> None:
        if self.kind not in FOOTER_KINDS:
            raise MessagingError(f"unknown footer kind {self.kind!r}; expected one of {FOOTER_KINDS}")

    def render(self) -> str:
        if self.kind == NONE:
            return ""
        text = _template(f"footer_{self.kind.replace('-', '_')}")
        if self.kind == CODE:
            text = text.format(function_prompt=self.function_prompt)
        return text


def footer_for_task(task_kind: str, function_prompt: str = "") -> Footer:
    if task_kind == VERBATIM:
        return Footer(NONE)
    return Footer(task_kind, function_prompt)


@dataclass(frozen=True)
class Message:
    sender: NodeAddress
    recipient: NodeAddress
    text: str

    def to_dict(self) -> dict:
        return {"from": str(self.sender), "to": str(self.recipient), "text": self.text}


@dataclass(frozen=True)
class RenderedContext:
    node: NodeAddress
    text: str
    footer_kind: str = NONE


@lru_cache(maxsize=None)
def _template(name: str) -> str:
    return resources.files("neuromas").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")


def template_text(name: str) -> str:
    """Raw bytes of a shipped template (``hidden``, ``output``, ``summarizer``, ``footer_*``)."""
    return _template(name)


def _previous_block(messages: Sequence[Message]) -> str:
    if not messages:
        return ""
    lines = ["PREVIOUS:"]
    lines += [f"[from {m.sender}]: {m.text}" for m in messages]
    return "\n".join(lines) + "\n\n"


def _check_incoming(expected: list[NodeAddress], recipient: NodeAddress, incoming: Sequence[Message]) -> None:
    if len(incoming) != len(expected):
        raise MessagingError(
            f"{recipient} expects {len(expected)} incoming messages, got {len(incoming)}"
        )
    for msg, sender in zip(incoming, expected):
        if msg.sender != sender or msg.recipient != recipient:
            raise MessagingError(
                f"message {msg.sender}->{msg.recipient} is not the edge {sender}->{recipient}"
            )


def render_hidden_context(
    question: str, topology: Topology, addr: NodeAddress, incoming: Sequence[Message]
) -> RenderedContext:
    topology.check(addr)
    if addr.is_output:
        raise MessagingError("render_hidden_context needs a hidden address")
    _check_incoming(topology.predecessors(addr), addr, incoming)
    n_slots = len(topology.successors(addr))
    to_block = "\n".join(f"TO #{k}: <message for downstream node {k}>" for k in range(1, n_slots + 1))
    text = _template("hidden").format(
        n_layers=topology.depth,
        topology=topology.dashed(),
        total_nodes=topology.hidden_count,
        layer_index=addr.layer,
        position=addr.position,
        layer_size=topology.width(addr.layer),
        question=question,
        previous_block=_previous_block(incoming),
        to_block=to_block,
    )
    return RenderedContext(addr, text, NONE)


def _finish(text: str, footer: Footer) -> str:
    # no footer: the prompt ends with the last content block
    return text.rstrip("\n") if footer.kind == NONE else text


def render_output_context(
    question: str, topology: Topology, finals: Sequence[Message], footer: Footer
) -> RenderedContext:
    out = NodeAddress.output()
    _check_incoming(topology.predecessors(out), out, finals)
    text = _template("output").format(
        n_layers=topology.depth,
        topology=topology.dashed(),
        total_nodes=topology.hidden_count,
        question=question,
        previous_block=_previous_block(finals),
        task_specific_answer_footer=footer.render(),
    )
    return RenderedContext(out, _finish(text, footer), footer.kind)


def render_summarizer_context(
    question: str, topology: Topology, all_node_outputs: Sequence[str], footer: Footer
) -> RenderedContext:
    """Prompt for an optional summarizer that sees every hidden node's raw output."""
    if not all_node_outputs:
        raise MessagingError("summarizer needs at least one node output")
    if len(all_node_outputs) != topology.hidden_count:
        raise MessagingError(
            f"summarizer expects {topology.hidden_count} node outputs for {topology}, "
            f"got {len(all_node_outputs)}"
        )
    outputs_block = "\n".join(f"[N{i}]: {text}" for i, text in enumerate(all_node_outputs, start=1))
    text = _template("summarizer").format(
        n_layers=topology.depth,
        topology=topology.dashed(),
        total_nodes=topology.hidden_count,
        question=question,
        outputs_block=outputs_block,
        task_specific_answer_footer=footer.render(),
    )
    return RenderedContext(NodeAddress.output(), _finish(text, footer), footer.kind)


_MARKER = "TO #"
_SLOT_RE = re.compile(r"TO #(\d+):")


def parse_messages(generated: str, n_recipients: int) -> list[str]:
    """Split a generation into ``n_recipients`` payloads.

    Slot ``k`` gets the text after ``TO #k:`` up to the next ``TO #`` or the end,
    stripped. The first occurrence of a slot wins and unfilled slots are empty.
    Text with no ``TO #`` marker at all goes entirely to recipient 1.
    """
    if n_recipients < 1:
        raise MessagingError(f"n_recipients must be >= 1, got {n_recipients}")
    out = [""] * n_recipients
    starts = [m.start() for m in re.finditer(re.escape(_MARKER), generated)]
    if not starts:
        out[0] = generated.strip()
        return out
    filled = [False] * n_recipients
    for i, pos in enumerate(starts):
        m = _SLOT_RE.match(generated, pos)
        if m is None:
            continue
        k = int(m.group(1))
        if not 1 <= k <= n_recipients or filled[k - 1]:
            continue
        end = starts[i + 1] if i + 1 < len(starts) else len(generated)
        out[k - 1] = generated[m.end():end].strip()
        filled[k - 1] = True
    return out


def parse_final_message(generated: str) -> str:
    return parse_messages(generated, 1)[0]


def format_messages(payloads: Sequence[str]) -> str:
    """Lay out payloads in the ``TO #k:`` format the hidden prompt asks for."""
    return "\n".join(f"TO #{k}: {p}" for k, p in enumerate(payloads, start=1))


_LETTER_RE = re.compile(r"\b([A-Da-d])\b")
_YES_NO_RE = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
_ANSWER_RE = re.compile(r"answer", re.IGNORECASE)


def canonicalize_answer(generated: str, task_kind: str, function_prompt: str = ""):
    """Map a raw output-node generation to the canonical answer form, or NO_ANSWER."""
    if task_kind == MULTIPLE_CHOICE:
        markers = list(_ANSWER_RE.finditer(generated))
        tail = generated[markers[-1].end():] if markers else generated
        m = _LETTER_RE.search(tail)
        return m.group(1).upper() if m else NO_ANSWER
    if task_kind == YES_NO:
        m = _YES_NO_RE.search(generated)
        return m.group(1).capitalize() if m else NO_ANSWER
    if task_kind == CODE:
        body = generated
        for anchor in (Footer(CODE, function_prompt).render(), "Provide the function body:"):
            if anchor and anchor in body:
                body = body.split(anchor)[-1]
                break
        body = textwrap.dedent(body.strip("\n")).rstrip()
        return body if body.strip() else NO_ANSWER
    if task_kind == VERBATIM:
        text = generated.strip()
        return text if text else NO_ANSWER
    raise MessagingError(f"unknown task kind {task_kind!r}; expected one of {TASK_KINDS}")
