"""Layer-by-layer forward pass producing a full computation trace.

One orchestration routine, :func:`run_forward`, drives every backend. A backend
only has to turn a rendered prompt into text (and, for local policies, tokens
with log-probabilities).
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Protocol, Sequence

import numpy as np

from neuromas.codec import ToyCodec
from neuromas.errors import EnumerationGuardError, TraceError
from neuromas.messaging import (
    NO_ANSWER,
    NONE,
    VERBATIM,
    Footer,
    Message,
    RenderedContext,
    canonicalize_answer,
    format_messages,
    parse_messages,
    render_hidden_context,
    render_output_context,
)
from neuromas.policy import (
    ENUMERATION_LIMIT,
    SAMPLE,
    PolicySet,
    SampleResult,
    _score,
    enumerate_outcomes,
    sample,
    sequence_logprob,
)
from neuromas.topology import NodeAddress, Topology, parse_topology


@dataclass
class Generation:
    text: str
    context_tokens: list[int] | None = None
    sample: SampleResult | None = None


@dataclass
class NodeRecord:
    node: NodeAddress
    context: RenderedContext
    text: str
    outgoing: list[Message]
    context_tokens: list[int] | None = None
    sample: SampleResult | None = None

    @property
    def has_logprobs(self) -> bool:
        return self.sample is not None

    def to_dict(self) -> dict:
        return {
            "node": str(self.node),
            "context": self.context.text,
            "footer_kind": self.context.footer_kind,
            "generation": self.text,
            "context_tokens": self.context_tokens,
            "tokens": self.sample.tokens if self.sample else None,
            "token_logprobs": self.sample.token_logprobs if self.sample else None,
            "messages": [m.to_dict() for m in self.outgoing],
        }


@dataclass
class Trace:
    question: str
    topology: Topology
    records: list[NodeRecord]
    answer_raw: str | None
    answer: object
    task_kind: str = VERBATIM
    reward: float | None = None
    seed: int | None = None
    episode: int = 0
    mode: str = SAMPLE
    error: str | None = None
    meta: dict = field(default_factory=dict)

    def record(self, node: NodeAddress) -> NodeRecord:
        for r in self.records:
            if r.node == node:
                return r
        raise TraceError(f"trace has no record for {node}")

    @property
    def logprob(self) -> float:
        """Sum of the log-probs recorded at sampling time."""
        if any(r.sample is None for r in self.records):
            raise TraceError("trace carries no token log-probabilities")
        return float(sum(r.sample.logprob for r in self.records))

    def to_dict(self) -> dict:
        return {
            "episode": self.episode,
            "seed": self.seed,
            "mode": self.mode,
            "topology": str(self.topology),
            "input": self.question,
            "task_kind": self.task_kind,
            "records": [r.to_dict() for r in self.records],
            "answer_raw": self.answer_raw,
            "answer": None if self.answer is NO_ANSWER else self.answer,
            "reward": self.reward,
            "error": self.error,
            **({"meta": self.meta} if self.meta else {}),
        }


class NodeGenerator(Protocol):
    def generate(
        self, node: NodeAddress, context: RenderedContext, n_recipients: int, rng: np.random.Generator
    ) -> Generation: ...


def node_rng(seed: int, episode: int, node: NodeAddress) -> np.random.Generator:
    """Independent stream per (seed, episode, node); evaluation order does not matter."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(episode, node.layer, node.position, int(node.is_output)))
    return np.random.default_rng(ss)


class ToyGenerator:
    """Local toy policies as a node backend.

    A hidden node emits one symbol string which is addressed to every downstream
    recipient in the ``TO #k:`` layout, so its text goes through the regular parser.
    """

    def __init__(self, policies: PolicySet, max_tokens: int, mode: str = SAMPLE):
        self.policies = policies
        self.max_tokens = max_tokens
        self.mode = mode
        self.codec = ToyCodec(policies.vocab, policies.features)
        self.calls = 0

    def render(self, node: NodeAddress, tokens: Sequence[int], n_recipients: int) -> str:
        payload = self.codec.decode(tokens)
        if node.is_output:
            return payload
        return format_messages([payload] * n_recipients)

    def generate(self, node, context, n_recipients, rng) -> Generation:
        self.calls += 1
        stream = self.codec.encode_context(context.text)
        res = sample(self.policies, node, stream, rng, self.max_tokens, self.mode)
        return Generation(self.render(node, res.tokens, n_recipients), stream, res)


def _node_step(generator, topology, question, node, incoming, seed, episode, mode):
    ctx = render_hidden_context(question, topology, node, incoming)
    rng = node_rng(seed, episode, node) if mode == SAMPLE else None
    succ = topology.successors(node)
    gen = generator.generate(node, ctx, len(succ), rng)
    payloads = parse_messages(gen.text, len(succ))
    out = [Message(node, dst, text) for dst, text in zip(succ, payloads)]
    return NodeRecord(node, ctx, gen.text, out, gen.context_tokens, gen.sample)


def run_forward(
    generator: NodeGenerator,
    topology: Topology,
    question: str,
    *,
    footer: Footer = Footer(NONE),
    task_kind: str = VERBATIM,
    seed: int = 0,
    episode: int = 0,
    mode: str = SAMPLE,
    max_workers: int = 1,
    catch: tuple[type[BaseException], ...] = (),
) -> Trace:
    """Render, generate and route layer by layer, then query the output node.

    Exceptions listed in ``catch`` abort the episode and return the partial
    trace with ``error`` set instead of raising.
    """
    records: list[NodeRecord] = []
    inbox: dict[NodeAddress, list[Message]] = {}
    trace = Trace(question, topology, records, None, NO_ANSWER, task_kind, None, seed, episode, mode)
    pool = ThreadPoolExecutor(max_workers) if max_workers > 1 else None
    try:
        for layer in range(1, topology.depth + 1):
            nodes = topology.layer_addresses(layer)
            args = [(generator, topology, question, n, inbox.pop(n, []), seed, episode, mode) for n in nodes]
            if pool is not None:
                layer_records = list(pool.map(lambda a: _node_step(*a), args))
            else:
                layer_records = [_node_step(*a) for a in args]
            for rec in layer_records:
                records.append(rec)
                for msg in rec.outgoing:
                    inbox.setdefault(msg.recipient, []).append(msg)
        out = NodeAddress.output()
        finals = sorted(inbox.pop(out, []), key=lambda m: m.sender)
        ctx = render_output_context(question, topology, finals, footer)
        rng = node_rng(seed, episode, out) if mode == SAMPLE else None
        gen = generator.generate(out, ctx, 0, rng)
        records.append(NodeRecord(out, ctx, gen.text, [], gen.context_tokens, gen.sample))
        trace.answer_raw = gen.text
        trace.answer = canonicalize_answer(gen.text, task_kind, footer.function_prompt)
    except catch as exc:
        trace.error = f"{type(exc).__name__}: {exc}"
    finally:
        if pool is not None:
            pool.shutdown()
    return trace


def forward(
    policies: PolicySet,
    topology: Topology,
    question: str,
    *,
    seed: int = 0,
    episode: int = 0,
    mode: str = SAMPLE,
    footer: Footer = Footer(NONE),
    task_kind: str = VERBATIM,
    max_tokens: int = 8,
) -> Trace:
    for addr in topology.addresses():
        policies.delta(addr)
    gen = ToyGenerator(policies, max_tokens, mode)
    trace = run_forward(
        gen, topology, question, footer=footer, task_kind=task_kind, seed=seed, episode=episode, mode=mode
    )
    trace.meta["calls"] = gen.calls
    return trace


def trace_logprob(trace: Trace, policies: PolicySet) -> float:
    """log p(trace | input): teacher-forced sum over every node's full generation."""
    codec = ToyCodec(policies.vocab, policies.features)
    total = 0.0
    for rec in trace.records:
        if rec.sample is None or rec.context_tokens is None:
            raise TraceError(f"record {rec.node} has no tokens to score")
        if codec.encode_context(rec.context.text) != list(rec.context_tokens):
            raise TraceError(f"record {rec.node}: recorded context tokens do not match its context text")
        total += sequence_logprob(policies, rec.node, rec.context_tokens, rec.sample.tokens)
    return total


def enumerate_traces(
    policies: PolicySet,
    topology: Topology,
    question: str,
    max_tokens: int,
    *,
    footer: Footer = Footer(NONE),
    task_kind: str = VERBATIM,
    limit: int = ENUMERATION_LIMIT,
) -> list[tuple[Trace, float]]:
    """Every joint trace with its exact probability (tiny instances only)."""
    gen = ToyGenerator(policies, max_tokens, SAMPLE)
    order = topology.addresses()
    results: list[tuple[Trace, float]] = []
    count = [0]

    def walk(i: int, records: list[NodeRecord], inbox: dict, prob: float) -> None:
        node = order[i]
        if node.is_output:
            finals = sorted(inbox.get(node, []), key=lambda m: m.sender)
            ctx = render_output_context(question, topology, finals, footer)
        else:
            ctx = render_hidden_context(question, topology, node, inbox.get(node, []))
        stream = gen.codec.encode_context(ctx.text)
        succ = topology.successors(node)
        for tokens, p in enumerate_outcomes(policies, node, stream, max_tokens):
            res = SampleResult(list(tokens), _token_logprobs(policies, node, stream, tokens))
            text = gen.render(node, tokens, len(succ))
            payloads = parse_messages(text, len(succ)) if succ else []
            out = [Message(node, dst, t) for dst, t in zip(succ, payloads)]
            rec = NodeRecord(node, ctx, text, out, stream, res)
            if node.is_output:
                count[0] += 1
                if count[0] > limit:
                    raise EnumerationGuardError(f"more than {limit} joint traces")
                answer = canonicalize_answer(text, task_kind, footer.function_prompt)
                tr = Trace(question, topology, records + [rec], text, answer, task_kind, mode=SAMPLE)
                results.append((tr, prob * p))
            else:
                nxt = {k: list(v) for k, v in inbox.items()}
                for msg in out:
                    nxt.setdefault(msg.recipient, []).append(msg)
                walk(i + 1, records + [rec], nxt, prob * p)

    walk(0, [], {}, 1.0)
    return results


def _token_logprobs(policies, node, stream, tokens) -> list[float]:
    return _score(policies, node, stream, tokens, grad=False)[0]


def expected_reward_exact(
    policies: PolicySet,
    topology: Topology,
    question: str,
    gold: str,
    max_tokens: int,
    **kwargs,
) -> float:
    from neuromas.tasks import exact_match_reward

    return float(
        sum(p * exact_match_reward(gold, tr.answer) for tr, p in enumerate_traces(policies, topology, question, max_tokens, **kwargs))
    )


# -- trace log -------------------------------------------------------------------


def write_trace(trace: Trace, fh: IO[str]) -> None:
    fh.write(json.dumps(trace.to_dict(), sort_keys=True) + "\n")


def write_traces(traces: Iterable[Trace], path: str | Path, append: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a" if append else "w", encoding="utf-8") as fh:
        for tr in traces:
            write_trace(tr, fh)
    return path


def read_traces(path: str | Path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def trace_from_dict(data: dict) -> Trace:
    """Rebuild a trace from its log line (enough to rescore and recompute log-probs)."""
    topo_text = data["topology"]
    topology = Topology(()) if topo_text == "[]" else parse_topology(topo_text)
    records = []
    for r in data["records"]:
        node = NodeAddress.parse(r["node"])
        sample_res = None
        if r.get("tokens") is not None:
            sample_res = SampleResult(list(r["tokens"]), list(r["token_logprobs"]))
        msgs = [Message(NodeAddress.parse(m["from"]), NodeAddress.parse(m["to"]), m["text"]) for m in r["messages"]]
        records.append(
            NodeRecord(node, RenderedContext(node, r["context"], r["footer_kind"]), r["generation"], msgs, r.get("context_tokens"), sample_res)
        )
    answer = NO_ANSWER if data["answer"] is None else data["answer"]
    return Trace(
        data["input"], topology, records, data["answer_raw"], answer, data["task_kind"],
        data["reward"], data["seed"], data["episode"], data["mode"], data.get("error"), dict(data.get("meta", {})),
    )
