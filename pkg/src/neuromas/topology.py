"""Layered, fully connected communication graphs and their growth mappings.

A topology is the tuple of hidden-layer widths. Every node of layer ``l`` sends
to every node of layer ``l + 1`` and every node of the final hidden layer sends
to the single output node, which is always present.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator

from neuromas.errors import GrowthError, TopologyError

HIDDEN = "hidden"
OUTPUT = "output"

_ADDRESS_RE = re.compile(r"^L(\d+)P(\d+)$")


@dataclass(frozen=True, order=True)
class NodeAddress:
    """Slot of a node: ``(layer, position)`` for hidden nodes, or the output node.

    Ordering puts hidden nodes first by (layer, position) and the output node last.
    """

    _rank: int = field(init=False, repr=False, compare=True)
    kind: str = field(compare=False)
    layer: int = field(default=0, compare=True)
    position: int = field(default=0, compare=True)

    def __init__(self, kind: str, layer: int = 0, position: int = 0):
        if kind not in (HIDDEN, OUTPUT):
            raise TopologyError(f"unknown node kind {kind!r}")
        if kind == HIDDEN and (layer < 1 or position < 1):
            raise TopologyError(f"hidden address needs layer, position >= 1, got ({layer}, {position})")
        if kind == OUTPUT:
            layer, position = 0, 0
        object.__setattr__(self, "_rank", 1 if kind == OUTPUT else 0)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "layer", layer)
        object.__setattr__(self, "position", position)

    @classmethod
    def hidden(cls, layer: int, position: int) -> "NodeAddress":
        return cls(HIDDEN, layer, position)

    @classmethod
    def output(cls) -> "NodeAddress":
        return cls(OUTPUT)

    @classmethod
    def parse(cls, text: str) -> "NodeAddress":
        """Inverse of ``str()``: ``"L2P1"`` or ``"OUT"``."""
        text = text.strip()
        if text.upper() == "OUT":
            return cls.output()
        m = _ADDRESS_RE.match(text)
        if not m:
            raise TopologyError(f"malformed node address {text!r}")
        return cls.hidden(int(m.group(1)), int(m.group(2)))

    @property
    def is_output(self) -> bool:
        return self.kind == OUTPUT

    def __str__(self) -> str:
        return "OUT" if self.is_output else f"L{self.layer}P{self.position}"

    def __repr__(self) -> str:
        return f"NodeAddress({str(self)})"


OUT = NodeAddress.output()


@dataclass(frozen=True)
class Topology:
    """Hidden-layer widths ``(n_1, ..., n_L)``; the output node is implicit.

    ``Topology(())`` is the degenerate single-policy system that consists of the
    output node alone. It cannot be produced by :func:`parse_topology`.
    """

    layers: tuple[int, ...]

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        for width in layers:
            if isinstance(width, bool) or not isinstance(width, int) or width < 1:
                raise TopologyError(f"layer widths must be positive integers, got {width!r}")
        object.__setattr__(self, "layers", layers)

    @classmethod
    def single(cls) -> "Topology":
        return cls(())

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def hidden_count(self) -> int:
        return sum(self.layers)

    @property
    def is_single(self) -> bool:
        return not self.layers

    @property
    def max_width(self) -> int:
        return max(self.layers, default=0)

    def width(self, layer: int) -> int:
        if not 1 <= layer <= self.depth:
            raise TopologyError(f"layer {layer} out of range for {self}")
        return self.layers[layer - 1]

    def call_count(self) -> int:
        return 1 + self.hidden_count

    def layer_addresses(self, layer: int) -> list[NodeAddress]:
        return [NodeAddress.hidden(layer, j) for j in range(1, self.width(layer) + 1)]

    def hidden_addresses(self) -> list[NodeAddress]:
        return [a for layer in range(1, self.depth + 1) for a in self.layer_addresses(layer)]

    def addresses(self) -> list[NodeAddress]:
        return self.hidden_addresses() + [OUT]

    def __contains__(self, addr: object) -> bool:
        if not isinstance(addr, NodeAddress):
            return False
        if addr.is_output:
            return True
        return 1 <= addr.layer <= self.depth and 1 <= addr.position <= self.layers[addr.layer - 1]

    def check(self, addr: NodeAddress) -> None:
        if addr not in self:
            raise TopologyError(f"{addr} is not a node of {self}")

    def successors(self, addr: NodeAddress) -> list[NodeAddress]:
        self.check(addr)
        if addr.is_output:
            return []
        if addr.layer == self.depth:
            return [OUT]
        return self.layer_addresses(addr.layer + 1)

    def predecessors(self, addr: NodeAddress) -> list[NodeAddress]:
        self.check(addr)
        if addr.is_output:
            return self.layer_addresses(self.depth) if self.depth else []
        if addr.layer == 1:
            return []
        return self.layer_addresses(addr.layer - 1)

    def edges(self) -> Iterator[tuple[NodeAddress, NodeAddress]]:
        for src in self.hidden_addresses():
            for dst in self.successors(src):
                yield src, dst

    def __str__(self) -> str:
        return "[" + ",".join(str(n) for n in self.layers) + "]"

    def dashed(self) -> str:
        """The ``2-2`` notation used inside node prompts."""
        return "-".join(str(n) for n in self.layers)


def parse_topology(spec: str) -> Topology:
    """Parse ``"1-1"``, ``"2,2"`` or ``"[2,2,2]"`` into a :class:`Topology`."""
    if not isinstance(spec, str):
        raise TopologyError(f"topology spec must be text, got {type(spec).__name__}")
    body = spec.strip()
    if body.startswith("[") and body.endswith("]"):
        body = body[1:-1]
    if not body.strip():
        raise TopologyError(f"empty topology spec {spec!r}")
    widths = []
    for token in re.split(r"[-,\s]+", body.strip()):
        if not re.fullmatch(r"\d+", token):
            raise TopologyError(f"bad layer width {token!r} in topology spec {spec!r}")
        width = int(token)
        if width < 1:
            raise TopologyError(f"layer width must be >= 1, got {token!r} in {spec!r}")
        widths.append(width)
    return Topology(tuple(widths))


def call_count(topology: Topology) -> int:
    return topology.call_count()


@dataclass(frozen=True)
class InheritanceMap:
    source: Topology
    target: Topology
    inherited: dict[NodeAddress, NodeAddress]
    fresh: tuple[NodeAddress, ...]

    def to_dict(self) -> dict:
        return {
            "source": str(self.source),
            "target": str(self.target),
            "inherited": {str(k): str(v) for k, v in sorted(self.inherited.items())},
            "fresh": [str(a) for a in self.fresh],
        }


def growth_map(source: Topology, target: Topology) -> InheritanceMap:
    """Positional-prefix inheritance from ``source`` into a wider and/or deeper ``target``.

    Hidden node ``(l, j)`` keeps its coordinates and the output node maps to the
    output node. Under depth expansion an old final-layer node therefore becomes
    an intermediate node.
    """
    if target.depth < source.depth:
        raise GrowthError(f"cannot grow {source} into {target}: fewer layers")
    for layer, (w_src, w_tgt) in enumerate(zip(source.layers, target.layers), start=1):
        if w_tgt < w_src:
            raise GrowthError(f"cannot grow {source} into {target}: layer {layer} narrows {w_src}->{w_tgt}")
    inherited = {a: a for a in source.hidden_addresses()}
    inherited[OUT] = OUT
    fresh = tuple(a for a in target.addresses() if a not in inherited)
    return InheritanceMap(source, target, inherited, fresh)
