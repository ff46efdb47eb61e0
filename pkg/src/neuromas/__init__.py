"""Layered, trainable systems of stochastic text-generating nodes."""

from neuromas.topology import NodeAddress, Topology, call_count, growth_map, parse_topology

__all__ = ["NodeAddress", "Topology", "call_count", "growth_map", "parse_topology"]
__version__ = "0.1.0"
