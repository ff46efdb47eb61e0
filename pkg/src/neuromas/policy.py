"""Toy stochastic sequence policies: a shared frozen base plus per-node low-rank deltas.

Every node scores the next token with a linear logit map over sparse binary
features of its input stream::

    logits = (W0 + B_v @ A_v) @ phi(window, node tag)

``W0`` is shared and never trained. ``A_v`` (rank x d) and ``B_v`` (m x rank) are
the node's trainable factors; ``B_v = 0`` makes the node behave exactly like the
base. Features are one-hot token identities of the trailing ``window`` stream
positions, one-hot conjunctions of adjacent position pairs, a structural tag for
the node's (layer, position), and a bias.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from neuromas.errors import EnumerationGuardError, PolicyError
from neuromas.topology import NodeAddress, Topology

CHECKPOINT_FORMAT = "neuromas.policyset"
CHECKPOINT_VERSION = 1
ENUMERATION_LIMIT = 100_000

SAMPLE = "sample"
GREEDY = "greedy"


@dataclass(frozen=True)
class Vocabulary:
    """Emittable symbols (single characters) plus a reserved end-of-sequence token.

    Token ids are ``0..len(symbols)-1`` for symbols and ``len(symbols)`` for EOS.
    """

    symbols: tuple[str, ...]
    eos: str = "<eos>"

    def __post_init__(self) -> None:
        symbols = tuple(self.symbols)
        object.__setattr__(self, "symbols", symbols)
        if not symbols:
            raise PolicyError("empty vocabulary: at least one symbol besides EOS is required")
        if len(set(symbols)) != len(symbols):
            raise PolicyError(f"duplicate symbols in vocabulary {symbols}")
        for s in symbols:
            if len(s) != 1 or s.isspace():
                raise PolicyError(f"vocabulary symbols must be single non-space characters, got {s!r}")
        if self.eos in symbols:
            raise PolicyError("EOS must be distinct from every symbol")

    @classmethod
    def digits(cls, base: int = 10) -> "Vocabulary":
        if not 1 <= base <= 10:
            raise PolicyError(f"digit vocabulary supports bases 1..10, got {base}")
        return cls(tuple(str(d) for d in range(base)))

    @property
    def size(self) -> int:
        return len(self.symbols) + 1

    @property
    def eos_id(self) -> int:
        return len(self.symbols)

    def token_id(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise PolicyError(f"symbol {symbol!r} not in vocabulary") from None

    def decode(self, tokens: Sequence[int]) -> str:
        return "".join(self.symbols[t] for t in tokens if t != self.eos_id)

    def to_dict(self) -> dict:
        return {"symbols": list(self.symbols), "eos": self.eos}


@dataclass(frozen=True)
class FeatureConfig:
    """Featurization of a node's input stream.

    The stream alphabet is the vocabulary followed by PAD, SEP and
    ``n_buckets`` hash buckets for characters outside the vocabulary.
    """

    window: int = 4
    pairs: bool = True
    n_buckets: int = 2
    max_depth: int = 4
    max_width: int = 4

    def __post_init__(self) -> None:
        if self.window < 1:
            raise PolicyError(f"window must be >= 1, got {self.window}")
        if self.n_buckets < 1:
            raise PolicyError(f"n_buckets must be >= 1, got {self.n_buckets}")
        if self.max_depth < 1 or self.max_width < 1:
            raise PolicyError("max_depth and max_width must be >= 1")

    def alphabet_size(self, vocab: Vocabulary) -> int:
        return vocab.size + 2 + self.n_buckets

    def pad_id(self, vocab: Vocabulary) -> int:
        return vocab.size

    def sep_id(self, vocab: Vocabulary) -> int:
        return vocab.size + 1

    def bucket_id(self, vocab: Vocabulary, k: int) -> int:
        return vocab.size + 2 + (k % self.n_buckets)

    @property
    def n_tags(self) -> int:
        return 1 + self.max_depth * self.max_width

    def dim(self, vocab: Vocabulary) -> int:
        a = self.alphabet_size(vocab)
        pair_dim = (self.window - 1) * a * a if self.pairs else 0
        return self.window * a + pair_dim + self.n_tags + 1

    def tag_index(self, node: NodeAddress) -> int:
        if node.is_output:
            return 0
        if node.layer > self.max_depth or node.position > self.max_width:
            raise PolicyError(
                f"{node} exceeds the structural tag capacity ({self.max_depth} layers x {self.max_width} positions)"
            )
        return 1 + (node.layer - 1) * self.max_width + (node.position - 1)

    def to_dict(self) -> dict:
        return {
            "window": self.window,
            "pairs": self.pairs,
            "n_buckets": self.n_buckets,
            "max_depth": self.max_depth,
            "max_width": self.max_width,
        }


class Featurizer:
    """Maps (trailing stream window, node) to the active feature indices."""

    def __init__(self, vocab: Vocabulary, config: FeatureConfig):
        self.vocab = vocab
        self.config = config
        self.a = config.alphabet_size(vocab)
        self.pad = config.pad_id(vocab)
        w = config.window
        self.unary_off = np.arange(w) * self.a
        self.pair_base = w * self.a
        self.pair_off = self.pair_base + np.arange(max(w - 1, 0)) * self.a * self.a
        self.tag_base = self.pair_base + (len(self.pair_off) * self.a * self.a if config.pairs else 0)
        self.bias = self.tag_base + config.n_tags
        self.dim = self.bias + 1
        assert self.dim == config.dim(vocab)

    def window(self, stream: Sequence[int]) -> np.ndarray:
        """Tokens at offsets 1..w from the end of ``stream`` (offset 1 is the last token)."""
        w = self.config.window
        tail = list(stream[-w:])[::-1]
        if len(tail) < w:
            tail += [self.pad] * (w - len(tail))
        return np.asarray(tail, dtype=np.int64)

    def indices(self, window: np.ndarray, tag: int) -> np.ndarray:
        parts = [self.unary_off + window]
        if self.config.pairs and len(window) > 1:
            parts.append(self.pair_off + window[:-1] * self.a + window[1:])
        parts.append(np.array([self.tag_base + tag, self.bias], dtype=np.int64))
        return np.concatenate(parts)

    def dense(self, window: np.ndarray, tag: int) -> np.ndarray:
        phi = np.zeros(self.dim)
        np.add.at(phi, self.indices(window, tag), 1.0)
        return phi


@dataclass
class Delta:
    """Node-specific low-rank factors; the logit adjustment is ``B @ A``."""

    A: np.ndarray
    B: np.ndarray

    def copy(self) -> "Delta":
        return Delta(self.A.copy(), self.B.copy())

    @property
    def size(self) -> int:
        return self.A.size + self.B.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.A.ravel(), self.B.ravel()])

    def set_flat(self, vec: np.ndarray) -> None:
        na = self.A.size
        self.A[...] = vec[:na].reshape(self.A.shape)
        self.B[...] = vec[na:].reshape(self.B.shape)


@dataclass
class SampleResult:
    tokens: list[int]
    token_logprobs: list[float]

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def logprob(self) -> float:
        return float(sum(self.token_logprobs))

    @property
    def mean_logprob(self) -> float:
        return self.logprob / self.length if self.tokens else 0.0


@dataclass
class NodeGrad:
    """Gradient of a node's log-probability with respect to its own delta.

    ``base`` is always zero: the shared block is frozen.
    """

    A: np.ndarray
    B: np.ndarray
    base: np.ndarray = field(repr=False)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.A.ravel(), self.B.ravel()])


@dataclass
class PolicySet:
    """Shared frozen base plus one delta per node address of ``topology``."""

    vocab: Vocabulary
    features: FeatureConfig
    rank: int
    base: np.ndarray
    deltas: dict[NodeAddress, Delta]
    topology: Topology
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.featurizer = Featurizer(self.vocab, self.features)
        m, d = self.vocab.size, self.featurizer.dim
        if self.base.shape != (m, d):
            raise PolicyError(f"base must have shape {(m, d)}, got {self.base.shape}")
        if set(self.deltas) != set(self.topology.addresses()):
            raise PolicyError(f"deltas {sorted(self.deltas)} do not cover the nodes of {self.topology}")
        for addr, delta in self.deltas.items():
            if delta.A.shape != (self.rank, d) or delta.B.shape != (m, self.rank):
                raise PolicyError(f"delta for {addr} has shapes {delta.A.shape}, {delta.B.shape}")

    def delta(self, node: NodeAddress) -> Delta:
        try:
            return self.deltas[node]
        except KeyError:
            raise PolicyError(f"no delta for node {node} in {self.topology}") from None

    def copy(self) -> "PolicySet":
        return PolicySet(
            self.vocab,
            self.features,
            self.rank,
            self.base,
            {a: d.copy() for a, d in self.deltas.items()},
            self.topology,
            dict(self.meta),
        )

    # -- scoring ---------------------------------------------------------

    def logits(self, node: NodeAddress, window: np.ndarray) -> np.ndarray:
        delta = self.delta(node)
        idx = self.featurizer.indices(window, self.features.tag_index(node))
        out = self.base[:, idx].sum(axis=1)
        if self.rank:
            out = out + delta.B @ delta.A[:, idx].sum(axis=1)
        return out

    def probs(self, node: NodeAddress, stream: Sequence[int]) -> np.ndarray:
        return _softmax(self.logits(node, self.featurizer.window(stream)))

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "vocabulary": self.vocab.to_dict(),
            "feature_config": self.features.to_dict(),
            "rank": self.rank,
            "topology": str(self.topology),
            "base": self.base.tolist(),
            "deltas": {str(a): {"A": d.A.tolist(), "B": d.B.tolist()} for a, d in sorted(self.deltas.items())},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PolicySet":
        from neuromas.topology import parse_topology

        if data.get("format") != CHECKPOINT_FORMAT:
            raise PolicyError(f"not a policy checkpoint (format={data.get('format')!r})")
        if data.get("version") != CHECKPOINT_VERSION:
            raise PolicyError(f"unsupported checkpoint version {data.get('version')!r}")
        rank = int(data["rank"])
        vocab = Vocabulary(tuple(data["vocabulary"]["symbols"]), data["vocabulary"]["eos"])
        feats = FeatureConfig(**data["feature_config"])
        m, d = vocab.size, feats.dim(vocab)
        topo_text = data["topology"]
        topology = Topology(()) if topo_text == "[]" else parse_topology(topo_text)
        deltas = {
            NodeAddress.parse(k): Delta(
                np.asarray(v["A"], dtype=float).reshape(rank, d),
                np.asarray(v["B"], dtype=float).reshape(m, rank),
            )
            for k, v in data["deltas"].items()
        }
        return cls(vocab, feats, rank, np.asarray(data["base"], dtype=float), deltas, topology, data.get("meta", {}))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "PolicySet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


# -- construction --------------------------------------------------------------


def make_base(
    vocab: Vocabulary,
    features: FeatureConfig,
    *,
    copy_offset: int | None = None,
    copy_strength: float = 0.0,
    eos_bias: float = 0.0,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Build a frozen base block.

    With ``copy_offset`` set, each symbol found at that stream offset gets
    ``copy_strength`` extra logit, and a separator there favours EOS. This is a
    crude stand-in for a pretrained backbone that tends to echo its input.
    ``eos_bias`` shifts the EOS logit everywhere.
    """
    fz = Featurizer(vocab, features)
    base = np.zeros((vocab.size, fz.dim))
    if noise:
        rng = rng if rng is not None else np.random.default_rng(0)
        base += noise * rng.standard_normal(base.shape)
    if copy_offset is not None and copy_strength:
        if not 1 <= copy_offset <= features.window:
            raise PolicyError(f"copy_offset {copy_offset} outside window 1..{features.window}")
        row = fz.unary_off[copy_offset - 1]
        for tok in range(len(vocab.symbols)):
            base[tok, row + tok] += copy_strength
        base[vocab.eos_id, row + features.sep_id(vocab)] += copy_strength
    base[vocab.eos_id, fz.bias] += eos_bias
    return base


def zero_delta(rank: int, dim: int, m: int, rng: np.random.Generator, init_scale: float) -> Delta:
    """Inactive delta: random first factor, zero second factor."""
    return Delta(init_scale * rng.standard_normal((rank, dim)), np.zeros((m, rank)))


def delta_rng(seed: int, node: NodeAddress) -> np.random.Generator:
    return np.random.default_rng([seed, 7919, node.layer, node.position, int(node.is_output)])


def init_policies(
    topology: Topology,
    vocab: Vocabulary,
    features: FeatureConfig,
    rank: int,
    base: np.ndarray,
    *,
    seed: int = 0,
    init_scale: float = 0.1,
) -> PolicySet:
    if rank < 0:
        raise PolicyError(f"rank must be >= 0, got {rank}")
    dim = features.dim(vocab)
    deltas = {a: zero_delta(rank, dim, vocab.size, delta_rng(seed, a), init_scale) for a in topology.addresses()}
    return PolicySet(vocab, features, rank, base, deltas, topology, {"init_seed": seed, "init_scale": init_scale})


# -- operations ----------------------------------------------------------------


def sample(
    params: PolicySet,
    node: NodeAddress,
    context: Sequence[int],
    rng: np.random.Generator | None,
    max_tokens: int,
    mode: str = SAMPLE,
) -> SampleResult:
    """Generate autoregressively from one node.

    Sampling draws one uniform per step and walks the inverse CDF of the step
    distribution; greedy takes the first argmax.
    """
    if max_tokens < 1:
        raise PolicyError(f"max_tokens must be >= 1, got {max_tokens}")
    if mode not in (SAMPLE, GREEDY):
        raise PolicyError(f"unknown decoding mode {mode!r}")
    if mode == SAMPLE and rng is None:
        raise PolicyError("sample mode needs an rng")
    params.delta(node)
    fz = params.featurizer
    eos = params.vocab.eos_id
    stream = list(context)
    tokens: list[int] = []
    logps: list[float] = []
    for _ in range(max_tokens):
        logp = _log_softmax(params.logits(node, fz.window(stream)))
        if mode == GREEDY:
            tok = int(np.argmax(logp))
        else:
            cdf = np.cumsum(np.exp(logp))
            u = rng.random() * cdf[-1]
            tok = int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))
        tokens.append(tok)
        logps.append(float(logp[tok]))
        if tok == eos:
            break
        stream.append(tok)
    return SampleResult(tokens, logps)


def _check_tokens(params: PolicySet, tokens: Sequence[int]) -> None:
    if len(tokens) == 0:
        raise PolicyError("token sequence must be non-empty")
    m = params.vocab.size
    for i, t in enumerate(tokens):
        if not isinstance(t, (int, np.integer)) or not 0 <= t < m:
            raise PolicyError(f"token {t!r} at position {i} is outside the vocabulary")
        if t == params.vocab.eos_id and i != len(tokens) - 1:
            raise PolicyError(f"EOS at position {i} is not the final token")


def _score(params: PolicySet, node: NodeAddress, context: Sequence[int], tokens: Sequence[int], grad: bool):
    """Teacher-forced per-token log-probs, plus d(sum log p)/d(A, B) when ``grad``."""
    _check_tokens(params, tokens)
    delta = params.delta(node)
    fz = params.featurizer
    tag = params.features.tag_index(node)
    stream = list(context)
    logps = []
    dA = np.zeros_like(delta.A) if grad else None
    dB = np.zeros_like(delta.B) if grad else None
    for tok in tokens:
        idx = fz.indices(fz.window(stream), tag)
        h = delta.A[:, idx].sum(axis=1)
        z = params.base[:, idx].sum(axis=1) + delta.B @ h
        logp = _log_softmax(z)
        logps.append(float(logp[tok]))
        if grad:
            g = -np.exp(logp)
            g[tok] += 1.0
            dB += np.outer(g, h)
            if params.rank:
                np.add.at(dA, (slice(None), idx), (delta.B.T @ g)[:, None])
        stream.append(int(tok))
    return logps, dA, dB


def sequence_logprob(params: PolicySet, node: NodeAddress, context: Sequence[int], tokens: Sequence[int]) -> float:
    return float(sum(_score(params, node, context, tokens, grad=False)[0]))


def mean_logprob(params: PolicySet, node: NodeAddress, context: Sequence[int], tokens: Sequence[int]) -> float:
    logps = _score(params, node, context, tokens, grad=False)[0]
    return float(sum(logps) / len(logps))


def grad_sequence_logprob(params: PolicySet, node: NodeAddress, context: Sequence[int], tokens: Sequence[int]) -> NodeGrad:
    _, dA, dB = _score(params, node, context, tokens, grad=True)
    return NodeGrad(dA, dB, np.zeros_like(params.base))


def grad_mean_logprob(params: PolicySet, node: NodeAddress, context: Sequence[int], tokens: Sequence[int]) -> NodeGrad:
    """Exact gradient of the mean token log-prob with respect to the node's own delta."""
    _, dA, dB = _score(params, node, context, tokens, grad=True)
    n = len(tokens)
    return NodeGrad(dA / n, dB / n, np.zeros_like(params.base))


def param_count(params: PolicySet, scope: str = "per-node") -> int:
    d, m = params.featurizer.dim, params.vocab.size
    per_node = params.rank * (d + m)
    if scope == "per-node":
        return per_node
    if scope == "total-trainable":
        return per_node * params.topology.call_count()
    raise PolicyError(f"unknown scope {scope!r}; expected 'per-node' or 'total-trainable'")


def enumerate_outcomes(
    params: PolicySet, node: NodeAddress, context: Sequence[int], max_tokens: int
) -> list[tuple[tuple[int, ...], float]]:
    """Every reachable complete generation (EOS-terminated or capped) with its exact probability."""
    if max_tokens < 1:
        raise PolicyError(f"max_tokens must be >= 1, got {max_tokens}")
    m = params.vocab.size
    if m**max_tokens > ENUMERATION_LIMIT:
        raise EnumerationGuardError(f"|V|^max_tokens = {m}^{max_tokens} exceeds {ENUMERATION_LIMIT}")
    params.delta(node)
    eos = params.vocab.eos_id
    out: list[tuple[tuple[int, ...], float]] = []

    def walk(prefix: list[int], logp: float) -> None:
        probs = params.probs(node, list(context) + prefix)
        for tok in range(m):
            if probs[tok] == 0.0:
                continue  # unreachable branch
            lp = logp + float(np.log(probs[tok]))
            seq = prefix + [tok]
            if tok == eos or len(seq) == max_tokens:
                out.append((tuple(seq), float(np.exp(lp))))
            else:
                walk(seq, lp)

    walk([], 0.0)
    return out


def outcome_distribution(
    params: PolicySet, node: NodeAddress, context: Sequence[int], max_tokens: int
) -> dict[tuple[int, ...], float]:
    return dict(enumerate_outcomes(params, node, context, max_tokens))


def iter_param_blocks(params: PolicySet) -> Iterable[tuple[NodeAddress, Delta]]:
    return sorted(params.deltas.items())
