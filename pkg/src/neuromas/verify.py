"""Brute-force oracle suite over tiny instances.

Every check enumerates the full outcome space (or perturbs parameters for
finite differences) instead of trusting the sampled code paths, and reports a
named pass/fail line.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from neuromas.growth import grow
from neuromas.policy import (
    FeatureConfig,
    PolicySet,
    Vocabulary,
    enumerate_outcomes,
    grad_sequence_logprob,
    init_policies,
    make_base,
    sample,
    sequence_logprob,
)
from neuromas.runtime import enumerate_traces, expected_reward_exact, forward, trace_logprob
from neuromas.topology import OUT, NodeAddress, Topology, parse_topology
from neuromas.trainer import BaselineState, estimate_gradient_bruteforce, update_baseline


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


# -- fixtures ---------------------------------------------------------------------


def random_policies(
    topology: Topology,
    symbols: str = "ab",
    *,
    window: int = 2,
    pairs: bool = False,
    rank: int = 2,
    seed: int = 0,
    scale: float = 0.7,
) -> PolicySet:
    """Small policy set with a random base and random, active deltas."""
    rng = np.random.default_rng(seed)
    vocab = Vocabulary(tuple(symbols))
    feats = FeatureConfig(window=window, pairs=pairs, n_buckets=1, max_depth=3, max_width=2)
    base = make_base(vocab, feats, noise=scale, rng=rng)
    pol = init_policies(topology, vocab, feats, rank, base, seed=seed, init_scale=scale)
    for d in pol.deltas.values():
        d.B[...] = scale * rng.standard_normal(d.B.shape)
    return pol


def expected_reward_flat(pol: PolicySet, topology: Topology, question: str, gold: str, max_tokens: int):
    """J as a function of the concatenated flat parameter vector of every node."""
    order = topology.addresses()
    sizes = [pol.delta(a).size for a in order]

    def J(vec: np.ndarray) -> float:
        p = pol.copy()
        start = 0
        for a, n in zip(order, sizes):
            p.delta(a).set_flat(vec[start : start + n])
            start += n
        return expected_reward_exact(p, topology, question, gold, max_tokens)

    x0 = np.concatenate([pol.delta(a).flat() for a in order])
    return J, x0


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def _flat_exact(pol, topology, question, gold, max_tokens, baselines=None) -> np.ndarray:
    g = estimate_gradient_bruteforce(pol, topology, question, gold, baselines, max_tokens)
    return np.concatenate([g[a] for a in topology.addresses()])


# -- policy -----------------------------------------------------------------------------


def check_normalization(seed: int = 0) -> Check:
    pol = random_policies(Topology(()), "abc", window=3, pairs=True, seed=seed)
    worst = 0.0
    for ctx in ([], [0, 1], [4, 2, 0]):
        total = sum(p for _, p in enumerate_outcomes(pol, OUT, ctx, 4))
        worst = max(worst, abs(total - 1.0))
    return Check("policy.enumeration_normalizes", worst < 1e-12, f"max |sum p - 1| = {worst:.2e}")


def check_sampler_matches_inverse_cdf(seed: int = 0) -> Check:
    pol = random_policies(Topology(()), "abc", seed=seed)
    ok = True
    for trial in range(20):
        res = sample(pol, OUT, [0], np.random.default_rng(trial), 5)
        rng = np.random.default_rng(trial)
        stream, toks = [0], []
        for _ in range(5):
            p = pol.probs(OUT, stream)
            u = rng.random()
            cdf = np.cumsum(p)
            tok = next((i for i, c in enumerate(cdf) if u * cdf[-1] < c), len(p) - 1)
            toks.append(tok)
            if tok == pol.vocab.eos_id:
                break
            stream.append(tok)
        ok &= toks == res.tokens
    return Check("policy.sampler_inverse_cdf", ok, "20 seeded draws replayed by hand")


def check_logprob_gradient(seed: int = 0) -> Check:
    pol = random_policies(Topology(()), "ab", seed=seed)
    ctx, toks = [1, 0], [0, 1, 2]
    g = grad_sequence_logprob(pol, OUT, ctx, toks).flat()
    x0 = pol.delta(OUT).flat()

    def f(x):
        p = pol.copy()
        p.delta(OUT).set_flat(x)
        return sequence_logprob(p, OUT, ctx, toks)

    err = relative_error(g, central_difference(f, x0))
    return Check("policy.logprob_gradient_fd", err < 1e-6, f"relative error {err:.2e}")


def check_inactive_delta_is_base(seed: int = 0) -> Check:
    pol = random_policies(Topology(()), "ab", seed=seed)
    bare = pol.copy()
    bare.delta(OUT).B[...] = 0.0
    z = bare.logits(OUT, bare.featurizer.window([0, 1]))
    idx = bare.featurizer.indices(bare.featurizer.window([0, 1]), 0)
    same = np.array_equal(z, bare.base[:, idx].sum(axis=1))
    return Check("policy.zero_second_factor_is_base", bool(same), "logits equal the base block's")


# -- runtime -------------------------------------------------------------------------------


def check_trace_enumeration(seed: int = 0) -> Check:
    topo = parse_topology("1-1")
    pol = random_policies(topo, "a", seed=seed)
    total = sum(p for _, p in enumerate_traces(pol, topo, "q", 2))
    return Check("runtime.joint_traces_normalize", abs(total - 1) < 1e-12, f"sum = {total!r}")


def check_call_counts(seed: int = 0) -> Check:
    got = []
    for text in ("1-1", "2-2", "2-2-2"):
        topo = parse_topology(text)
        pol = random_policies(topo, "ab", seed=seed)
        tr = forward(pol, topo, "q", seed=seed, max_tokens=3)
        got.append(tr.meta["calls"])
    return Check("runtime.call_count", got == [3, 5, 7], f"calls {got} for [1,1], [2,2], [2,2,2]")


def check_trace_logprob(seed: int = 0) -> Check:
    topo = parse_topology("2-2")
    pol = random_policies(topo, "ab", seed=seed)
    worst = 0.0
    for ep in range(5):
        tr = forward(pol, topo, "q", seed=seed, episode=ep, max_tokens=3)
        worst = max(worst, abs(tr.logprob - trace_logprob(tr, pol)))
    return Check("runtime.trace_logprob_replay", worst < 1e-12, f"max gap {worst:.2e}")


def check_seed_determinism(seed: int = 0) -> Check:
    topo = parse_topology("2-2")
    pol = random_policies(topo, "ab", seed=seed)
    a = forward(pol, topo, "q", seed=seed, episode=3, max_tokens=4).to_dict()
    b = forward(pol, topo, "q", seed=seed, episode=3, max_tokens=4).to_dict()
    return Check("runtime.seeded_replay", a == b, "two runs with the same seed give identical traces")


# -- trainer ---------------------------------------------------------------------------------


def check_single_node_gradient(seed: int = 0, n_params: int = 5) -> Check:
    worst = 0.0
    for k in range(n_params):
        pol = random_policies(Topology(()), "ab", seed=seed + k)
        exact = _flat_exact(pol, Topology(()), "q", "ab", 2)
        J, x0 = expected_reward_flat(pol, Topology(()), "q", "ab", 2)
        worst = max(worst, relative_error(exact, central_difference(J, x0)))
    return Check("trainer.exact_gradient_fd_single", worst <= 1e-4, f"max relative error {worst:.2e}")


def check_baseline_invariance(seed: int = 0) -> Check:
    topo = parse_topology("1-1")
    pol = random_policies(topo, "a", seed=seed)
    rng = np.random.default_rng(seed)
    zero = _flat_exact(pol, topo, "q", "a", 2)
    worst = 0.0
    for _ in range(5):
        b = BaselineState({a: float(rng.uniform()) for a in topo.addresses()})
        worst = max(worst, float(np.abs(_flat_exact(pol, topo, "q", "a", 2, b) - zero).max()))
    return Check("trainer.baseline_unbiased", worst <= 1e-10, f"max deviation {worst:.2e}")


def check_multi_node_gradient(seed: int = 0) -> Check:
    topo = parse_topology("1-1")
    pol = random_policies(topo, "a", seed=seed)
    exact = _flat_exact(pol, topo, "q", "a", 1)
    J, x0 = expected_reward_flat(pol, topo, "q", "a", 1)
    err = relative_error(exact, central_difference(J, x0))
    return Check("trainer.exact_gradient_fd_multi", err <= 1e-4, f"relative error {err:.2e}")


def check_baseline_bounds(seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    b, ok = 0.0, True
    for _ in range(1000):
        b = update_baseline(b, float(rng.integers(0, 2)), 0.9)
        ok &= 0.0 <= b <= 1.0
    return Check("trainer.baseline_in_unit_interval", ok, "1000 binary-reward updates")


# -- growth ------------------------------------------------------------------------------------


def check_growth_preservation(seed: int = 0) -> Check:
    src_topo, dst_topo = parse_topology("1-1"), parse_topology("2-2")
    pol = random_policies(src_topo, "ab", seed=seed)
    grown = grow(pol, dst_topo)
    worst = 0.0
    contexts = ([], [0], [1, 2, 0])
    for node in dst_topo.addresses():
        for ctx in contexts:
            after = dict(enumerate_outcomes(grown, node, ctx, 3))
            if node in src_topo.addresses():
                before = dict(enumerate_outcomes(pol, node, ctx, 3))
            else:
                # fresh slot: the bare base scored with this slot's structural tag
                before = {seq: float(np.prod(_base_probs(pol, node, ctx, seq))) for seq in after}
            worst = max(worst, max(abs(after[s] - before[s]) for s in after))
    base_same = grown.base is pol.base and np.array_equal(grown.base, pol.base)
    deeper = grow(grown, parse_topology("2-2-2"))
    moved = all(np.array_equal(deeper.delta(NodeAddress.hidden(2, j)).flat(), grown.delta(NodeAddress.hidden(2, j)).flat())
                for j in (1, 2))
    ok = worst <= 1e-12 and base_same and moved
    return Check("growth.behaviour_preserved", ok,
                 f"max prob gap {worst:.2e}; base shared={base_same}; layer-2 deltas kept under deepening={moved}")


def _base_probs(pol: PolicySet, node: NodeAddress, ctx, seq) -> list[float]:
    fz = pol.featurizer
    stream, out = list(ctx), []
    tag = pol.features.tag_index(node)
    for tok in seq:
        z = pol.base[:, fz.indices(fz.window(stream), tag)].sum(axis=1)
        p = np.exp(z - z.max())
        p /= p.sum()
        out.append(p[tok])
        stream.append(tok)
    return out


def check_fresh_gradient_alive(seed: int = 0) -> Check:
    # deepening puts the fresh node right in front of the output node, so it matters for the reward
    pol = random_policies(parse_topology("1"), "a", seed=seed)
    grown = grow(pol, parse_topology("1-1"))
    fresh = NodeAddress.hidden(2, 1)
    g = estimate_gradient_bruteforce(grown, parse_topology("1-1"), "q", "a", None, 2)[fresh]
    norm = float(np.linalg.norm(g))
    return Check("growth.fresh_delta_gets_gradient", norm > 1e-8, f"|grad| = {norm:.2e}")


ALL_CHECKS: tuple[Callable[..., Check], ...] = (
    check_normalization,
    check_sampler_matches_inverse_cdf,
    check_logprob_gradient,
    check_inactive_delta_is_base,
    check_trace_enumeration,
    check_call_counts,
    check_trace_logprob,
    check_seed_determinism,
    check_single_node_gradient,
    check_baseline_invariance,
    check_multi_node_gradient,
    check_baseline_bounds,
    check_growth_preservation,
    check_fresh_gradient_alive,
)


def run_all(seed: int = 0) -> list[Check]:
    results = []
    for fn in ALL_CHECKS:
        t0 = time.perf_counter()
        try:
            c = fn(seed)
        except Exception as exc:  # a crashing oracle is a failed property, not a crashed suite
            c = Check(fn.__name__.removeprefix("check_"), False, f"raised {type(exc).__name__}: {exc}")
        c.seconds = time.perf_counter() - t0
        results.append(c)
    return results
