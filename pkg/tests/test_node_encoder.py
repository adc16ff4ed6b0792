import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import random_sequence, tiny_params
from edgeformers import numerics as nx
from edgeformers.config import VirtualTokens
from edgeformers.edge_encoder import plain_encoder
from edgeformers.graph import Edge, Node, TextualEdgeNetwork, TokenCache, build_vocab
from edgeformers.node_encoder import (
    EgoBatch,
    EmptyNeighborhoodError,
    aggregate,
    cross_edge_mha,
    encode_node,
    encode_nodes,
    fallback_embedding,
    make_ego,
    permute_ego,
)
from edgeformers.numerics import Tensor


def node_params(seed=0, **kw):
    kw.setdefault("node_level", True)
    return tiny_params(seed, **kw)


def random_ego(rng, m, center=0, P=6, vocab=12, nodes=6, lengths=None):
    lengths = lengths or [int(rng.integers(2, P + 1)) for _ in range(m)]
    seqs = [random_sequence(rng, n, P, vocab) for n in lengths]
    nbrs = rng.integers(0, nodes, size=m)
    return EgoBatch(center, tuple(range(m)), nbrs, np.stack([s.ids for s in seqs]), np.stack([s.mask for s in seqs]))


def oracle_node(p, ego, **kw):
    return oracles.node_forward(p, ego.center, ego.neighbors, ego.ids, ego.mask, **kw)


# ---------------------------------------------------------------- cross-edge attention


def test_cross_edge_singleton(rng):
    p = node_params()
    x = rng.normal(size=(1, 8))
    out = cross_edge_mha(p, 1, Tensor(x)).data
    pre = "L1.ctx"
    want = (x @ p[f"{pre}.wv"].data + p[f"{pre}.bv"].data) @ p[f"{pre}.wo"].data + p[f"{pre}.bo"].data
    assert np.max(np.abs(out - want)) < 1e-12


def test_cross_edge_equivariant(rng):
    p = node_params()
    x = rng.normal(size=(4, 8))
    perm = np.array([2, 0, 3, 1])
    a = cross_edge_mha(p, 1, Tensor(x)).data
    b = cross_edge_mha(p, 1, Tensor(x[perm])).data
    assert np.max(np.abs(a[perm] - b)) < 1e-12


def test_cross_edge_matches_dense_oracle(rng):
    p = node_params()
    x = rng.normal(size=(3, 8))
    assert np.max(np.abs(cross_edge_mha(p, 1, Tensor(x)).data - oracles.mha(p, "L1.ctx", x, x, 2))) < 1e-10


# ---------------------------------------------------------------- aggregation


def test_aggregate_zero_scorer_is_mean(rng):
    p = node_params()
    p["agg.ws"].data[:] = 0.0
    h = rng.normal(size=(5, 8))
    alpha, hv = aggregate(p, Tensor(h), Tensor(rng.normal(size=4)))
    assert np.allclose(alpha.data, 0.2, atol=1e-15) and np.allclose(hv.data, h.mean(0), atol=1e-14)


def test_aggregate_saturates(rng):
    p = node_params()
    p["agg.ws"].data = np.eye(8, 4)
    h = np.zeros((3, 8))
    h[0, 0] = 50.0
    h[:, 1:] = rng.normal(size=(3, 7))
    alpha, hv = aggregate(p, Tensor(h), Tensor(np.array([1.0, 0.0, 0.0, 0.0])))
    assert alpha.data[0] >= 1 - 1e-15
    assert np.max(np.abs(hv.data - h[0])) < 1e-10


def test_aggregate_matches_direct(rng):
    p = node_params()
    h, z = rng.normal(size=(4, 8)), rng.normal(size=4)
    s = h @ p["agg.ws"].data @ z
    a = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
    alpha, hv = aggregate(p, Tensor(h), Tensor(z))
    assert np.max(np.abs(alpha.data - a)) < 1e-12 and np.max(np.abs(hv.data - a @ h)) < 1e-12
    assert abs(alpha.data.sum() - 1.0) < 1e-12


def test_aggregate_empty():
    with pytest.raises(EmptyNeighborhoodError):
        aggregate(node_params(), Tensor(np.zeros((0, 8))), Tensor(np.zeros(4)))


# ---------------------------------------------------------------- encode_node


def test_single_edge_ego(rng):
    p = node_params()
    ego = random_ego(rng, 1)
    hv, he = encode_node(p, ego)
    out = encode_nodes(p, [ego])
    assert out.alphas[0].tolist() == [1.0]
    assert np.array_equal(hv.data, he.data[0])


def test_identical_edges_share_weight(rng):
    p = node_params()
    one = random_ego(rng, 1)
    ego = EgoBatch(0, (0, 1), np.repeat(one.neighbors, 2), np.repeat(one.ids, 2, 0), np.repeat(one.mask, 2, 0))
    out = encode_nodes(p, [ego])
    assert np.allclose(out.alphas[0], [0.5, 0.5], atol=1e-15)
    assert np.max(np.abs(out.h_nodes.data[0] - out.h_edges.data[0])) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_matches_tape_free_oracle(seed):
    rng = np.random.default_rng(seed)
    p = node_params(seed, hidden=8, heads=2, layers=2)
    ego = random_ego(rng, 3)
    hv, he = encode_node(p, ego)
    want_v, want_e, _ = oracle_node(p, ego)
    assert np.max(np.abs(hv.data - want_v)) < 1e-10
    assert np.max(np.abs(he.data - want_e)) < 1e-10


@pytest.mark.parametrize(
    "tokens,mean",
    [(VirtualTokens(True, True, False), False), (VirtualTokens(False, True, True), False),
     (VirtualTokens(True, False, True), True), (VirtualTokens(True, True, True), True)],
)
def test_ablations_match_oracle(rng, tokens, mean):
    p = node_params(layers=3, aggregation="mean" if mean else "attention", tokens=tokens)
    ego = random_ego(rng, 4)
    hv, _ = encode_node(p, ego)
    want, _, _ = oracle_node(p, ego, use_i=tokens.node_i, use_j=tokens.node_j, use_ctx=tokens.context, mean=mean)
    assert np.max(np.abs(hv.data - want)) < 1e-10


def test_all_tokens_off_and_mean_is_vanilla_per_edge(rng):
    p = node_params(layers=3, aggregation="mean", tokens=VirtualTokens(False, False, False))
    ego = random_ego(rng, 3)
    out = encode_nodes(p, [ego])
    for e in range(3):
        seq = type("S", (), {"ids": ego.ids[e], "mask": ego.mask[e]})
        assert np.max(np.abs(out.h_edges.data[e] - plain_encoder(p, seq).data)) < 1e-12
    assert np.max(np.abs(out.h_nodes.data[0] - out.h_edges.data.mean(0))) < 1e-12


def test_permutation_invariance(rng):
    p = node_params(layers=3)
    ego = random_ego(rng, 4)
    base = encode_node(p, ego)[0].data
    for order in itertools.permutations(range(4)):
        assert np.max(np.abs(encode_node(p, permute_ego(ego, order))[0].data - base)) < 1e-10


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10_000))
def test_permutation_invariance_property(m, seed):
    rng = np.random.default_rng(seed)
    p = node_params(seed % 7)
    ego = random_ego(rng, m)
    base = encode_node(p, ego)[0].data
    assert np.max(np.abs(encode_node(p, permute_ego(ego, rng.permutation(m)))[0].data - base)) < 1e-10


def test_cross_edge_information_flow(rng):
    p = node_params()
    ego = random_ego(rng, 2, lengths=[4, 4], vocab=12)
    ids = ego.ids.copy()
    ids[0, 1:4] = [3, 4, 5]
    ids[1, 1:4] = [6, 7, 8]
    ego = EgoBatch(ego.center, ego.edges, ego.neighbors, ids, ego.mask)
    out = encode_nodes(p, [ego])
    nx.backward(nx.tsum(nx.take(out.h_edges, 0)))
    assert np.abs(p["tok_emb"].grad[6:9]).max() > 1e-8


def test_gradient_check_node_encoder(rng):
    p = node_params(hidden=8, heads=2, layers=2, node_dim=3, max_seq_len=4, vocab=8, nodes=4)
    ego = random_ego(rng, 3, P=4, vocab=8, nodes=4)
    w = Tensor(rng.normal(size=8))
    names = ["L1.ctx.wq", "agg.ws", "node_emb", "L1.node_map", "L0.attn.wk"]
    errs = nx.check_gradients(lambda: nx.tsum(nx.mul(encode_node(p, ego)[0], w)), [p[n] for n in names])
    assert max(errs.values()) < 1e-4, errs


def test_empty_ego_errors_and_fallback(rng):
    p = node_params()
    empty = EgoBatch(2, (), np.zeros(0, np.int64), np.zeros((0, 6), np.int64), np.zeros((0, 6), bool))
    with pytest.raises(EmptyNeighborhoodError):
        encode_node(p, empty)
    ego = random_ego(rng, 2)
    out = encode_nodes(p, [empty, ego])
    assert out.fallback == [True, False]
    assert np.max(np.abs(out.h_nodes.data[0] - fallback_embedding(p, [2]).data[0])) < 1e-15
    assert np.array_equal(out.h_nodes.data[1], encode_node(p, ego)[0].data)


def test_mixed_size_batch_equals_individual(rng):
    p = node_params()
    egos = [random_ego(rng, m, center=m) for m in (3, 1, 3, 2, 1)]
    batch = encode_nodes(p, egos).h_nodes.data
    for k, ego in enumerate(egos):
        assert np.max(np.abs(batch[k] - encode_node(p, ego)[0].data)) < 1e-12


def test_make_ego_puts_center_first_and_excludes():
    nodes = {n: Node(n) for n in "abcd"}
    edges = [Edge("b", "a", "d0"), Edge("a", "c", "d1"), Edge("d", "a", "d2")]
    net = TextualEdgeNetwork(nodes, edges, {"d0": "x y", "d1": "y", "d2": "z"})
    cache = TokenCache(net, build_vocab(net, 10), 4)
    ego = make_ego(net, cache, "a", 5, np.random.default_rng(0), exclude=(1,))
    idx = net.node_index
    assert ego.center == idx["a"] and ego.edges == (0, 2)
    assert ego.neighbors.tolist() == [idx["b"], idx["d"]]
