"""Node encoder: edge encodings of an ego graph, mixed and aggregated.

At every augmented layer the [CLS] states of all edges around the centre
attend to one another (symmetric attention over edges, no residual); the
result joins each edge's key/value sequence as a third virtual token after
the centre and neighbour tokens.  Edge readouts are pooled with
``alpha = softmax_e(h_e @ W_s @ z0_centre)``.

Egos of different sizes are never padded against each other: all edges are
encoded in one flat batch, and the cross-edge attention and the pooling run
per group of equal-size egos.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import ModelParams, VirtualTokens
from .edge_encoder import encode_sequences, node_base
from .graph import TextualEdgeNetwork, TokenCache, neighbor_edges
from .numerics import Tensor
from .transformer import multi_head_attention


class EmptyNeighborhoodError(ValueError):
    pass


@dataclass(frozen=True)
class EgoBatch:
    """A centre node and sampled incident edges.

    ``center`` and ``neighbors`` are rows of the node table; ``edges`` index
    the network's edge list; ``ids``/``mask`` are the (m, P) token arrays.
    """

    center: int
    edges: tuple[int, ...]
    neighbors: np.ndarray
    ids: np.ndarray
    mask: np.ndarray

    @property
    def size(self) -> int:
        return len(self.edges)


def make_ego(
    network: TextualEdgeNetwork,
    cache: TokenCache,
    v: str,
    cap: int,
    rng: np.random.Generator,
    *,
    exclude=(),
    splits=("train",),
) -> EgoBatch:
    picked = neighbor_edges(network, v, cap, rng, splits=splits, exclude=exclude)
    idx = network.node_index
    nbrs = np.array([idx[network.other_end(e, v)] for e in picked], dtype=np.int64)
    sel = np.array(picked, dtype=np.int64)
    return EgoBatch(idx[v], tuple(picked), nbrs, cache.ids[sel], cache.mask[sel])


def cross_edge_mha(params: ModelParams, layer: int, cls_states: Tensor) -> Tensor:
    """Symmetric multi-head attention over the (..., m, d) [CLS] states of one ego."""
    return multi_head_attention(params, f"L{layer}.ctx", cls_states, cls_states, None)


def _aggregate_group(params: ModelParams, h: Tensor, z0: Tensor) -> tuple[Tensor, Tensor]:
    # h: (G, s, d), z0: (G, d') -> alpha (G, s), h_v (G, d)
    G, s, _ = h.shape
    if params.config.aggregation == "mean":
        alpha = nx.Tensor(np.full((G, s), 1.0 / s))
    else:
        proj = nx.matmul(h, params["agg.ws"])
        scores = nx.tsum(nx.mul(proj, nx.reshape(z0, (G, 1, z0.shape[-1]))), axis=-1)
        alpha = nx.softmax_masked(scores)
    h_v = nx.reshape(nx.matmul(nx.reshape(alpha, (G, 1, s)), h), (G, h.shape[-1]))
    return alpha, h_v


def aggregate(params: ModelParams, h_edges: Tensor, z0_v: Tensor) -> tuple[Tensor, Tensor]:
    """Attention pooling of (m, d) edge vectors for one node with base embedding (d',)."""
    if h_edges.shape[0] < 1:
        raise EmptyNeighborhoodError("cannot aggregate zero edges")
    m, d = h_edges.shape
    alpha, h_v = _aggregate_group(params, nx.reshape(h_edges, (1, m, d)), nx.reshape(z0_v, (1, z0_v.shape[-1])))
    return nx.reshape(alpha, (m,)), nx.reshape(h_v, (d,))


def _grouped(values: Tensor, segments: list[tuple[int, int]], fn) -> Tensor:
    """Apply ``fn`` to each equal-size group of segments of ``values`` (M, d); reassemble (M, d)."""
    by_size: dict[int, list[int]] = defaultdict(list)
    for start, size in segments:
        by_size[size].append(start)
    outs, positions = [], []
    for size in sorted(by_size):
        starts = np.asarray(by_size[size])
        idx = starts[:, None] + np.arange(size)[None, :]
        block = fn(nx.take(values, idx))
        outs.append(nx.reshape(block, (idx.size, values.shape[-1])))
        positions.append(idx.reshape(-1))
    merged = nx.concat(outs, axis=0)
    order = np.argsort(np.concatenate(positions), kind="stable")
    return nx.take(merged, order)


@dataclass
class NodeEncodingOutput:
    h_nodes: Tensor
    h_edges: Tensor | None
    alphas: list[np.ndarray | None]
    fallback: list[bool]


def fallback_embedding(params: ModelParams, rows) -> Tensor:
    """Node-embedding-only representation used for egos with no edges."""
    return nx.matmul(node_base(params, rows), params[f"L{params.config.layers - 1}.node_map"])


def encode_nodes(
    params: ModelParams,
    egos: list[EgoBatch],
    tokens: VirtualTokens | None = None,
    *,
    allow_empty: bool = True,
    rng: np.random.Generator | None = None,
) -> NodeEncodingOutput:
    """Encode many egos in one pass; returns (len(egos), d) node vectors in input order."""
    cfg = params.config
    tokens = tokens or cfg.tokens
    full = [k for k, e in enumerate(egos) if e.size > 0]
    empty = [k for k, e in enumerate(egos) if e.size == 0]
    if empty and not allow_empty:
        raise EmptyNeighborhoodError(f"ego of node row {egos[empty[0]].center} has no edges")

    pieces, where = [], []
    h_edges = None
    alphas: list[np.ndarray | None] = [None] * len(egos)
    if full:
        segments, start = [], 0
        for k in full:
            segments.append((start, egos[k].size))
            start += egos[k].size
        ids = np.concatenate([egos[k].ids for k in full])
        mask = np.concatenate([egos[k].mask for k in full])
        centers = np.concatenate([np.full(egos[k].size, egos[k].center) for k in full])
        nbrs = np.concatenate([egos[k].neighbors for k in full])

        def context(l, H):
            cls = nx.take(H, (slice(None), 0, slice(None)))
            return _grouped(cls, segments, lambda block: cross_edge_mha(params, l, block))

        h_edges, _ = encode_sequences(params, ids, mask, centers, nbrs, tokens=tokens,
                                      context=context, readout=cfg.readout, rng=rng)

        by_size: dict[int, list[int]] = defaultdict(list)
        for seg_no, (s0, size) in enumerate(segments):
            by_size[size].append(seg_no)
        for size in sorted(by_size):
            seg_nos = by_size[size]
            idx = np.asarray([segments[q][0] for q in seg_nos])[:, None] + np.arange(size)[None, :]
            z0 = node_base(params, [egos[full[q]].center for q in seg_nos])
            alpha, h_v = _aggregate_group(params, nx.take(h_edges, idx), z0)
            for row, q in enumerate(seg_nos):
                alphas[full[q]] = alpha.data[row].copy()
            pieces.append(h_v)
            where.extend(full[q] for q in seg_nos)
    if empty:
        pieces.append(fallback_embedding(params, [egos[k].center for k in empty]))
        where.extend(empty)
    merged = nx.concat(pieces, axis=0) if len(pieces) > 1 else pieces[0]
    h_nodes = nx.take(merged, np.argsort(np.asarray(where), kind="stable"))
    return NodeEncodingOutput(h_nodes, h_edges, alphas, [e.size == 0 for e in egos])


def encode_node(params: ModelParams, ego: EgoBatch, tokens: VirtualTokens | None = None) -> tuple[Tensor, Tensor]:
    """(h_v, per-edge h_{e|v}) for a single non-empty ego."""
    if ego.size == 0:
        raise EmptyNeighborhoodError(f"ego of node row {ego.center} has no edges")
    out = encode_nodes(params, [ego], tokens, allow_empty=False)
    return nx.take(out.h_nodes, 0), out.h_edges


def permute_ego(ego: EgoBatch, order) -> EgoBatch:
    order = np.asarray(order)
    return EgoBatch(ego.center, tuple(ego.edges[k] for k in order), ego.neighbors[order], ego.ids[order], ego.mask[order])


__all__ = [
    "EgoBatch",
    "EmptyNeighborhoodError",
    "NodeEncodingOutput",
    "aggregate",
    "cross_edge_mha",
    "encode_node",
    "encode_nodes",
    "fallback_embedding",
    "make_ego",
    "permute_ego",
]
