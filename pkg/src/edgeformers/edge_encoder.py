"""Edge encoder: text Transformer with per-layer virtual node tokens.

Layer 0 is a vanilla layer over the edge text.  Every later layer ``l``
prepends ``z_i = z0_i @ node_map[l]`` and ``z_j = z0_j @ node_map[l]`` to the
keys and values (never to the queries), and the edge representation is the
final [CLS] state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .config import ModelParams, VirtualTokens
from .graph import TokenSequence
from .numerics import Tensor
from .transformer import augmented_layer, embed_tokens, transformer_layer, vanilla_layer


class UnknownNodeRow(IndexError):
    pass


@dataclass
class EdgeEncodingOutput:
    h_e: Tensor
    states: list[Tensor]
    attention: list[np.ndarray] = field(default_factory=list)


def _check_rows(params: ModelParams, rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.int64)
    n = params.config.num_nodes
    if rows.size and (rows.min() < 0 or rows.max() >= n):
        raise UnknownNodeRow(f"node row outside the {n}-row node table")
    return rows


def node_base(params: ModelParams, rows) -> Tensor:
    return nx.embedding_lookup(params["node_emb"], _check_rows(params, rows))


def virtual_node_tokens(params: ModelParams, layer: int, v_i, v_j) -> tuple[Tensor, Tensor]:
    """Layer-specific projections of the base embeddings of both endpoints."""
    if not 1 <= layer <= params.config.layers - 1:
        raise ValueError(f"virtual tokens exist for layers 1..{params.config.layers - 1}, got {layer}")
    W = params[f"L{layer}.node_map"]
    return nx.matmul(node_base(params, v_i), W), nx.matmul(node_base(params, v_j), W)


ContextFn = Callable[[int, Tensor], Tensor]


def encode_sequences(
    params: ModelParams,
    ids: np.ndarray,
    mask: np.ndarray,
    rows_i,
    rows_j,
    *,
    tokens: VirtualTokens | None = None,
    context: ContextFn | None = None,
    readout: str | None = None,
    trace: list | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[Tensor]]:
    """Shared layer loop for a batch of M sequences.

    ``context(l, H)`` supplies a third per-sequence virtual token (M, d) from
    the states entering layer ``l``; the node encoder uses it for the
    cross-edge token.  Returns the (M, d) readout and the per-layer states.
    """
    cfg = params.config
    tokens = tokens or cfg.tokens
    readout = readout or cfg.readout
    rows_i = _check_rows(params, rows_i)
    rows_j = _check_rows(params, rows_j)
    H = embed_tokens(params, ids)
    H = vanilla_layer(params, 0, H, mask, trace=trace, rng=rng)
    states = [H]
    z0_i = node_base(params, rows_i) if tokens.node_i else None
    z0_j = node_base(params, rows_j) if tokens.node_j else None
    last = cfg.layers - 1
    for l in range(1, cfg.layers):
        extras = []
        if tokens.node_i:
            extras.append(nx.matmul(z0_i, params[f"L{l}.node_map"]))
        if tokens.node_j:
            extras.append(nx.matmul(z0_j, params[f"L{l}.node_map"]))
        if context is not None and tokens.context:
            extras.append(context(l, H))
        extra = nx.stack(extras, axis=-2) if extras else None
        query_extra = readout == "neighbor_token" and l == last
        H = transformer_layer(params, l, H, mask, extra, query_extra=query_extra, trace=trace, rng=rng)
        states.append(H)
    if readout == "neighbor_token":
        if not tokens.node_j:
            raise ValueError("neighbor_token readout needs the node_j virtual token")
        pos = 1 if tokens.node_i else 0
        h = nx.take(H, (slice(None), pos, slice(None)))
        states[-1] = nx.take(H, (slice(None), slice(len(extras), None), slice(None)))
    else:
        h = nx.take(H, (slice(None), 0, slice(None)))
    return h, states


def encode_edge_batch(params: ModelParams, ids, mask, rows_i, rows_j, tokens: VirtualTokens | None = None,
                      rng: np.random.Generator | None = None) -> Tensor:
    """(B, d) edge representations for a padded batch."""
    h, _ = encode_sequences(params, ids, mask, rows_i, rows_j, tokens=tokens, rng=rng)
    return h


def encode_edge(
    params: ModelParams,
    seq: TokenSequence,
    v_i: int,
    v_j: int,
    tokens: VirtualTokens | None = None,
    *,
    with_attention: bool = False,
) -> EdgeEncodingOutput:
    trace = [] if with_attention else None
    h, states = encode_sequences(
        params, seq.ids[None, :], seq.mask[None, :], [v_i], [v_j], tokens=tokens, trace=trace
    )
    return EdgeEncodingOutput(
        h_e=nx.take(h, 0),
        states=[nx.take(s, 0) for s in states],
        attention=[a[0] for a in trace] if trace is not None else [],
    )


def plain_encoder(params: ModelParams, seq: TokenSequence) -> Tensor:
    """T vanilla layers over the text; equals the edge encoder with no virtual tokens."""
    H = embed_tokens(params, seq.ids[None, :])
    for l in range(params.config.layers):
        H = vanilla_layer(params, l, H, seq.mask[None, :])
    return nx.take(H, (0, 0, slice(None)))


def attention_trace(params: ModelParams, seq: TokenSequence, v_i: int, v_j: int,
                    tokens: VirtualTokens | None = None) -> list[dict]:
    """Per (layer, head) softmax probabilities of the real text queries over all keys.

    Layer 0 keys are the text tokens; later layers prepend the enabled
    virtual tokens (``z_i``, ``z_j``).
    """
    tokens = tokens or params.config.tokens
    with nx.no_grad():
        out = encode_edge(params, seq, v_i, v_j, tokens, with_attention=True)
    n_real = seq.length
    text_keys = [f"t{k}" for k in range(len(seq.ids))]
    text_keys[0] = "[CLS]"
    virtual = [name for name, on in (("z_i", tokens.node_i), ("z_j", tokens.node_j)) if on]
    rows = []
    for layer, probs in enumerate(out.attention):
        keys = text_keys if layer == 0 else virtual + text_keys
        for head in range(probs.shape[0]):
            rows.append({"layer": layer, "head": head, "keys": keys, "probs": probs[head, :n_real, :]})
    return rows


def export_trace(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps({**r, "probs": np.asarray(r["probs"]).tolist()}) + "\n")


__all__ = [
    "EdgeEncodingOutput",
    "augmented_layer",
    "attention_trace",
    "encode_edge",
    "encode_edge_batch",
    "encode_sequences",
    "export_trace",
    "node_base",
    "plain_encoder",
    "virtual_node_tokens",
]
