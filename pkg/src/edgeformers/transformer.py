"""Post-norm Transformer layers with optional virtual tokens on the key/value side."""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .config import ModelParams
from .numerics import ShapeError, Tensor


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = nx.reshape(x, (*lead, n, heads, d // heads))
    k = len(lead)
    return nx.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    k = len(lead)
    x = nx.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))
    return nx.reshape(x, (*lead, n, h * dh))


def multi_head_attention(
    params: ModelParams,
    prefix: str,
    queries: Tensor,
    keys: Tensor,
    key_mask: np.ndarray | None,
    trace: list | None = None,
) -> Tensor:
    """Scaled dot-product attention of ``queries`` (..., nq, d) over ``keys`` (..., nk, d).

    ``key_mask`` has shape (..., nk); masked keys get probability exactly 0.
    Appends the (..., heads, nq, nk) probability array to ``trace`` if given.
    """
    heads = params.config.heads
    p = lambda s: params[f"{prefix}.{s}"]  # noqa: E731
    q = _split_heads(nx.linear(queries, p("wq"), p("bq")), heads)
    k = _split_heads(nx.linear(keys, p("wk"), p("bk")), heads)
    v = _split_heads(nx.linear(keys, p("wv"), p("bv")), heads)
    scores = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[..., None, None, :]
    probs = nx.softmax_masked(scores, mask)
    if trace is not None:
        trace.append(probs.data.copy())
    ctx = _merge_heads(nx.matmul(probs, v))
    return nx.linear(ctx, p("wo"), p("bo"))


def transformer_layer(
    params: ModelParams,
    layer: int,
    H: Tensor,
    mask: np.ndarray,
    extra: Tensor | None = None,
    *,
    extra_mask: np.ndarray | None = None,
    query_extra: bool = False,
    trace: list | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """One layer: residual attention + norm, then residual GELU FFN + norm.

    ``extra`` (..., e, d) is prepended to the keys and values only, so the
    output keeps H's row count.  ``extra_mask`` can hide individual virtual
    tokens from attention.  With ``query_extra`` the virtual tokens also
    issue queries and the output has e + n rows.
    """
    mask = np.asarray(mask, dtype=bool)
    if H.shape[:-1] != mask.shape:
        raise ShapeError(f"hidden states {H.shape} do not match mask {mask.shape}")
    cfg = params.config
    if H.shape[-1] != cfg.hidden:
        raise ShapeError(f"hidden width {H.shape[-1]} != configured {cfg.hidden}")
    if extra is not None and extra.shape[-2] == 0:
        extra = None
    if extra is None:
        keys, key_mask = H, mask
    else:
        if extra.shape[-1] != cfg.hidden or extra.shape[:-2] != H.shape[:-2]:
            raise ShapeError(f"virtual tokens {extra.shape} do not fit hidden states {H.shape}")
        keys = nx.concat_rows([extra, H])
        if extra_mask is None:
            extra_mask = np.ones(extra.shape[:-1], dtype=bool)
        extra_mask = np.broadcast_to(np.asarray(extra_mask, dtype=bool), extra.shape[:-1])
        key_mask = np.concatenate([extra_mask, mask], axis=-1)
    queries = keys if (query_extra and extra is not None) else H

    pre = f"L{layer}"
    attn = multi_head_attention(params, f"{pre}.attn", queries, keys, key_mask, trace)
    attn = nx.dropout(attn, cfg.dropout, rng)
    h1 = nx.layer_norm(nx.add(queries, attn), params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"], cfg.ln_eps)
    ff = nx.linear(nx.gelu(nx.linear(h1, params[f"{pre}.ffn.w1"], params[f"{pre}.ffn.b1"])),
                   params[f"{pre}.ffn.w2"], params[f"{pre}.ffn.b2"])
    ff = nx.dropout(ff, cfg.dropout, rng)
    return nx.layer_norm(nx.add(h1, ff), params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"], cfg.ln_eps)


def vanilla_layer(params: ModelParams, layer: int, H: Tensor, mask: np.ndarray, **kw) -> Tensor:
    return transformer_layer(params, layer, H, mask, None, **kw)


def augmented_layer(params: ModelParams, layer: int, H: Tensor, mask: np.ndarray, extra_tokens, **kw) -> Tensor:
    """Asymmetric layer; ``extra_tokens`` is a (..., e, d) tensor or a list of (..., d) tensors."""
    if isinstance(extra_tokens, (list, tuple)):
        extra = nx.stack(list(extra_tokens), axis=-2) if extra_tokens else None
    else:
        extra = extra_tokens
    return transformer_layer(params, layer, H, mask, extra, **kw)


def embed_tokens(params: ModelParams, ids: np.ndarray) -> Tensor:
    """Token plus learned absolute position embeddings, layer-normalised."""
    ids = np.asarray(ids, dtype=np.int64)
    n = ids.shape[-1]
    cfg = params.config
    if n > cfg.max_seq_len:
        raise ShapeError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")
    tok = nx.embedding_lookup(params["tok_emb"], ids)
    pos = nx.slice_rows(params["pos_emb"], 0, n)
    return nx.layer_norm(nx.add(tok, pos), params["emb_ln.g"], params["emb_ln.b"], cfg.ln_eps)
