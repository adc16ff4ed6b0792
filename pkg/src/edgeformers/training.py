"""Objectives, AdamW, and the two training loops."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .config import ModelParams, TrainConfig
from .edge_encoder import encode_edge_batch
from .evaluation import MetricReport, f1_scores, in_batch_ranks, mrr_ndcg
from .graph import TextualEdgeNetwork, TokenCache
from .node_encoder import encode_nodes, make_ego
from .numerics import Tensor


class MissingGradientError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# objectives


@dataclass
class ClassifierHead:
    w: Tensor
    b: Tensor

    @classmethod
    def of(cls, params: ModelParams) -> "ClassifierHead":
        return cls(params["head.w"], params["head.b"])

    @property
    def num_classes(self) -> int:
        return self.w.shape[1]


def edge_classification_loss(h_edges: Tensor, labels, head: ClassifierHead, variant: str = "bce") -> Tensor:
    """Mean over the batch of the per-edge loss.

    ``bce``: per-class sigmoid cross-entropy against one-hot targets, summed
    over classes.  ``softmax``: ordinary categorical cross-entropy.
    """
    labels = np.asarray(labels, dtype=np.int64)
    C = head.num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label outside 0..{C - 1}")
    logits = nx.linear(h_edges, head.w, head.b)
    if variant == "bce":
        onehot = np.eye(C)[labels]
        return nx.mean(nx.tsum(nx.bce_terms(logits, onehot), axis=1))
    if variant == "softmax":
        return nx.mean(nx.cross_entropy_terms(logits, labels))
    raise ValueError(f"unknown loss variant {variant!r}")


def link_prediction_loss(h_query: Tensor, h_key: Tensor) -> Tensor:
    """In-batch softmax loss: row i of ``h_key`` is the positive, the other rows negatives."""
    B = h_query.shape[0]
    if B < 2:
        raise ValueError("in-batch negatives need a batch of at least 2 pairs")
    if h_key.shape != h_query.shape:
        raise nx.ShapeError(f"query {h_query.shape} and key {h_key.shape} batches differ")
    S = nx.matmul(h_query, nx.transpose(h_key))
    lp = nx.log_softmax(S)
    diag = nx.take(lp, (np.arange(B), np.arange(B)))
    return nx.neg(nx.mean(diag))


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def adamw_step(params: dict[str, Tensor], state: OptimizerState, config: TrainConfig) -> None:
    """Bias-corrected Adam with decoupled weight decay; clears gradients."""
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient")
        if p.grad.shape != p.shape:
            raise nx.ShapeError(f"gradient of {name!r} has shape {p.grad.shape}, expected {p.shape}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        data = p.data
        if config.weight_decay:
            data = data - config.lr * config.weight_decay * data
        p.data = data - config.lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        p.grad = None


# ---------------------------------------------------------------------------
# loops


@dataclass
class TrainResult:
    params: ModelParams
    report: MetricReport
    optimizer: OptimizerState
    history: list[dict]

    def __iter__(self):
        return iter((self.params, self.report))


LogFn = Callable[[dict], None]


def _check_finite(loss: Tensor, step: int) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at step {step}")
    return value


def _update(params: ModelParams, names: Sequence[str], loss: Tensor, state: OptimizerState, config: TrainConfig):
    params.zero_grad()
    nx.backward(loss)
    chosen = {k: params[k] for k in names}
    if config.clip_norm:
        clip_grad_norm(chosen, config.clip_norm)
    adamw_step(chosen, state, config)


def predict_edges(params: ModelParams, network: TextualEdgeNetwork, cache: TokenCache, edges: Sequence[int],
                  batch: int = 100) -> np.ndarray:
    idx = network.node_index
    out = []
    with nx.no_grad():
        for s in range(0, len(edges), batch):
            sel = np.asarray(edges[s : s + batch])
            ri = [idx[network.edges[e].u] for e in sel]
            rj = [idx[network.edges[e].v] for e in sel]
            h = encode_edge_batch(params, cache.ids[sel], cache.mask[sel], ri, rj)
            out.append(h.data @ params["head.w"].data + params["head.b"].data)
    return np.concatenate(out) if out else np.zeros((0, params.config.num_labels))


def edge_scores(params, network, cache, edges) -> dict[str, float]:
    if not edges:
        return {}
    logits = predict_edges(params, network, cache, edges)
    gold = [network.edges[e].label for e in edges]
    macro, micro, _ = f1_scores(logits.argmax(axis=1), gold, params.config.num_labels)
    return {"macro_f1": macro, "micro_f1": micro}


def train_edge_task(
    network: TextualEdgeNetwork,
    params: ModelParams,
    config: TrainConfig,
    cache: TokenCache,
    *,
    optimizer: OptimizerState | None = None,
    log: LogFn | None = None,
    start_epoch: int = 0,
) -> TrainResult:
    """Supervised edge classification with early stopping on validation Micro-F1."""
    train = [e for e in network.edges_in("train") if network.edges[e].label is not None]
    val = [e for e in network.edges_in("val") if network.edges[e].label is not None]
    if not train:
        raise DataError("edge classification needs labelled train edges")
    if "head.w" not in params:
        raise DataError("model has no classifier head")
    rng = np.random.default_rng(config.seed + start_epoch)
    state = optimizer or OptimizerState()
    names = params.trainable("edge")
    head = ClassifierHead.of(params)
    idx = network.node_index
    labels = np.array([network.edges[e].label if network.edges[e].label is not None else -1
                       for e in range(len(network.edges))])

    best_score, best_arrays, best_epoch = -1.0, params.arrays(), start_epoch
    history, bad = [], 0
    for epoch in range(start_epoch + 1, start_epoch + config.epochs + 1):
        order = rng.permutation(train)
        losses = []
        for s in range(0, len(order), config.edge_batch_size):
            sel = order[s : s + config.edge_batch_size]
            ri = [idx[network.edges[e].u] for e in sel]
            rj = [idx[network.edges[e].v] for e in sel]
            h = encode_edge_batch(params, cache.ids[sel], cache.mask[sel], ri, rj, rng=rng)
            loss = edge_classification_loss(h, labels[sel], head, config.loss_variant)
            losses.append(_check_finite(loss, state.step + 1))
            _update(params, names, loss, state, config)
        tr = edge_scores(params, network, cache, train)
        va = edge_scores(params, network, cache, val) if val else tr
        row = {
            "epoch": epoch,
            "step": state.step,
            "train_loss": float(np.mean(losses)),
            "train_micro_f1": tr["micro_f1"],
            "val_micro_f1": va["micro_f1"],
            "val_macro_f1": va["macro_f1"],
        }
        history.append(row)
        if log:
            log(row)
        if va["micro_f1"] > best_score:
            best_score, best_arrays, best_epoch, bad = va["micro_f1"], params.arrays(), epoch, 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    params.load_arrays(best_arrays)
    best_row = next(r for r in history if r["epoch"] == best_epoch) if history else {}
    report = MetricReport(
        "edge",
        {"val_micro_f1": best_score, "val_macro_f1": best_row.get("val_macro_f1", 0.0),
         "train_micro_f1": best_row.get("train_micro_f1", 0.0)},
        len(val) or len(train),
        extra={"best_epoch": best_epoch, "epochs_run": len(history), "loss_variant": config.loss_variant,
               "step": state.step},
    )
    return TrainResult(params, report, state, history)


def pair_egos(network: TextualEdgeNetwork, cache: TokenCache, config: TrainConfig, edges: Sequence[int],
              rng: np.random.Generator):
    """Query/key egos for each edge (u, v), with the edge itself removed from both."""
    q, k = [], []
    for e in edges:
        edge = network.edges[e]
        q.append(make_ego(network, cache, edge.u, config.cap_for(network.nodes[edge.u].type), rng, exclude=(e,)))
        k.append(make_ego(network, cache, edge.v, config.cap_for(network.nodes[edge.v].type), rng, exclude=(e,)))
    return q, k


def encode_pairs(params, network, cache, config, edges, rng, grad_rng=None, *, with_egos=False):
    q, k = pair_egos(network, cache, config, edges, rng)
    out = encode_nodes(params, q + k, rng=grad_rng).h_nodes
    B = len(edges)
    hq, hk = nx.take(out, slice(0, B)), nx.take(out, slice(B, 2 * B))
    return (hq, hk, q + k) if with_egos else (hq, hk)


def _fallback_names(params: ModelParams) -> list[str]:
    # parameters an all-empty batch reaches: node table and the last node map
    return ["node_emb", f"L{params.config.layers - 1}.node_map"]


def validation_batches(edges: Sequence[int], batch_size: int, seed: int) -> list[list[int]]:
    order = np.random.default_rng(seed).permutation(np.asarray(edges, dtype=np.int64))
    batches = [list(order[s : s + batch_size]) for s in range(0, len(order), batch_size)]
    return [b for b in batches if len(b) >= 2]


def in_batch_validation(params, network, cache, config, edges, seed) -> tuple[float, int]:
    """In-batch MRR over a fixed seeded arrangement of ``edges``."""
    rng = np.random.default_rng(seed + 1)
    ranks = []
    with nx.no_grad():
        for batch in validation_batches(edges, config.node_batch_size, seed):
            hq, hk = encode_pairs(params, network, cache, config, batch, rng)
            S = hq.data @ hk.data.T
            ranks.extend(in_batch_ranks(S, [network.edges[e].v for e in batch]))
    if not ranks:
        return 0.0, 0
    return mrr_ndcg(ranks)[0], len(ranks)


def train_node_task(
    network: TextualEdgeNetwork,
    params: ModelParams,
    config: TrainConfig,
    cache: TokenCache,
    *,
    optimizer: OptimizerState | None = None,
    log: LogFn | None = None,
    start_epoch: int = 0,
    val_split: str = "val",
) -> TrainResult:
    """Link prediction with in-batch negatives; early stopping on in-batch validation MRR."""
    train = network.edges_in("train")
    if len(train) < 2:
        raise DataError("link prediction needs at least two train edges")
    val = network.edges_in(val_split)
    rng = np.random.default_rng(config.seed + start_epoch)
    state = optimizer or OptimizerState()
    names = params.trainable("node")

    best_score, best_arrays, best_epoch = -1.0, params.arrays(), start_epoch
    history, bad = [], 0
    for epoch in range(start_epoch + 1, start_epoch + config.epochs + 1):
        order = rng.permutation(train)
        losses = []
        for s in range(0, len(order), config.node_batch_size):
            batch = list(order[s : s + config.node_batch_size])
            if len(batch) < 2:
                continue
            hq, hk, egos = encode_pairs(params, network, cache, config, batch, rng, grad_rng=rng, with_egos=True)
            loss = link_prediction_loss(hq, hk)
            losses.append(_check_finite(loss, state.step + 1))
            reached = names if any(e.size for e in egos) else [n for n in _fallback_names(params) if n in names]
            _update(params, reached, loss, state, config)
        if val:
            score, _ = in_batch_validation(params, network, cache, config, val, config.seed)
        else:
            score = -float(np.mean(losses))
        row = {"epoch": epoch, "step": state.step, "train_loss": float(np.mean(losses)), "val_mrr": score}
        history.append(row)
        if log:
            log(row)
        if score > best_score:
            best_score, best_arrays, best_epoch, bad = score, params.arrays(), epoch, 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    params.load_arrays(best_arrays)
    report = MetricReport(
        "node",
        {"val_mrr": best_score, "train_loss": next(r["train_loss"] for r in history if r["epoch"] == best_epoch)
         if history else 0.0},
        len(val),
        extra={"best_epoch": best_epoch, "epochs_run": len(history), "step": state.step},
    )
    return TrainResult(params, report, state, history)
