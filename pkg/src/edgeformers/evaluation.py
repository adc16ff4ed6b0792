"""Metrics, ranking protocols and the frozen-embedding logistic probe."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .config import ModelParams, TrainConfig
from .graph import TextualEdgeNetwork, TokenCache
from .node_encoder import encode_nodes, make_ego


class EmptySplitError(ValueError):
    pass


class DegenerateSplitError(ValueError):
    pass


@dataclass
class MetricReport:
    task: str
    metrics: dict[str, float]
    count: int
    per_class: dict[str, list[float]] | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricReport":
        return cls(**obj)


# ---------------------------------------------------------------------------
# classification


def f1_scores(pred: Sequence[int], gold: Sequence[int], num_classes: int) -> tuple[float, float, list[float]]:
    """(macro, micro, per-class) F1; a class with an empty denominator scores 0."""
    pred = np.asarray(pred, dtype=np.int64)
    gold = np.asarray(gold, dtype=np.int64)
    if pred.shape != gold.shape:
        raise ValueError(f"pred has {pred.size} entries, gold has {gold.size}")
    for arr in (pred, gold):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError("label outside 0..num_classes-1")
    tp = np.bincount(gold[pred == gold], minlength=num_classes).astype(float)
    fp = np.bincount(pred, minlength=num_classes) - tp
    fn = np.bincount(gold, minlength=num_classes) - tp
    per = []
    for c in range(num_classes):
        denom = 2 * tp[c] + fp[c] + fn[c]
        per.append(float(2 * tp[c] / denom) if denom else 0.0)
    TP, FP, FN = tp.sum(), fp.sum(), fn.sum()
    micro = float(2 * TP / (2 * TP + FP + FN)) if (2 * TP + FP + FN) else 0.0
    return float(np.mean(per)), micro, per


def multilabel_f1(pred: np.ndarray, gold: np.ndarray) -> tuple[float, float, float]:
    """(macro F1, micro F1, micro precision) over binary indicator matrices."""
    pred = np.asarray(pred, dtype=bool)
    gold = np.asarray(gold, dtype=bool)
    tp = (pred & gold).sum(0).astype(float)
    fp = (pred & ~gold).sum(0).astype(float)
    fn = (~pred & gold).sum(0).astype(float)
    denom = 2 * tp + fp + fn
    per = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    TP, FP, FN = tp.sum(), fp.sum(), fn.sum()
    micro = 2 * TP / (2 * TP + FP + FN) if (2 * TP + FP + FN) else 0.0
    prec = TP / (TP + FP) if (TP + FP) else 0.0
    return float(per.mean()), float(micro), float(prec)


# ---------------------------------------------------------------------------
# ranking


def rank_of_positive(scores: Sequence[float]) -> int:
    """1-based rank of ``scores[0]``; negatives tied with the positive rank above it."""
    s = np.asarray(scores, dtype=np.float64)
    return 1 + int(np.count_nonzero(s[1:] >= s[0]))


def mrr_ndcg(ranks: Sequence[int]) -> tuple[float, float]:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise EmptySplitError("no ranks to average")
    if r.min() < 1:
        raise ValueError("ranks start at 1")
    return float(np.mean(1.0 / r)), float(np.mean(1.0 / np.log2(1.0 + r)))


def in_batch_ranks(scores: np.ndarray, key_ids: Sequence[str]) -> list[int]:
    """Rank of the diagonal in each row of a (B, B) score matrix.

    Keys that are the same node as the row's positive are not negatives.
    """
    key_ids = np.asarray(key_ids, dtype=object)
    ranks = []
    for i in range(scores.shape[0]):
        neg = key_ids != key_ids[i]
        ranks.append(rank_of_positive(np.concatenate([[scores[i, i]], scores[i, neg]])))
    return ranks


def random_in_batch_mrr(key_batches: list[Sequence[str]], trials: int, seed: int) -> float:
    """Expected in-batch MRR of a scorer that ignores its input, by simulation."""
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    for _ in range(trials):
        for keys in key_batches:
            S = rng.standard_normal((len(keys), len(keys)))
            r = np.asarray(in_batch_ranks(S, keys), dtype=float)
            total += float((1.0 / r).sum())
            count += len(r)
    return total / count


# ---------------------------------------------------------------------------
# node embeddings and link prediction


def _node_type_cap(network: TextualEdgeNetwork, config: TrainConfig, v: str) -> int:
    return config.cap_for(network.nodes[v].type)


def node_embeddings(
    params: ModelParams,
    network: TextualEdgeNetwork,
    cache: TokenCache,
    config: TrainConfig,
    rng: np.random.Generator,
    nodes: Sequence[str] | None = None,
    exclude: Sequence[Sequence[int]] | None = None,
    chunk: int = 64,
) -> np.ndarray:
    """Frozen (len(nodes), d) node vectors from train-split egos."""
    nodes = list(network.node_ids if nodes is None else nodes)
    egos = [
        make_ego(network, cache, v, _node_type_cap(network, config, v), rng,
                 exclude=() if exclude is None else exclude[k])
        for k, v in enumerate(nodes)
    ]
    out = np.zeros((len(nodes), params.config.hidden))
    with nx.no_grad():
        for s in range(0, len(egos), chunk):
            out[s : s + chunk] = encode_nodes(params, egos[s : s + chunk]).h_nodes.data
    return out


def eval_link_prediction(
    params: ModelParams,
    network: TextualEdgeNetwork,
    cache: TokenCache,
    config: TrainConfig,
    split: str = "test",
    K: int = 99,
    seed: int = 0,
) -> MetricReport:
    """1 positive + K negatives per edge (u -> v), scored by dot product.

    Negatives are drawn uniformly from nodes of v's type that are neither u
    nor any neighbour of u.  Egos come from train edges; when the evaluated
    edge is itself a train edge it is removed from both egos.
    """
    edges = network.edges_in(split)
    if not edges:
        raise EmptySplitError(f"split {split!r} has no edges")
    rng = np.random.default_rng(seed)
    index = network.node_index
    base = node_embeddings(params, network, cache, config, rng)
    leaked = [e for e in edges if network.edges[e].split == "train"]
    own: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    if leaked:
        ends = [x for e in leaked for x in (network.edges[e].u, network.edges[e].v)]
        excl = [[e] for e in leaked for _ in range(2)]
        vecs = node_embeddings(params, network, cache, config, rng, ends, excl)
        for k, e in enumerate(leaked):
            own[e] = (vecs[2 * k], vecs[2 * k + 1])
    by_type = {t: np.asarray(ids, dtype=object) for t, ids in network.node_types().items()}

    ranks = []
    for e in edges:
        edge = network.edges[e]
        hq, hk = own.get(e, (base[index[edge.u]], base[index[edge.v]]))
        banned = network.neighbors(edge.u) | {edge.u, edge.v}
        pool = [n for n in by_type[network.nodes[edge.v].type] if n not in banned]
        if len(pool) < K:
            raise ValueError(f"only {len(pool)} eligible negatives for edge {e}, need {K}")
        negs = rng.choice(len(pool), size=K, replace=False)
        cand = np.stack([hk] + [base[index[pool[j]]] for j in negs])
        ranks.append(rank_of_positive(cand @ hq))
    mrr, ndcg = mrr_ndcg(ranks)
    r = np.asarray(ranks, dtype=float)
    se = float(np.std(1.0 / r, ddof=1) / math.sqrt(len(r))) if len(r) > 1 else 0.0
    return MetricReport("link", {"mrr": mrr, "ndcg": ndcg}, len(ranks),
                        extra={"split": split, "negatives": K, "mrr_stderr": se})


def random_mrr(K: int = 99) -> float:
    """Mean of 1/r for a rank uniform on 1..K+1."""
    return float(np.mean(1.0 / np.arange(1, K + 2)))


# ---------------------------------------------------------------------------
# logistic probe


def _seeded_split(n: int, seed: int, fractions=(0.6, 0.2, 0.2)) -> list[str]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_tr = int(round(fractions[0] * n))
    n_va = int(round(fractions[1] * n))
    split = np.empty(n, dtype=object)
    split[order[:n_tr]] = "train"
    split[order[n_tr : n_tr + n_va]] = "val"
    split[order[n_tr + n_va :]] = "test"
    return list(split)


def logistic_probe(
    embeddings: np.ndarray,
    labels: Sequence[Sequence[int]],
    splits: Sequence[str] | None = None,
    num_classes: int | None = None,
    lr: float = 0.001,
    patience: int = 10,
    max_epochs: int = 5000,
    seed: int = 0,
) -> MetricReport:
    """One-vs-rest logistic regression on fixed embeddings, trained full-batch with Adam.

    Stops when validation loss fails to improve for ``patience`` epochs and
    reports test F1 from the best epoch.  When every node has exactly one
    label, predictions are the arg-max class.
    """
    from .training import OptimizerState, adamw_step

    X = np.asarray(embeddings, dtype=np.float64)
    n = X.shape[0]
    labels = [tuple(l) for l in labels]
    if len(labels) != n:
        raise ValueError("one label set per embedding row is required")
    C = num_classes or (max((max(l) for l in labels if l), default=-1) + 1)
    Y = np.zeros((n, C))
    for i, ls in enumerate(labels):
        Y[i, list(ls)] = 1.0
    splits = list(splits) if splits is not None else _seeded_split(n, seed)
    tr = np.array([s == "train" for s in splits])
    va = np.array([s == "val" for s in splits])
    te = np.array([s == "test" for s in splits])
    if not tr.any() or not te.any():
        raise DegenerateSplitError("probe needs train and test nodes")
    if len({labels[i] for i in np.flatnonzero(tr)}) < 2:
        raise DegenerateSplitError("training nodes carry a single class")
    if not va.any():
        va = tr
    single = all(len(l) == 1 for l in labels)

    rng = np.random.default_rng(seed)
    W = nx.Tensor(rng.normal(0.0, 0.01, (X.shape[1], C)), requires_grad=True, name="probe.w")
    b = nx.Tensor(np.zeros(C), requires_grad=True, name="probe.b")
    cfg = TrainConfig(lr=lr, weight_decay=0.0, clip_norm=None)
    state = OptimizerState()
    Xtr, Ytr = nx.Tensor(X[tr]), Y[tr]
    best = (math.inf, W.data.copy(), b.data.copy(), 0)
    bad = 0
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        loss = nx.mean(nx.tsum(nx.bce_terms(nx.linear(Xtr, W, b), Ytr), axis=1))
        nx.backward(loss)
        adamw_step({"w": W, "b": b}, state, cfg)
        z = X[va] @ W.data + b.data
        val_loss = float(np.mean(np.sum(np.maximum(z, 0) - Y[va] * z + np.log1p(np.exp(-np.abs(z))), axis=1)))
        if val_loss < best[0] - 1e-12:
            best, bad = (val_loss, W.data.copy(), b.data.copy(), epoch), 0
        else:
            bad += 1
            if bad >= patience:
                break
    z_te = X[te] @ best[1] + best[2]
    if single:
        gold = np.array([labels[i][0] for i in np.flatnonzero(te)])
        pred = z_te.argmax(axis=1)
        macro, micro, per = f1_scores(pred, gold, C)
        precision = float(np.mean(pred == gold))
        per_class = {"f1": per}
    else:
        macro, micro, precision = multilabel_f1(z_te > 0.0, Y[te] > 0.5)
        per_class = None
    return MetricReport(
        "probe",
        {"macro_f1": macro, "micro_f1": micro, "precision": precision},
        int(te.sum()),
        per_class,
        {"best_epoch": best[3], "epochs_run": epoch, "val_loss": best[0]},
    )
