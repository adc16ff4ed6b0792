"""Seeded generators of small textual-edge networks with planted signal.

``keyword-sentiment``
    Each edge gets a label from ``label_weights`` and one keyword of that label
    is inserted into otherwise random filler text, so text alone determines the
    label.

``planted-affinity``
    Every node has a community and an angle on a ring.  An edge is
    intra-community with probability ``p_in``; intra partners are drawn with
    weight ``exp(affinity * cos(angle difference))``.  Edge text mixes filler
    with community topic words indexed by ring position, so both structure and
    text predict links.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .graph import Edge, Node, TextualEdgeNetwork

RULES = ("keyword-sentiment", "planted-affinity")


class SpecError(ValueError):
    pass


@dataclass
class SynthSpec:
    node_counts: dict[str, int] = field(default_factory=lambda: {"user": 25, "item": 25})
    edges_per_node: float = 4.0
    num_edges: int | None = None
    label_rule: str = "keyword-sentiment"
    vocab_size: int = 200
    words_per_edge: int = 12
    num_labels: int = 3
    label_weights: list[float] | None = None
    communities: int = 2
    p_in: float = 0.9
    affinity: float = 4.0
    topic_words: int = 12
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise SpecError(f"unknown synth spec key(s): {sorted(unknown)}")
        obj = dict(obj)
        if "split_fractions" in obj:
            obj["split_fractions"] = tuple(obj["split_fractions"])
        return cls(**obj)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d

    def total_edges(self) -> int:
        if self.num_edges is not None:
            return int(self.num_edges)
        return int(round(self.edges_per_node * sum(self.node_counts.values()) / 2))


@dataclass
class GroundTruth:
    rule: str
    community: dict[str, int]
    angle: dict[str, float]
    keyword: list[str | None]
    intra: list[bool | None]


def _validate(spec: SynthSpec) -> None:
    if spec.label_rule not in RULES:
        raise SpecError(f"label_rule must be one of {RULES}, got {spec.label_rule!r}")
    if not 1 <= len(spec.node_counts) <= 2:
        raise SpecError("node_counts must name one type (homogeneous) or two types (bipartite)")
    if any(n < 1 for n in spec.node_counts.values()):
        raise SpecError("every node type needs at least one node")
    if spec.vocab_size < 1 or spec.words_per_edge < 1:
        raise SpecError("vocab_size and words_per_edge must be positive")
    fr = spec.split_fractions
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise SpecError("split_fractions must be three non-negative numbers summing to 1")
    if spec.label_rule == "keyword-sentiment":
        if spec.num_labels < 1:
            raise SpecError("num_labels must be >= 1")
        if spec.label_weights is not None:
            w = spec.label_weights
            if len(w) != spec.num_labels or any(x < 0 for x in w) or sum(w) <= 0:
                raise SpecError("label_weights must give one non-negative weight per label")
    else:
        if spec.communities < 1 or not 0.0 <= spec.p_in <= 1.0 or spec.topic_words < 1:
            raise SpecError("planted-affinity needs communities >= 1, 0 <= p_in <= 1, topic_words >= 1")


def _pairs(ids_by_type: list[list[str]]) -> list[tuple[str, str]]:
    if len(ids_by_type) == 1:
        ids = ids_by_type[0]
        return [(ids[a], ids[b]) for a in range(len(ids)) for b in range(a + 1, len(ids))]
    left, right = ids_by_type
    return [(a, b) for a in left for b in right]


def _filler(rng: np.random.Generator, spec: SynthSpec, n: int) -> list[str]:
    ranks = np.arange(1, spec.vocab_size + 1)
    p = 1.0 / ranks
    p /= p.sum()
    return [f"w{k}" for k in rng.choice(spec.vocab_size, size=n, p=p)]


def _topic_index(angle: float, count: int) -> int:
    return int(angle / (2 * math.pi) * count) % count


def synth_generate(seed: int, spec: SynthSpec) -> tuple[TextualEdgeNetwork, GroundTruth]:
    _validate(spec)
    rng = np.random.default_rng(seed)
    types = list(spec.node_counts)
    ids_by_type = [[f"{t}{k}" for k in range(spec.node_counts[t])] for t in types]
    pairs = _pairs(ids_by_type)
    total = spec.total_edges()
    if total < 1:
        raise SpecError("the spec yields no edges")
    if total > len(pairs):
        raise SpecError(f"num_edges={total} exceeds the {len(pairs)} distinct node pairs available")

    community: dict[str, int] = {}
    angle: dict[str, float] = {}
    if spec.label_rule == "planted-affinity":
        for ids in ids_by_type:
            comm = rng.permutation(np.arange(len(ids)) % spec.communities)
            for c in range(spec.communities):
                members = [nid for nid, cc in zip(ids, comm) if cc == c]
                # evenly spaced ring slots in random order, so no two members clump
                slots = rng.permutation(len(members))
                offset = rng.uniform(0.0, 2 * math.pi)
                for nid, k in zip(members, slots):
                    community[nid] = c
                    angle[nid] = float((offset + 2 * math.pi * k / len(members)) % (2 * math.pi))

    keyword: list[str | None] = []
    intra: list[bool | None] = []
    labels: list[int | None] = []
    texts: list[str] = []

    if spec.label_rule == "keyword-sentiment":
        chosen = rng.choice(len(pairs), size=total, replace=False)
        edge_pairs = [pairs[k] for k in chosen]
        w = np.ones(spec.num_labels) if spec.label_weights is None else np.asarray(spec.label_weights, float)
        drawn = rng.choice(spec.num_labels, size=total, p=w / w.sum())
        for y in drawn:
            words = _filler(rng, spec, spec.words_per_edge)
            kw = f"sent{int(y)}{'ab'[int(rng.integers(2))]}"
            words.insert(int(rng.integers(len(words) + 1)), kw)
            texts.append(" ".join(words))
            labels.append(int(y))
            keyword.append(kw)
            intra.append(None)
    else:
        is_intra = np.array([community[a] == community[b] for a, b in pairs])
        intra_idx = np.flatnonzero(is_intra)
        inter_idx = np.flatnonzero(~is_intra)
        n_intra = int(rng.binomial(total, spec.p_in))
        n_intra = min(max(n_intra, total - len(inter_idx)), len(intra_idx))
        weights = np.array([math.exp(spec.affinity * math.cos(angle[pairs[k][0]] - angle[pairs[k][1]]))
                            for k in intra_idx])
        take_intra = rng.choice(intra_idx, size=n_intra, replace=False, p=weights / weights.sum()) \
            if n_intra else np.array([], dtype=int)
        take_inter = rng.choice(inter_idx, size=total - n_intra, replace=False) \
            if total - n_intra else np.array([], dtype=int)
        chosen = np.concatenate([take_intra, take_inter]).astype(int)
        chosen = chosen[rng.permutation(len(chosen))]
        edge_pairs = [pairs[k] for k in chosen]
        half = max(1, spec.words_per_edge // 2)
        for a, b in edge_pairs:
            topical = []
            if community[a] == community[b]:
                mid = math.atan2(math.sin(angle[a]) + math.sin(angle[b]), math.cos(angle[a]) + math.cos(angle[b]))
                centers = [(community[a], mid % (2 * math.pi))] * half
            else:
                centers = [(community[a], angle[a]), (community[b], angle[b])] * ((half + 1) // 2)
                centers = centers[:half]
            for c, ang in centers:
                j = (_topic_index(ang, spec.topic_words) + int(rng.integers(-1, 2))) % spec.topic_words
                topical.append(f"c{c}t{j}")
            words = topical + _filler(rng, spec, spec.words_per_edge - half)
            words = [words[k] for k in rng.permutation(len(words))]
            texts.append(" ".join(words))
            labels.append(None)
            keyword.append(None)
            intra.append(community[a] == community[b])

    fr = spec.split_fractions
    n_train = int(round(fr[0] * total))
    n_val = int(round(fr[1] * total))
    order = rng.permutation(total)
    split = np.empty(total, dtype=object)
    split[order[:n_train]] = "train"
    split[order[n_train : n_train + n_val]] = "val"
    split[order[n_train + n_val :]] = "test"

    nodes = {}
    for t, ids in zip(types, ids_by_type):
        for nid in ids:
            lab = (community[nid],) if nid in community else ()
            nodes[nid] = Node(nid, t, lab)
    documents = {f"d{i}": texts[i] for i in range(total)}
    edges = [Edge(a, b, f"d{i}", labels[i], str(split[i])) for i, (a, b) in enumerate(edge_pairs)]
    network = TextualEdgeNetwork(nodes, edges, documents)
    return network, GroundTruth(spec.label_rule, community, angle, keyword, intra)


def write_truth(network: TextualEdgeNetwork, truth: GroundTruth, path: str | Path) -> None:
    """Node sidecar with planted latents; readable by :func:`graph.load_nodes`."""
    with open(path, "w", encoding="utf-8") as fh:
        for nid, node in network.nodes.items():
            obj = {"id": nid, "type": node.type, "labels": list(node.labels)}
            if nid in truth.community:
                obj["community"] = truth.community[nid]
                obj["angle"] = round(truth.angle[nid], 12)
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
