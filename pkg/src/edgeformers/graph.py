"""Textual-edge networks: storage, JSON-lines I/O, vocabulary, tokenisation, sampling."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

SPLITS = ("train", "val", "test")
PAD, CLS, UNK = "[PAD]", "[CLS]", "[UNK]"
PAD_ID, CLS_ID, UNK_ID = 0, 1, 2

_TOKEN_RE = re.compile(r"[^\W_]+")


class GraphFormatError(ValueError):
    """A line of an edge or node file violates the schema."""


class GraphReferenceError(ValueError):
    """An edge names a node or document that does not exist."""


class UnknownNodeError(KeyError):
    pass


@dataclass(frozen=True)
class Node:
    id: str
    type: str = "node"
    labels: tuple[int, ...] = ()


@dataclass(frozen=True)
class Edge:
    u: str
    v: str
    doc: str
    label: int | None = None
    split: str = "train"


@dataclass
class TextualEdgeNetwork:
    nodes: dict[str, Node]
    edges: list[Edge]
    documents: dict[str, str]
    _incident: dict[str, list[int]] = field(init=False, repr=False)
    _split_cache: dict = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        self._incident = {nid: [] for nid in self.nodes}
        for i, e in enumerate(self.edges):
            for end in (e.u, e.v):
                if end not in self.nodes:
                    raise GraphReferenceError(f"edge {i} references unknown node {end!r}")
            if e.doc not in self.documents:
                raise GraphReferenceError(f"edge {i} references unknown document {e.doc!r}")
            if e.split not in SPLITS:
                raise GraphFormatError(f"edge {i} has unknown split {e.split!r}")
            self._incident[e.u].append(i)
            if e.v != e.u:
                self._incident[e.v].append(i)
        self.node_ids = list(self.nodes)
        self.node_index = {nid: k for k, nid in enumerate(self.node_ids)}

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def text(self, edge_idx: int) -> str:
        return self.documents[self.edges[edge_idx].doc]

    def edges_in(self, split: str) -> list[int]:
        return [i for i, e in enumerate(self.edges) if e.split == split]

    def incident(self, v: str, splits: Iterable[str] | None = None) -> list[int]:
        """Edge indices touching ``v`` in stored order, optionally restricted to ``splits``."""
        if v not in self._incident:
            raise UnknownNodeError(v)
        if splits is None:
            return self._incident[v]
        key = (v, tuple(sorted(splits)))
        hit = self._split_cache.get(key)
        if hit is None:
            allowed = set(splits)
            hit = [i for i in self._incident[v] if self.edges[i].split in allowed]
            self._split_cache[key] = hit
        return hit

    def other_end(self, edge_idx: int, v: str) -> str:
        e = self.edges[edge_idx]
        return e.v if e.u == v else e.u

    def neighbors(self, v: str) -> set[str]:
        return {self.other_end(i, v) for i in self.incident(v)}

    def node_types(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for n in self.nodes.values():
            out.setdefault(n.type, []).append(n.id)
        return out

    def num_labels(self) -> int:
        labels = [e.label for e in self.edges if e.label is not None]
        return max(labels) + 1 if labels else 0


# ---------------------------------------------------------------------------
# file formats

_EDGE_KEYS = {"u", "v", "text", "label", "split", "u_type", "v_type"}


def _parse_edge(obj, lineno: int) -> dict:
    if not isinstance(obj, dict):
        raise GraphFormatError(f"line {lineno}: expected a JSON object")
    for key, kind in (("u", str), ("v", str), ("text", str)):
        if key not in obj:
            raise GraphFormatError(f"line {lineno}: missing required field {key!r}")
        if not isinstance(obj[key], kind):
            raise GraphFormatError(f"line {lineno}: field {key!r} must be a string")
    extra = set(obj) - _EDGE_KEYS
    if extra:
        raise GraphFormatError(f"line {lineno}: unknown field(s) {sorted(extra)}")
    label = obj.get("label")
    if label is not None and (not isinstance(label, int) or isinstance(label, bool) or label < 0):
        raise GraphFormatError(f"line {lineno}: field 'label' must be an integer >= 0")
    split = obj.get("split", "train")
    if split not in SPLITS:
        raise GraphFormatError(f"line {lineno}: unknown split {split!r}")
    for key in ("u_type", "v_type"):
        if key in obj and not isinstance(obj[key], str):
            raise GraphFormatError(f"line {lineno}: field {key!r} must be a string")
    return obj


def load_nodes(path: str | Path) -> dict[str, Node]:
    """Node sidecar: one object per line with "id" and optional "type", "labels"."""
    nodes: dict[str, Node] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or not isinstance(obj.get("id"), str):
                raise GraphFormatError(f"line {lineno}: missing required field 'id'")
            labels = obj.get("labels", [])
            if not isinstance(labels, list) or not all(isinstance(x, int) and x >= 0 for x in labels):
                raise GraphFormatError(f"line {lineno}: 'labels' must be a list of integers >= 0")
            nodes[obj["id"]] = Node(obj["id"], str(obj.get("type", "node")), tuple(labels))
    return nodes


def load_jsonl(path: str | Path, nodes_path: str | Path | None = None) -> TextualEdgeNetwork:
    """Read an edge file; with ``nodes_path`` every endpoint must appear in the node sidecar."""
    known = load_nodes(nodes_path) if nodes_path is not None else None
    nodes: dict[str, Node] = dict(known) if known is not None else {}
    edges: list[Edge] = []
    documents: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            obj = _parse_edge(obj, lineno)
            for end, tkey in (("u", "u_type"), ("v", "v_type")):
                nid = obj[end]
                ntype = obj.get(tkey)
                if known is not None:
                    if nid not in known:
                        raise GraphReferenceError(f"line {lineno}: endpoint {nid!r} not in node file")
                    if ntype is not None and known[nid].type != ntype:
                        raise GraphFormatError(f"line {lineno}: node {nid!r} has type {known[nid].type!r}")
                    continue
                prev = nodes.get(nid)
                if prev is None:
                    nodes[nid] = Node(nid, ntype or "node")
                elif ntype is not None and prev.type != ntype:
                    raise GraphFormatError(f"line {lineno}: node {nid!r} typed both {prev.type!r} and {ntype!r}")
            doc = f"d{len(edges)}"
            documents[doc] = obj["text"]
            edges.append(Edge(obj["u"], obj["v"], doc, obj.get("label"), obj.get("split", "train")))
    return TextualEdgeNetwork(nodes, edges, documents)


def save_jsonl(network: TextualEdgeNetwork, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in network.edges:
            obj = {
                "u": e.u,
                "v": e.v,
                "text": network.documents[e.doc],
                "split": e.split,
                "u_type": network.nodes[e.u].type,
                "v_type": network.nodes[e.v].type,
            }
            if e.label is not None:
                obj["label"] = e.label
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# vocabulary and tokenisation


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    tokens: list[str]

    def __post_init__(self):
        if self.tokens[:3] != [PAD, CLS, UNK]:
            raise ValueError("vocabulary must begin with [PAD], [CLS], [UNK]")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(network: TextualEdgeNetwork, max_size: int) -> Vocabulary:
    """Most frequent words first, ties in lexicographic order, after the reserved ids."""
    if max_size < 3:
        raise ValueError("max_size must be at least 3")
    counts = Counter()
    for text in network.documents.values():
        counts.update(split_words(text))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([PAD, CLS, UNK] + [w for w, _ in ranked[: max_size - 3]])


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    mask: np.ndarray

    @property
    def length(self) -> int:
        return int(self.mask.sum())


def tokenize(vocab: Vocabulary, text: str, max_seq_len: int) -> TokenSequence:
    if max_seq_len < 2:
        raise ValueError("max_seq_len must be at least 2")
    words = split_words(text)[: max_seq_len - 1]
    ids = np.full(max_seq_len, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    ids[1 : 1 + len(words)] = [vocab.id(w) for w in words]
    mask = np.zeros(max_seq_len, dtype=bool)
    mask[: 1 + len(words)] = True
    return TokenSequence(ids, mask)


class TokenCache:
    """Tokenised documents of a network, computed once per edge."""

    def __init__(self, network: TextualEdgeNetwork, vocab: Vocabulary, max_seq_len: int):
        self.ids = np.full((len(network.edges), max_seq_len), PAD_ID, dtype=np.int64)
        self.mask = np.zeros((len(network.edges), max_seq_len), dtype=bool)
        for i in range(len(network.edges)):
            seq = tokenize(vocab, network.text(i), max_seq_len)
            self.ids[i] = seq.ids
            self.mask[i] = seq.mask


# ---------------------------------------------------------------------------
# sampling


def neighbor_edges(
    network: TextualEdgeNetwork,
    v: str,
    cap: int,
    rng: np.random.Generator,
    *,
    splits: Iterable[str] | None = ("train",),
    exclude: Iterable[int] = (),
) -> list[int]:
    """Indices of at most ``cap`` edges incident to ``v``.

    Under capacity every edge is returned in stored order; otherwise a uniform
    sample without replacement, still listed in stored order.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    pool = network.incident(v, splits)
    skip = set(exclude)
    if skip:
        pool = [i for i in pool if i not in skip]
    if len(pool) <= cap:
        return list(pool)
    picked = np.sort(rng.choice(len(pool), size=cap, replace=False))
    return [pool[k] for k in picked]
