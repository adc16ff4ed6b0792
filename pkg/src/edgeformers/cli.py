"""Command-line interface.

Exit codes: 0 success, 1 input error, 2 synth spec error, 3 numerical
failure, 4 checkpoint mismatch.  Outputs are deterministic given the inputs
and seeds; logs carry no timestamps.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint, CheckpointMismatchError, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig, init_params
from .edge_encoder import encode_edge_batch
from .evaluation import (
    DegenerateSplitError,
    EmptySplitError,
    MetricReport,
    eval_link_prediction,
    f1_scores,
    logistic_probe,
    node_embeddings,
)
from .graph import (
    GraphFormatError,
    GraphReferenceError,
    TextualEdgeNetwork,
    TokenCache,
    build_vocab,
    load_jsonl,
    save_jsonl,
)
from .synth import SpecError, SynthSpec, synth_generate, write_truth
from .training import DataError, NumericalError, predict_edges, train_edge_task, train_node_task

EXIT_OK, EXIT_INPUT, EXIT_SPEC, EXIT_NUMERIC, EXIT_MISMATCH = 0, 1, 2, 3, 4

_MODEL_FIELDS = ("hidden", "heads", "node_dim", "layers", "max_seq_len", "use_node_i", "use_node_j",
                 "use_context", "aggregation", "readout")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_graph(args) -> TextualEdgeNetwork:
    try:
        return load_jsonl(args.graph, getattr(args, "node_file", None))
    except FileNotFoundError as exc:
        raise CliError(f"cannot read {exc.filename}", EXIT_INPUT) from None
    except (GraphFormatError, GraphReferenceError) as exc:
        raise CliError(f"bad graph: {exc}", EXIT_INPUT) from None


def _load_config(path) -> TrainConfig:
    if path is None:
        return TrainConfig.desk()
    try:
        return TrainConfig.load(path)
    except FileNotFoundError:
        raise CliError(f"cannot read config {path}", EXIT_INPUT) from None
    except (ConfigError, TypeError) as exc:
        raise CliError(f"bad config: {exc}", EXIT_INPUT) from None


def _load_ckpt(path, network=None) -> Checkpoint:
    ckpt = load_checkpoint(path)
    if network is not None:
        ckpt.align_to(network)
    return ckpt


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    try:
        obj = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"cannot read spec {args.spec}", EXIT_SPEC) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"spec is not valid JSON: {exc.msg}", EXIT_SPEC) from None
    try:
        if not isinstance(obj, dict):
            raise SpecError("spec must be a JSON object")
        network, truth = synth_generate(args.seed, SynthSpec.from_dict(obj))
    except (SpecError, TypeError) as exc:
        raise CliError(f"infeasible spec: {exc}", EXIT_SPEC) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_jsonl(network, out / "edges.jsonl")
    write_truth(network, truth, out / "nodes.jsonl")
    print(f"wrote {len(network.edges)} edges and {network.num_nodes} nodes to {out}")
    return EXIT_OK


def _train(args, task: str) -> int:
    network = _load_graph(args)
    if args.resume:
        ckpt = _load_ckpt(args.resume, network)
        if ckpt.task != task:
            raise CliError(f"checkpoint was trained for {ckpt.task!r}, not {task!r}", EXIT_MISMATCH)
        config = _load_config(args.config) if args.config else ckpt.train_config
        clash = [k for k in _MODEL_FIELDS if getattr(config, k) != getattr(ckpt.train_config, k)]
        if clash:
            raise CliError(f"config disagrees with checkpoint on model fields {clash}", EXIT_MISMATCH)
        params, vocab, optimizer, start_epoch = ckpt.params, ckpt.vocab, ckpt.optimizer, ckpt.epoch
        if task == "edge" and params.config.num_labels < network.num_labels():
            raise CliError("graph has more labels than the checkpoint's classifier head", EXIT_MISMATCH)
    else:
        config = _load_config(args.config)
        vocab = build_vocab(network, config.vocab_max_size)
        num_labels = network.num_labels() if task == "edge" else 0
        if task == "edge" and num_labels == 0:
            raise CliError("train-edge requires a 'label' field on the train edges", EXIT_INPUT)
        try:
            mcfg = config.model_config(len(vocab), network.num_nodes, node_level=task == "node", num_labels=num_labels)
        except ConfigError as exc:
            raise CliError(f"bad config: {exc}", EXIT_INPUT) from None
        params = init_params(mcfg, np.random.default_rng(config.seed))
        optimizer, start_epoch = None, 0

    cache = TokenCache(network, vocab, config.max_seq_len)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    loop = train_edge_task if task == "edge" else train_node_task
    try:
        result = loop(network, params, config, cache, optimizer=optimizer, log=rows.append, start_epoch=start_epoch)
    except DataError as exc:
        raise CliError(str(exc), EXIT_INPUT) from None
    except NumericalError as exc:
        _write_jsonl(out / "log.jsonl", rows)
        raise CliError(str(exc), EXIT_NUMERIC) from None
    _write_jsonl(out / "log.jsonl", rows)
    last_epoch = rows[-1]["epoch"] if rows else start_epoch
    save_checkpoint(Checkpoint(result.params, config, vocab, list(network.node_ids), task, last_epoch,
                               result.optimizer), out / "checkpoint")
    (out / "report.json").write_text(result.report.to_json() + "\n", encoding="utf-8")
    print(result.report.to_json())
    return EXIT_OK


def cmd_train_edge(args) -> int:
    return _train(args, "edge")


def cmd_train_node(args) -> int:
    return _train(args, "node")


def _read_embeddings(path, network) -> np.ndarray:
    vecs: dict[str, list[float]] = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if line.strip():
                    obj = json.loads(line)
                    vecs[str(obj["id"])] = obj["vector"]
    except FileNotFoundError:
        raise CliError(f"cannot read embeddings {path}", EXIT_INPUT) from None
    except (json.JSONDecodeError, KeyError, TypeError):
        raise CliError(f"embeddings line {lineno}: expected {{\"id\": ..., \"vector\": [...]}}", EXIT_INPUT) from None
    missing = [n for n in network.node_ids if n not in vecs]
    if missing:
        raise CliError(f"no embedding for node {missing[0]!r}", EXIT_INPUT)
    return np.array([vecs[n] for n in network.node_ids], dtype=np.float64)


def cmd_eval(args) -> int:
    network = _load_graph(args)
    if args.task == "probe" and args.embeddings and not args.checkpoint:
        X = _read_embeddings(args.embeddings, network)
        ckpt = None
    else:
        if not args.checkpoint:
            raise CliError("--checkpoint is required", EXIT_INPUT)
        ckpt = _load_ckpt(args.checkpoint, network)
    if ckpt is not None:
        cache = TokenCache(network, ckpt.vocab, ckpt.params.config.max_seq_len)

    if args.task == "edge":
        if ckpt.params.config.num_labels == 0:
            raise CliError("checkpoint has no classifier head; train it with train-edge", EXIT_INPUT)
        edges = [e for e in network.edges_in(args.split) if network.edges[e].label is not None]
        if not edges:
            raise CliError(f"split {args.split!r} has no labelled edges", EXIT_INPUT)
        logits = predict_edges(ckpt.params, network, cache, edges)
        gold = [network.edges[e].label for e in edges]
        macro, micro, per = f1_scores(logits.argmax(axis=1), gold, ckpt.params.config.num_labels)
        report = MetricReport("edge", {"macro_f1": macro, "micro_f1": micro}, len(edges), {"f1": per},
                              {"split": args.split})
    elif args.task == "link":
        try:
            report = eval_link_prediction(ckpt.params, network, cache, ckpt.train_config, args.split,
                                          K=args.negatives, seed=args.seed)
        except EmptySplitError as exc:
            raise CliError(str(exc), EXIT_INPUT) from None
        except ValueError as exc:
            raise CliError(str(exc), EXIT_INPUT) from None
    else:
        if args.embeddings:
            X = _read_embeddings(args.embeddings, network)
        elif ckpt is not None:
            X = node_embeddings(ckpt.params, network, cache, ckpt.train_config, np.random.default_rng(args.seed))
        labels = [network.nodes[n].labels for n in network.node_ids]
        if not any(labels):
            raise CliError("probe needs node labels; pass the node file with --node-file", EXIT_INPUT)
        keep = [k for k, l in enumerate(labels) if l]
        try:
            report = logistic_probe(X[keep], [labels[k] for k in keep], seed=args.seed)
        except DegenerateSplitError as exc:
            raise CliError(str(exc), EXIT_INPUT) from None
    print(report.to_json())
    return EXIT_OK


def cmd_embed(args) -> int:
    network = _load_graph(args)
    ckpt = _load_ckpt(args.checkpoint, network)
    cache = TokenCache(network, ckpt.vocab, ckpt.params.config.max_seq_len)
    if args.edges:
        edges = list(range(len(network.edges)))
        idx = network.node_index
        out = []
        with nx.no_grad():
            for s in range(0, len(edges), 100):
                sel = np.asarray(edges[s : s + 100])
                ri = [idx[network.edges[e].u] for e in sel]
                rj = [idx[network.edges[e].v] for e in sel]
                out.append(encode_edge_batch(ckpt.params, cache.ids[sel], cache.mask[sel], ri, rj).data)
        vecs = np.concatenate(out) if out else np.zeros((0, ckpt.params.config.hidden))
        ids = [network.edges[e].doc for e in edges]
    else:
        vecs = node_embeddings(ckpt.params, network, cache, ckpt.train_config, np.random.default_rng(args.seed))
        ids = list(network.node_ids)
    _write_jsonl(Path(args.out), ({"id": i, "vector": v.tolist()} for i, v in zip(ids, vecs)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgeformers", description="Transformers on textual-edge networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic textual-edge network")
    p.add_argument("--spec", required=True, help="JSON file with SynthSpec fields")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory (edges.jsonl, nodes.jsonl)")
    p.set_defaults(fn=cmd_synth)

    for name, fn, what in (("train-edge", cmd_train_edge, "edge classification"),
                           ("train-node", cmd_train_node, "link prediction")):
        p = sub.add_parser(name, help=f"train on {what}")
        p.add_argument("--graph", required=True)
        p.add_argument("--node-file", help="optional node sidecar (id, type, labels)")
        p.add_argument("--config", help="flat JSON of TrainConfig fields; desk defaults when absent")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--resume", help="checkpoint directory to continue from")
        p.set_defaults(fn=fn)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--graph", required=True)
    p.add_argument("--node-file")
    p.add_argument("--checkpoint")
    p.add_argument("--task", required=True, choices=("edge", "link", "probe"))
    p.add_argument("--split", default="test")
    p.add_argument("--negatives", type=int, default=99)
    p.add_argument("--embeddings", help="probe: node vectors written by `embed --nodes`")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("embed", help="export node or edge vectors as JSON lines")
    p.add_argument("--graph", required=True)
    p.add_argument("--node-file")
    p.add_argument("--checkpoint", required=True)
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--nodes", action="store_true")
    which.add_argument("--edges", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_embed)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except CheckpointMismatchError as exc:
        print(f"error: checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
