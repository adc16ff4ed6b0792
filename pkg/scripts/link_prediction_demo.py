"""Train the node encoder on a planted-affinity network; compare in-batch MRR with chance."""

import argparse
import json

import numpy as np

from edgeformers.config import TrainConfig, init_params
from edgeformers.evaluation import random_in_batch_mrr
from edgeformers.graph import TokenCache, build_vocab
from edgeformers.synth import SynthSpec, synth_generate
from edgeformers.training import in_batch_validation, train_node_task, validation_batches


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--nodes", type=int, default=60)
    ap.add_argument("--edges-per-node", type=float, default=6.0)
    ap.add_argument("--affinity", type=float, default=300.0)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--aggregation", choices=("attention", "mean"), default="attention")
    args = ap.parse_args()

    spec = SynthSpec(node_counts={"node": args.nodes}, edges_per_node=args.edges_per_node,
                     label_rule="planted-affinity", communities=2, p_in=0.98, affinity=args.affinity,
                     words_per_edge=10, topic_words=30, split_fractions=(0.7, 0.15, 0.15))
    net, _ = synth_generate(args.seed, spec)
    cfg = TrainConfig.desk(hidden=32, heads=4, node_dim=16, layers=2, max_seq_len=16, epochs=args.epochs,
                           patience=10, node_batch_size=25, default_cap=8, lr=2e-3, seed=args.seed,
                           aggregation=args.aggregation)
    vocab = build_vocab(net, cfg.vocab_max_size)
    cache = TokenCache(net, vocab, cfg.max_seq_len)
    params = init_params(cfg.model_config(len(vocab), net.num_nodes, node_level=True),
                         np.random.default_rng(args.seed))
    res = train_node_task(net, params, cfg, cache, log=lambda row: print(json.dumps(row)))

    for split in ("val", "test"):
        edges = net.edges_in(split)
        keys = [[net.edges[e].v for e in b] for b in validation_batches(edges, cfg.node_batch_size, cfg.seed)]
        chance = random_in_batch_mrr(keys, 2000, 0)
        mrr, n = in_batch_validation(res.params, net, cache, cfg, edges, cfg.seed)
        print(f"{split:4s} in-batch MRR {mrr:.3f} over {n} edges; chance {chance:.3f} ({mrr / chance:.2f}x)")


if __name__ == "__main__":
    main()
