"""Wall time of node encoding as the ego size N and the text length P grow."""

import argparse
import time

import numpy as np

from edgeformers import numerics as nx
from edgeformers.config import TrainConfig, init_params
from edgeformers.node_encoder import EgoBatch, encode_node


def ego_of(rng, N, P, vocab, nodes):
    ids = rng.integers(3, vocab, size=(N, P))
    ids[:, 0] = 1
    return EgoBatch(0, tuple(range(N)), rng.integers(0, nodes, N), ids, np.ones((N, P), bool))


def timed(params, ego, runs):
    encode_node(params, ego)
    t0 = time.perf_counter()
    for _ in range(runs):
        encode_node(params, ego)
    return (time.perf_counter() - t0) / runs


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--runs", type=int, default=20)
    ap.add_argument("--sizes", type=int, nargs="+", default=[1, 2, 4, 8, 16, 32])
    ap.add_argument("--lengths", type=int, nargs="+", default=[8, 16, 32, 64])
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    with nx.no_grad():
        cfg = TrainConfig.desk(max_seq_len=max(args.lengths))
        params = init_params(cfg.model_config(200, 40, node_level=True), np.random.default_rng(0))
        print("N    P    ms")
        for N in args.sizes:
            t = timed(params, ego_of(rng, N, 32, 200, 40), args.runs)
            print(f"{N:<4d} {32:<4d} {t * 1e3:.2f}")
        for P in args.lengths:
            t = timed(params, ego_of(rng, 8, P, 200, 40), args.runs)
            print(f"{8:<4d} {P:<4d} {t * 1e3:.2f}")


if __name__ == "__main__":
    main()
