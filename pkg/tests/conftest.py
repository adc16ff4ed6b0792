import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from edgeformers.config import ModelConfig, VirtualTokens, init_params  # noqa: E402
from edgeformers.graph import TokenSequence  # noqa: E402


def tiny_params(seed=0, *, hidden=8, heads=2, layers=2, node_dim=4, vocab=12, nodes=6, max_seq_len=6,
                node_level=False, num_labels=0, std=0.5, tokens=VirtualTokens(), aggregation="attention",
                readout="cls"):
    """Small model with a wide init so attention is far from uniform."""
    cfg = ModelConfig(vocab_size=vocab, num_nodes=nodes, hidden=hidden, heads=heads, node_dim=node_dim,
                      layers=layers, max_seq_len=max_seq_len, init_std=std, node_level=node_level,
                      num_labels=num_labels, tokens=tokens, aggregation=aggregation, readout=readout)
    params = init_params(cfg, np.random.default_rng(seed))
    # non-trivial biases and gains so bias/gain gradients are exercised
    rng = np.random.default_rng(seed + 1000)
    for name, t in params.tensors.items():
        last = name.rsplit(".", 1)[-1]
        if last == "g" or last.startswith("b"):
            t.data = t.data + rng.normal(0.0, 0.1, t.shape)
    return params


def random_sequence(rng, length, max_seq_len, vocab):
    ids = np.zeros(max_seq_len, dtype=np.int64)
    ids[0] = 1
    ids[1:length] = rng.integers(3, vocab, size=length - 1)
    mask = np.zeros(max_seq_len, dtype=bool)
    mask[:length] = True
    return TokenSequence(ids, mask)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
