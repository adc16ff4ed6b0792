import math

import numpy as np
import pytest

import oracles
from conftest import tiny_params
from edgeformers import numerics as nx
from edgeformers.config import ConfigError, TrainConfig, init_params
from edgeformers.graph import TokenCache, build_vocab
from edgeformers.node_encoder import encode_nodes
from edgeformers.numerics import Tensor
from edgeformers.synth import SynthSpec, synth_generate
from edgeformers.training import (
    ClassifierHead,
    DataError,
    MissingGradientError,
    OptimizerState,
    adamw_step,
    clip_grad_norm,
    edge_classification_loss,
    encode_pairs,
    link_prediction_loss,
    pair_egos,
    train_edge_task,
    train_node_task,
)


def head(w, b):
    return ClassifierHead(Tensor(np.asarray(w, float), requires_grad=True), Tensor(np.asarray(b, float), requires_grad=True))


# ---------------------------------------------------------------- losses


def test_bce_uniform_sigmoid():
    h = Tensor(np.zeros((3, 4)))
    loss = edge_classification_loss(h, [0, 4, 2], head(np.zeros((4, 5)), np.zeros(5)))
    assert abs(loss.item() - 5 * math.log(2)) < 1e-12


def test_bce_perfect_prediction_limit():
    h = Tensor(np.eye(3))
    loss = edge_classification_loss(h, [0, 1, 2], head(80 * (2 * np.eye(3) - 1), np.zeros(3)))
    assert loss.item() < 1e-30


@pytest.mark.parametrize("seed", range(5))
def test_bce_matches_direct(seed):
    rng = np.random.default_rng(seed)
    h, w, b = rng.normal(size=(4, 6)), rng.normal(size=(6, 3)), rng.normal(size=3)
    labels = rng.integers(0, 3, 4)
    got = edge_classification_loss(Tensor(h), labels, head(w, b)).item()
    assert abs(got - oracles.bce_loss(h @ w + b, labels)) < 1e-9


def test_softmax_variant(rng):
    h, w, b = rng.normal(size=(4, 6)), rng.normal(size=(6, 3)), rng.normal(size=3)
    labels = np.array([0, 2, 1, 1])
    z = h @ w + b
    want = np.mean([-(z[i, labels[i]] - np.log(np.exp(z[i]).sum())) for i in range(4)])
    assert abs(edge_classification_loss(Tensor(h), labels, head(w, b), "softmax").item() - want) < 1e-12


def test_label_out_of_range():
    with pytest.raises(ValueError):
        edge_classification_loss(Tensor(np.zeros((1, 2))), [3], head(np.zeros((2, 3)), np.zeros(3)))


def test_loss_gradients_fd(rng):
    hq = Tensor(rng.normal(size=(5, 4)), requires_grad=True, name="hq")
    hk = Tensor(rng.normal(size=(5, 4)), requires_grad=True, name="hk")
    assert max(nx.check_gradients(lambda: link_prediction_loss(hq, hk), [hq, hk]).values()) < 1e-6
    hd = head(rng.normal(size=(4, 3)), rng.normal(size=3))
    hd.w.name, hd.b.name = "w", "b"
    for variant in ("bce", "softmax"):
        errs = nx.check_gradients(lambda: edge_classification_loss(hq, [0, 1, 2, 2, 0], hd, variant), [hq, hd.w, hd.b])
        assert max(errs.values()) < 1e-6


def test_link_loss_examples():
    hq = Tensor(np.array([[10.0], [-10.0]]))
    hk = Tensor(np.array([[1.0], [-1.0]]))
    assert abs(link_prediction_loss(hq, hk).item() - math.log1p(math.exp(-20))) < 1e-15
    for B in (2, 5, 25):
        same = Tensor(np.ones((B, 3)))
        assert abs(link_prediction_loss(same, same).item() - math.log(B)) < 1e-12
    with pytest.raises(ValueError):
        link_prediction_loss(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))))


@pytest.mark.parametrize("seed", range(5))
def test_link_loss_matches_direct(seed):
    rng = np.random.default_rng(seed)
    hq, hk = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    assert abs(link_prediction_loss(Tensor(hq), Tensor(hk)).item() - oracles.in_batch_loss(hq, hk)) < 1e-9


# ---------------------------------------------------------------- optimiser


def test_adamw_null_update():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    adamw_step({"p": p}, OptimizerState(), TrainConfig(lr=0.1, weight_decay=0.0))
    assert p.data.tolist() == [1.0, -2.0] and p.grad is None


def test_adamw_first_step_closed_form():
    p = Tensor(np.array([0.0]), requires_grad=True)
    p.grad = np.array([1.0])
    state = OptimizerState()
    adamw_step({"p": p}, state, TrainConfig(lr=0.1, weight_decay=0.0))
    assert abs(p.data[0] + 0.1) < 1e-8 and state.step == 1


def test_adamw_three_steps_on_quadratic_match_reference():
    cfg = TrainConfig(lr=0.05, weight_decay=0.01)
    target = np.array([1.0, -3.0, 0.5])
    x = Tensor(np.array([0.2, 0.1, -0.4]), requires_grad=True)
    state = OptimizerState()
    ref = x.data.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    for t in range(1, 4):
        nx.backward(nx.tsum(nx.mul(nx.sub(x, Tensor(target)), nx.sub(x, Tensor(target)))))
        adamw_step({"x": x}, state, cfg)
        g = 2 * (ref - target)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - cfg.lr * cfg.weight_decay * ref
        ref = ref - cfg.lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.max(np.abs(x.data - ref)) < 1e-12


def test_weight_decay_is_decoupled():
    p = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.array([0.0])
    adamw_step({"p": p}, OptimizerState(), TrainConfig(lr=0.1, weight_decay=0.5))
    assert abs(p.data[0] - 2.0 * (1 - 0.05)) < 1e-15


def test_missing_gradient_raises():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(MissingGradientError, match="'p'"):
        adamw_step({"p": p}, OptimizerState(), TrainConfig())


def test_clip_grad_norm():
    a, b = Tensor(np.zeros(2), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm({"a": a, "b": b}, 1.0) == 5.0
    assert abs(math.sqrt((a.grad**2).sum() + (b.grad**2).sum()) - 1.0) < 1e-12


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({"learning_rate": 1e-3})
    assert TrainConfig().lr == 1e-5 and TrainConfig.desk().lr == 1e-3


# ---------------------------------------------------------------- loops


def small_edge_setup(seed=0, **cfg_kw):
    net, _ = synth_generate(seed, SynthSpec(node_counts={"user": 10, "item": 10}, num_edges=60, vocab_size=30,
                                            words_per_edge=5))
    cfg = TrainConfig.desk(**{**dict(hidden=16, heads=2, node_dim=4, layers=2, max_seq_len=8, epochs=3), **cfg_kw})
    vocab = build_vocab(net, cfg.vocab_max_size)
    cache = TokenCache(net, vocab, cfg.max_seq_len)
    params = init_params(cfg.model_config(len(vocab), net.num_nodes, node_level=False, num_labels=3),
                         np.random.default_rng(cfg.seed))
    return net, cfg, cache, params


def test_edge_training_is_deterministic():
    runs = []
    for _ in range(2):
        net, cfg, cache, params = small_edge_setup()
        res = train_edge_task(net, params, cfg, cache)
        runs.append((res.history, params["L1.node_map"].data.tobytes()))
    assert runs[0] == runs[1]


def test_early_stopping_restores_best():
    net, cfg, cache, params = small_edge_setup(epochs=12, patience=2)
    res = train_edge_task(net, params, cfg, cache)
    best = max(r["val_micro_f1"] for r in res.history)
    assert res.report.metrics["val_micro_f1"] == best
    from edgeformers.training import edge_scores

    assert edge_scores(params, net, cache, net.edges_in("val"))["micro_f1"] == best


def test_edge_task_needs_labels():
    net, _ = synth_generate(0, SynthSpec(node_counts={"node": 20}, num_edges=40, label_rule="planted-affinity"))
    cfg = TrainConfig.desk(hidden=8, heads=2, node_dim=4, layers=2, max_seq_len=8, epochs=1)
    vocab = build_vocab(net, 50)
    p = init_params(cfg.model_config(len(vocab), net.num_nodes, node_level=False, num_labels=2),
                    np.random.default_rng(0))
    with pytest.raises(DataError, match="labelled"):
        train_edge_task(net, p, cfg, TokenCache(net, vocab, 8))


def small_node_setup(seed=0, **kw):
    spec = SynthSpec(node_counts={"node": 30}, edges_per_node=4, label_rule="planted-affinity",
                     split_fractions=(0.7, 0.15, 0.15))
    net, _ = synth_generate(seed, spec)
    cfg = TrainConfig.desk(hidden=8, heads=2, node_dim=4, layers=2, max_seq_len=8, epochs=2, node_batch_size=10,
                           default_cap=3, **kw)
    vocab = build_vocab(net, cfg.vocab_max_size)
    cache = TokenCache(net, vocab, cfg.max_seq_len)
    params = init_params(cfg.model_config(len(vocab), net.num_nodes, node_level=True), np.random.default_rng(0))
    return net, cfg, cache, params


def test_node_training_deterministic_and_steps_monotone():
    runs = []
    for _ in range(2):
        net, cfg, cache, params = small_node_setup()
        res = train_node_task(net, params, cfg, cache)
        runs.append(res.history)
    assert runs[0] == runs[1]
    steps = [r["step"] for r in runs[0]]
    assert steps == sorted(steps) and steps[0] > 0


def test_identical_pairs_give_ln_b():
    net, cfg, cache, params = small_node_setup()
    e = net.edges_in("train")[0]
    q, k = pair_egos(net, cache, cfg, [e], np.random.default_rng(0))
    B = 6
    out = encode_nodes(params, q * B + k * B).h_nodes
    loss = link_prediction_loss(nx.take(out, slice(0, B)), nx.take(out, slice(B, 2 * B)))
    assert abs(loss.item() - math.log(B)) < 1e-12


def test_pair_egos_exclude_target_edge():
    net, cfg, cache, _ = small_node_setup()
    edges = net.edges_in("train")[:8]
    q, k = pair_egos(net, cache, cfg, edges, np.random.default_rng(0))
    for e, a, b in zip(edges, q, k):
        assert e not in a.edges and e not in b.edges


def test_every_trainable_parameter_receives_gradient():
    net, cfg, cache, params = small_node_setup()
    edges = net.edges_in("train")[:6]
    hq, hk = encode_pairs(params, net, cache, cfg, edges, np.random.default_rng(0))
    nx.backward(link_prediction_loss(hq, hk))
    missing = [n for n in params.trainable("node") if params[n].grad is None]
    assert missing == []
    assert "head.w" not in params.trainable("node")


def test_bert_base_config_shapes():
    from edgeformers.config import ModelConfig

    cfg = ModelConfig.bert_base(100, 10, node_level=True)
    assert (cfg.hidden, cfg.heads, cfg.layers, cfg.node_dim) == (768, 12, 12, 64)
