import json

import numpy as np
import pytest

from edgeformers import cli
from edgeformers import numerics as nx
from edgeformers.checkpoint import load_checkpoint, save_checkpoint
from edgeformers.config import TrainConfig
from edgeformers.evaluation import logistic_probe, node_embeddings
from edgeformers.graph import TokenCache, load_jsonl

SMALL = {"hidden": 8, "heads": 2, "node_dim": 4, "layers": 2, "max_seq_len": 8, "epochs": 2,
         "node_batch_size": 10, "edge_batch_size": 10, "default_cap": 3}


def write_json(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return str(path)


@pytest.fixture
def graphs(tmp_path_factory):
    root = tmp_path_factory.mktemp("graphs")
    link = write_json(root / "link.json", {"node_counts": {"node": 30}, "edges_per_node": 4,
                                           "label_rule": "planted-affinity", "split_fractions": [0.7, 0.15, 0.15]})
    edge = write_json(root / "edge.json", {"node_counts": {"user": 10, "item": 10}, "num_edges": 50,
                                           "vocab_size": 30, "words_per_edge": 5})
    assert cli.main(["synth", "--spec", link, "--seed", "0", "--out", str(root / "link")]) == 0
    assert cli.main(["synth", "--spec", edge, "--seed", "0", "--out", str(root / "edge")]) == 0
    cfg = write_json(root / "cfg.json", SMALL)
    return root, cfg


def train_node(root, cfg, out, *extra):
    return cli.main(["train-node", "--graph", str(root / "link/edges.jsonl"), "--node-file",
                     str(root / "link/nodes.jsonl"), "--config", cfg, "--out", str(out), *extra])


def test_synth_deterministic_and_reloadable(graphs, tmp_path):
    root, _ = graphs
    spec = str(root / "link.json")
    cli.main(["synth", "--spec", spec, "--seed", "0", "--out", str(tmp_path / "again")])
    for f in ("edges.jsonl", "nodes.jsonl"):
        assert (tmp_path / "again" / f).read_bytes() == (root / "link" / f).read_bytes()
    net = load_jsonl(root / "link/edges.jsonl", root / "link/nodes.jsonl")
    assert net.num_nodes == 30


def test_synth_infeasible_exit_2(tmp_path, capsys):
    spec = write_json(tmp_path / "bad.json", {"node_counts": {"node": 5}, "num_edges": 100})
    assert cli.main(["synth", "--spec", spec, "--out", str(tmp_path / "x")]) == 2
    assert "distinct node pairs" in capsys.readouterr().err


def test_train_edge_without_labels_exit_1(graphs, tmp_path, capsys):
    root, cfg = graphs
    code = cli.main(["train-edge", "--graph", str(root / "link/edges.jsonl"), "--config", cfg,
                     "--out", str(tmp_path / "r")])
    assert code == 1 and "'label'" in capsys.readouterr().err


def test_bad_config_exit_1(graphs, tmp_path):
    root, _ = graphs
    bad = write_json(tmp_path / "c.json", {"learning_rate": 1})
    assert train_node(root, bad, tmp_path / "r") == 1


def test_train_edge_defaults_and_eval(graphs, tmp_path, capsys):
    root, _ = graphs
    out = tmp_path / "r"
    g = str(root / "edge/edges.jsonl")
    assert cli.main(["train-edge", "--graph", g, "--out", str(out)]) == 0
    ckpt = load_checkpoint(out / "checkpoint")
    assert ckpt.train_config == TrainConfig.desk()
    capsys.readouterr()
    assert cli.main(["eval", "--graph", g, "--checkpoint", str(out / "checkpoint"), "--task", "edge",
                     "--split", "test"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["task"] == "edge" and 0.0 <= rep["metrics"]["micro_f1"] <= 1.0
    assert cli.main(["eval", "--graph", g, "--checkpoint", str(out / "checkpoint"), "--task", "edge",
                     "--split", "nosuch"]) == 1


def test_train_node_deterministic_and_resume(graphs, tmp_path):
    root, cfg = graphs
    assert train_node(root, cfg, tmp_path / "a") == 0
    assert train_node(root, cfg, tmp_path / "b") == 0
    for f in ("log.jsonl", "report.json", "checkpoint/manifest.json", "checkpoint/params.bin",
              "checkpoint/optimizer.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert train_node(root, cfg, tmp_path / "c", "--resume", str(tmp_path / "a/checkpoint")) == 0
    first = [json.loads(l) for l in (tmp_path / "a/log.jsonl").read_text().splitlines()]
    second = [json.loads(l) for l in (tmp_path / "c/log.jsonl").read_text().splitlines()]
    steps = [r["step"] for r in first + second]
    assert all(b > a for a, b in zip(steps, steps[1:]))
    assert second[0]["epoch"] == first[-1]["epoch"] + 1


def test_resume_with_clashing_config_exit_4(graphs, tmp_path):
    root, cfg = graphs
    train_node(root, cfg, tmp_path / "a")
    clash = write_json(tmp_path / "c.json", {**SMALL, "hidden": 16})
    assert train_node(root, clash, tmp_path / "b", "--resume", str(tmp_path / "a/checkpoint")) == 4


def test_checkpoint_round_trip_bytes(graphs, tmp_path):
    root, cfg = graphs
    train_node(root, cfg, tmp_path / "a")
    ckpt = load_checkpoint(tmp_path / "a/checkpoint")
    save_checkpoint(ckpt, tmp_path / "again")
    for f in ("manifest.json", "params.bin", "optimizer.bin", "vocab.txt", "nodes.txt"):
        assert (tmp_path / "again" / f).read_bytes() == (tmp_path / "a/checkpoint" / f).read_bytes()
    n = sum(int(np.prod(p["shape"])) for p in json.loads((tmp_path / "again/manifest.json").read_text())["parameters"])
    assert (tmp_path / "again/params.bin").stat().st_size == 4 * n


def test_shape_mismatch_exit_4(graphs, tmp_path):
    root, cfg = graphs
    train_node(root, cfg, tmp_path / "a")
    man_path = tmp_path / "a/checkpoint/manifest.json"
    man = json.loads(man_path.read_text())
    man["model_config"]["hidden"] = 12
    man_path.write_text(json.dumps(man))
    code = cli.main(["eval", "--graph", str(root / "link/edges.jsonl"), "--checkpoint", str(tmp_path / "a/checkpoint"),
                     "--task", "probe"])
    assert code == 4


def test_graph_node_mismatch_exit_4(graphs, tmp_path):
    root, cfg = graphs
    train_node(root, cfg, tmp_path / "a")
    code = cli.main(["embed", "--graph", str(root / "edge/edges.jsonl"), "--checkpoint",
                     str(tmp_path / "a/checkpoint"), "--nodes", "--out", str(tmp_path / "e.jsonl")])
    assert code == 4


def test_non_finite_loss_exit_3(graphs, tmp_path, monkeypatch):
    root, cfg = graphs
    import edgeformers.training as tr

    monkeypatch.setattr(tr, "link_prediction_loss", lambda hq, hk: nx.scale(nx.tsum(hq), float("nan")))
    assert train_node(root, cfg, tmp_path / "a") == 3


def test_embed_matches_in_process_and_probe_pipeline(graphs, tmp_path, capsys):
    root, cfg = graphs
    g, nodes = str(root / "link/edges.jsonl"), str(root / "link/nodes.jsonl")
    train_node(root, cfg, tmp_path / "a")
    ck = str(tmp_path / "a/checkpoint")
    emb = tmp_path / "emb.jsonl"
    assert cli.main(["embed", "--graph", g, "--node-file", nodes, "--checkpoint", ck, "--nodes", "--out", str(emb)]) == 0
    rows = [json.loads(l) for l in emb.read_text().splitlines()]
    net = load_jsonl(g, nodes)
    ckpt = load_checkpoint(ck)
    ckpt.align_to(net)
    cache = TokenCache(net, ckpt.vocab, ckpt.params.config.max_seq_len)
    want = node_embeddings(ckpt.params, net, cache, ckpt.train_config, np.random.default_rng(0))
    got = np.array([r["vector"] for r in rows])
    assert [r["id"] for r in rows] == list(net.node_ids)
    assert np.max(np.abs(got - want)) <= 1e-6 * max(1.0, np.abs(want).max())

    capsys.readouterr()
    assert cli.main(["eval", "--graph", g, "--node-file", nodes, "--embeddings", str(emb), "--task", "probe"]) == 0
    rep = json.loads(capsys.readouterr().out)
    direct = logistic_probe(got, [net.nodes[n].labels for n in net.node_ids])
    assert rep == json.loads(direct.to_json())

    edges_out = tmp_path / "edges.jsonl"
    assert cli.main(["embed", "--graph", g, "--checkpoint", ck, "--edges", "--out", str(edges_out)]) == 0
    assert len(edges_out.read_text().splitlines()) == len(net.edges)


def test_eval_link_requires_enough_negatives(graphs, tmp_path):
    root, cfg = graphs
    train_node(root, cfg, tmp_path / "a")
    code = cli.main(["eval", "--graph", str(root / "link/edges.jsonl"), "--checkpoint", str(tmp_path / "a/checkpoint"),
                     "--task", "link", "--negatives", "10"])
    assert code == 0
    assert cli.main(["eval", "--graph", str(root / "link/edges.jsonl"), "--checkpoint",
                     str(tmp_path / "a/checkpoint"), "--task", "link"]) == 1
