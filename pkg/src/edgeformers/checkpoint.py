"""On-disk checkpoints.

A checkpoint directory holds

- ``manifest.json``: format version, parameter names and shapes in blob
  order, the model and training configs, the task, epoch and step counters;
- ``params.bin``: every parameter as little-endian float32, concatenated in
  manifest order;
- ``optimizer.bin``: Adam first then second moments, same layout (absent
  when no optimiser state was saved);
- ``vocab.txt`` and ``nodes.txt``: the token list and the node-table order.

Compute stays in float64; values are rounded to float32 only when written,
so a loaded checkpoint saves back to identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig, ModelParams, TrainConfig, init_params
from .graph import TextualEdgeNetwork, Vocabulary
from .numerics import Tensor
from .training import OptimizerState

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointMismatchError(ValueError):
    """Stored shapes or node order disagree with what the caller expects."""


@dataclass
class Checkpoint:
    params: ModelParams
    train_config: TrainConfig
    vocab: Vocabulary
    node_ids: list[str]
    task: str
    epoch: int = 0
    optimizer: OptimizerState | None = None

    @property
    def step(self) -> int:
        return self.optimizer.step if self.optimizer is not None else 0

    def align_to(self, network: TextualEdgeNetwork) -> None:
        """Reorder node-table rows to the network's node order; the id sets must agree."""
        order = list(network.node_ids)
        if order == self.node_ids:
            return
        if set(order) != set(self.node_ids) or len(order) != len(self.node_ids):
            missing = sorted(set(order) - set(self.node_ids))[:3]
            absent = sorted(set(self.node_ids) - set(order))[:3]
            raise CheckpointMismatchError(
                f"graph has {len(order)} nodes but the checkpoint node table has {len(self.node_ids)}"
                + (f"; unknown to the checkpoint: {missing}" if missing else "")
                + (f"; not in the graph: {absent} (was a node file used at training time?)" if absent else "")
            )
        row = {n: k for k, n in enumerate(self.node_ids)}
        perm = np.array([row[n] for n in order])
        self.params["node_emb"].data = self.params["node_emb"].data[perm]
        if self.optimizer is not None:
            for moments in (self.optimizer.m, self.optimizer.v):
                if "node_emb" in moments:
                    moments["node_emb"] = moments["node_emb"][perm]
        self.node_ids = order


def _expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    # shapes only; the random values are thrown away
    fresh = init_params(config, np.random.default_rng(0))
    return {k: t.shape for k, t in fresh.tensors.items()}


def _pack(arrays: list[np.ndarray]) -> bytes:
    if not arrays:
        return b""
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays]).astype(_DTYPE).tobytes()


def _unpack(blob: bytes, shapes: list[tuple[int, ...]], what: str) -> list[np.ndarray]:
    total = sum(int(np.prod(s)) for s in shapes)
    if len(blob) != 4 * total:
        raise CheckpointMismatchError(f"{what} holds {len(blob)} bytes, manifest implies {4 * total}")
    flat = np.frombuffer(blob, dtype=_DTYPE).astype(np.float64)
    out, pos = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(flat[pos : pos + n].reshape(s).copy())
        pos += n
    return out


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = ckpt.params.names()
    opt = ckpt.optimizer
    opt_names = [n for n in names if opt is not None and n in opt.m]
    manifest = {
        "format_version": FORMAT_VERSION,
        "task": ckpt.task,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "model_config": ckpt.params.config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "parameters": [{"name": n, "shape": list(ckpt.params[n].shape)} for n in names],
        "optimizer": None if opt is None else {"step": opt.step, "names": opt_names},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (path / "params.bin").write_bytes(_pack([ckpt.params[n].data for n in names]))
    if opt is not None:
        (path / "optimizer.bin").write_bytes(_pack([opt.m[n] for n in opt_names] + [opt.v[n] for n in opt_names]))
    elif (path / "optimizer.bin").exists():
        (path / "optimizer.bin").unlink()
    ckpt.vocab.save(path / "vocab.txt")
    (path / "nodes.txt").write_text("".join(n + "\n" for n in ckpt.node_ids), encoding="utf-8")


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointMismatchError(f"no manifest.json in {path}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointMismatchError(f"manifest.json is not valid JSON: {exc.msg}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointMismatchError(f"unsupported checkpoint format {manifest.get('format_version')!r}")

    config = ModelConfig.from_dict(manifest["model_config"])
    stored = [(p["name"], tuple(p["shape"])) for p in manifest["parameters"]]
    expected = _expected_shapes(config)
    if dict(stored) != expected or len(stored) != len(expected):
        bad = sorted(set(dict(stored).items()) ^ set(expected.items()))
        raise CheckpointMismatchError(f"parameter shapes disagree with the stored model config: {bad[:4]}")
    arrays = _unpack((path / "params.bin").read_bytes(), [s for _, s in stored], "params.bin")
    params = ModelParams(config, {n: Tensor(a, requires_grad=True, name=n) for (n, _), a in zip(stored, arrays)})

    opt = None
    if manifest.get("optimizer") is not None:
        opt_names = manifest["optimizer"]["names"]
        shapes = [expected[n] for n in opt_names]
        moments = _unpack((path / "optimizer.bin").read_bytes(), shapes + shapes, "optimizer.bin")
        k = len(opt_names)
        opt = OptimizerState(dict(zip(opt_names, moments[:k])), dict(zip(opt_names, moments[k:])),
                             int(manifest["optimizer"]["step"]))

    vocab = Vocabulary.load(path / "vocab.txt")
    if len(vocab) != config.vocab_size:
        raise CheckpointMismatchError(f"vocab.txt has {len(vocab)} tokens, model expects {config.vocab_size}")
    node_ids = (path / "nodes.txt").read_text(encoding="utf-8").splitlines()
    if len(node_ids) != config.num_nodes:
        raise CheckpointMismatchError(f"nodes.txt has {len(node_ids)} rows, model expects {config.num_nodes}")
    train_config = TrainConfig.from_dict(manifest["train_config"])
    return Checkpoint(params, train_config, vocab, node_ids, manifest["task"], int(manifest["epoch"]), opt)


def round_to_storage(params: ModelParams) -> None:
    """Round parameter values to what a checkpoint would hold."""
    for t in params.tensors.values():
        t.data = t.data.astype(_DTYPE).astype(np.float64)


__all__ = [
    "FORMAT_VERSION",
    "Checkpoint",
    "CheckpointMismatchError",
    "load_checkpoint",
    "round_to_storage",
    "save_checkpoint",
]
