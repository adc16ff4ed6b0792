"""Model and training configuration.

``TrainConfig`` is flat on purpose: the CLI reads it from a flat JSON file and
rejects unknown keys.  Its defaults carry the published optimiser settings;
``TrainConfig.desk()`` is the preset the CLI uses when no file is given.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .numerics import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VirtualTokens:
    """Which virtual tokens join the key/value sequence.

    ``node_i`` is the first stored endpoint (the centre node for node
    encoding), ``node_j`` the other endpoint, ``context`` the cross-edge token
    used only by the node encoder.
    """

    node_i: bool = True
    node_j: bool = True
    context: bool = True


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_nodes: int
    hidden: int = 64
    heads: int = 4
    node_dim: int = 16
    layers: int = 3
    max_seq_len: int = 32
    ffn_mult: int = 4
    ln_eps: float = 1e-5
    init_std: float = 0.02
    dropout: float = 0.0
    node_level: bool = False
    num_labels: int = 0
    tokens: VirtualTokens = VirtualTokens()
    aggregation: str = "attention"
    readout: str = "cls"

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if self.layers < 2:
            raise ConfigError("layers counts the vanilla layer 0 plus at least one augmented layer")
        if self.aggregation not in ("attention", "mean"):
            raise ConfigError(f"aggregation must be 'attention' or 'mean', got {self.aggregation!r}")
        if self.readout not in ("cls", "neighbor_token"):
            raise ConfigError(f"readout must be 'cls' or 'neighbor_token', got {self.readout!r}")
        if self.readout == "neighbor_token" and not self.tokens.node_j:
            raise ConfigError("neighbor_token readout needs the node_j virtual token")

    @classmethod
    def bert_base(cls, vocab_size: int, num_nodes: int, **kw) -> "ModelConfig":
        """BERT-base sized encoder with 64-dim node embeddings."""
        base = dict(hidden=768, heads=12, node_dim=64, layers=12, max_seq_len=64)
        base.update(kw)
        return cls(vocab_size=vocab_size, num_nodes=num_nodes, **base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["tokens"] = VirtualTokens(**obj.get("tokens", {}))
        return cls(**obj)


@dataclass
class ModelParams:
    """Every learnable array, keyed by a canonical dotted name."""

    config: ModelConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, arr in arrays.items():
            self.tensors[k].data = np.array(arr, dtype=np.float64)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(t.data, requires_grad=True, name=k) for k, t in self.tensors.items()})

    def trainable(self, task: str) -> list[str]:
        """Names that receive a gradient under the configured switches for ``task``."""
        cfg = self.config
        uses_nodes = cfg.tokens.node_i or cfg.tokens.node_j
        out = []
        for name in self.tensors:
            if name.startswith("head.") and task != "edge":
                continue
            if (name.startswith("agg.") or ".ctx." in name) and task != "node":
                continue
            if ".ctx." in name and not cfg.tokens.context:
                continue
            if name == "agg.ws" and cfg.aggregation != "attention":
                continue
            if name.endswith(".node_map") and not uses_nodes:
                continue
            if name == "node_emb" and not uses_nodes and not (task == "node" and cfg.aggregation == "attention"):
                continue
            out.append(name)
        return out


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Normal(0, init_std) weights, zero biases, unit layer-norm gains."""
    d, dn, std = config.hidden, config.node_dim, config.init_std
    shapes: dict[str, tuple[tuple[int, ...], str]] = {
        "tok_emb": ((config.vocab_size, d), "w"),
        "pos_emb": ((config.max_seq_len, d), "w"),
        "emb_ln.g": ((d,), "one"),
        "emb_ln.b": ((d,), "zero"),
        "node_emb": ((config.num_nodes, dn), "w"),
    }

    def attn(prefix):
        for p in ("q", "k", "v", "o"):
            shapes[f"{prefix}.w{p}"] = ((d, d), "w")
            shapes[f"{prefix}.b{p}"] = ((d,), "zero")

    for l in range(config.layers):
        attn(f"L{l}.attn")
        shapes[f"L{l}.ln1.g"] = ((d,), "one")
        shapes[f"L{l}.ln1.b"] = ((d,), "zero")
        shapes[f"L{l}.ffn.w1"] = ((d, config.ffn_mult * d), "w")
        shapes[f"L{l}.ffn.b1"] = ((config.ffn_mult * d,), "zero")
        shapes[f"L{l}.ffn.w2"] = ((config.ffn_mult * d, d), "w")
        shapes[f"L{l}.ffn.b2"] = ((d,), "zero")
        shapes[f"L{l}.ln2.g"] = ((d,), "one")
        shapes[f"L{l}.ln2.b"] = ((d,), "zero")
        if l >= 1:
            shapes[f"L{l}.node_map"] = ((dn, d), "w")
            if config.node_level:
                attn(f"L{l}.ctx")
    if config.node_level:
        shapes["agg.ws"] = ((d, dn), "w")
    if config.num_labels:
        shapes["head.w"] = ((d, config.num_labels), "w")
        shapes["head.b"] = ((config.num_labels,), "zero")

    tensors = {}
    for name, (shape, kind) in shapes.items():
        if kind == "w":
            arr = rng.normal(0.0, std, size=shape)
        elif kind == "one":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
    return ModelParams(config, tensors)


_MODEL_KEYS = ("hidden", "heads", "node_dim", "layers", "max_seq_len", "init_std", "dropout", "aggregation", "readout")


@dataclass
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = 1.0
    patience: int = 3
    epochs: int = 30
    edge_batch_size: int = 25
    node_batch_size: int = 30
    seed: int = 0
    loss_variant: str = "bce"
    neighbor_caps: dict[str, int] = field(default_factory=dict)
    default_cap: int = 5
    vocab_max_size: int = 5000
    hidden: int = 64
    heads: int = 4
    node_dim: int = 16
    layers: int = 3
    max_seq_len: int = 32
    init_std: float = 0.02
    dropout: float = 0.0
    use_node_i: bool = True
    use_node_j: bool = True
    use_context: bool = True
    aggregation: str = "attention"
    readout: str = "cls"

    def __post_init__(self):
        positive = ("lr", "adam_eps", "patience", "epochs", "edge_batch_size", "node_batch_size", "default_cap")
        for key in positive:
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.loss_variant not in ("bce", "softmax"):
            raise ConfigError(f"loss_variant must be 'bce' or 'softmax', got {self.loss_variant!r}")
        if self.node_batch_size < 2:
            raise ConfigError("node_batch_size must be >= 2 for in-batch negatives")
        if any(c < 1 for c in self.neighbor_caps.values()):
            raise ConfigError("neighbor caps must be >= 1")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Defaults for from-scratch training at desk scale (larger step size)."""
        base = dict(lr=1e-3)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_dict(cls, obj: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        return replace(base or cls.desk(), **obj)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise ConfigError("config must be a flat JSON object")
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        return asdict(self)

    def cap_for(self, node_type: str) -> int:
        return self.neighbor_caps.get(node_type, self.default_cap)

    def model_config(self, vocab_size: int, num_nodes: int, *, node_level: bool, num_labels: int = 0) -> ModelConfig:
        kw = {k: getattr(self, k) for k in _MODEL_KEYS}
        return ModelConfig(
            vocab_size=vocab_size,
            num_nodes=num_nodes,
            node_level=node_level,
            num_labels=num_labels,
            tokens=VirtualTokens(self.use_node_i, self.use_node_j, self.use_context),
            **kw,
        )
