"""Transformers that read the text on graph edges: an edge encoder and a node encoder."""

from .checkpoint import Checkpoint, CheckpointMismatchError, load_checkpoint, save_checkpoint
from .config import ConfigError, ModelConfig, ModelParams, TrainConfig, VirtualTokens, init_params
from .edge_encoder import attention_trace, encode_edge, encode_edge_batch, plain_encoder
from .evaluation import MetricReport, eval_link_prediction, logistic_probe, mrr_ndcg, rank_of_positive
from .graph import Edge, Node, TextualEdgeNetwork, TokenCache, Vocabulary, build_vocab, load_jsonl, save_jsonl, tokenize
from .node_encoder import EgoBatch, encode_node, encode_nodes, make_ego
from .synth import SynthSpec, synth_generate
from .training import edge_classification_loss, link_prediction_loss, train_edge_task, train_node_task

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CheckpointMismatchError",
    "ConfigError",
    "Edge",
    "EgoBatch",
    "MetricReport",
    "ModelConfig",
    "ModelParams",
    "Node",
    "SynthSpec",
    "TextualEdgeNetwork",
    "TokenCache",
    "TrainConfig",
    "VirtualTokens",
    "Vocabulary",
    "attention_trace",
    "build_vocab",
    "edge_classification_loss",
    "encode_edge",
    "encode_edge_batch",
    "encode_node",
    "encode_nodes",
    "eval_link_prediction",
    "init_params",
    "link_prediction_loss",
    "load_checkpoint",
    "load_jsonl",
    "logistic_probe",
    "make_ego",
    "mrr_ndcg",
    "plain_encoder",
    "rank_of_positive",
    "save_checkpoint",
    "save_jsonl",
    "synth_generate",
    "tokenize",
    "train_edge_task",
    "train_node_task",
]
