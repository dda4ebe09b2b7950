from .answers import answer_readout, first_divergence_position
from .config import ModelConfig, expected_shapes
from .container import load_tensors, save_tensors
from .tokenizer import Tokenizer, train_bpe
from .transformer import POINTS, TraceRecord, TraceRequest, Transformer
from .weights import Weights, load_weights, save_weights

__all__ = [
    "ModelConfig",
    "POINTS",
    "Tokenizer",
    "TraceRecord",
    "TraceRequest",
    "Transformer",
    "Weights",
    "answer_readout",
    "expected_shapes",
    "first_divergence_position",
    "load_tensors",
    "load_weights",
    "save_tensors",
    "save_weights",
    "train_bpe",
]
