"""The bundled toy model: seeded Gaussian weights in a Llama-style layout."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .config import ModelConfig, expected_shapes
from .tokenizer import Tokenizer
from .transformer import Transformer
from .weights import Weights, load_weights

TOY_SEED = 1234
INIT_STD = 0.02
BOS_TOKEN = "<|endoftext|>"


def data_path(name: str) -> Path:
    return Path(str(resources.files("neglab") / "data" / name))


def toy_config(vocab_size: int, **overrides) -> ModelConfig:
    base = dict(
        n_layers=4,
        d_model=64,
        n_heads=4,
        n_kv_heads=2,
        d_head=16,
        vocab_size=vocab_size,
        mlp_hidden=128,
        n_ctx=256,
        norm_kind="rmsnorm",
        positional_kind="rotary",
        activation="silu",
        rope_base=10000.0,
        eps=1e-5,
    )
    base.update(overrides)
    return ModelConfig(**base)


def init_weights(config: ModelConfig, seed: int, std: float = INIT_STD) -> Weights:
    """Norm gains 1, biases 0, everything else N(0, std^2), drawn in name order."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in sorted(expected_shapes(config).items()):
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".w") and len(shape) == 1:
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif leaf.startswith("b") and len(shape) == 1:
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    return Weights(config, tensors)


def load_toy_tokenizer() -> Tokenizer:
    return Tokenizer.from_files(data_path("toy_vocab.json"), data_path("toy_merges.txt"), bos_token=BOS_TOKEN)


def load_toy() -> tuple[Transformer, Tokenizer]:
    tok = load_toy_tokenizer()
    return Transformer(load_weights(data_path("toy_model.safetensors"))), tok
