from __future__ import annotations

from types import MappingProxyType

import numpy as np

from ..errors import ContainerError, ShapeError
from .config import ModelConfig, expected_shapes
from .container import load_tensors, save_tensors

CONFIG_KEY = "neglab.config"


class Weights:
    """Immutable, shape-validated tensor map for one :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        shapes = expected_shapes(config)
        for name, shape in shapes.items():
            if name not in tensors:
                raise ContainerError(f"missing tensor: {name}")
            if tuple(tensors[name].shape) != shape:
                raise ShapeError(f"tensor {name} has shape {tuple(tensors[name].shape)}, expected {shape}")
        frozen = {}
        for name in shapes:
            arr = np.array(tensors[name], dtype=np.float32)
            arr.setflags(write=False)
            frozen[name] = arr
        if config.tie_embeddings:
            if "unembed.W_U" in tensors and not np.array_equal(tensors["unembed.W_U"], frozen["embed.W_E"]):
                raise ContainerError("tie_embeddings set but unembed.W_U differs from embed.W_E")
            frozen["unembed.W_U"] = frozen["embed.W_E"]
        self.config = config
        self._t = MappingProxyType(frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def get(self, name: str, default=None):
        return self._t.get(name, default)

    def names(self) -> list[str]:
        return sorted(self._t)

    @property
    def W_U(self) -> np.ndarray:
        return self._t["unembed.W_U"]

    def stored(self) -> dict[str, np.ndarray]:
        """Tensors as written to disk (tied unembedding omitted)."""
        names = expected_shapes(self.config)
        return {n: self._t[n] for n in names}


def save_weights(path, weights: Weights) -> None:
    save_tensors(path, weights.stored(), {CONFIG_KEY: weights.config.to_json()})


def load_weights(path, config: ModelConfig | None = None) -> Weights:
    """Load a container written by :func:`save_weights`.

    The architecture comes from the container metadata unless ``config`` is
    given, in which case the metadata (if any) must agree with it.
    """
    tensors, meta = load_tensors(path)
    stored = meta.get(CONFIG_KEY)
    if config is None:
        if stored is None:
            raise ContainerError(f"{path}: no model config in metadata and none supplied")
        config = ModelConfig.from_json(stored)
    elif stored is not None and ModelConfig.from_json(stored) != config:
        raise ContainerError(f"{path}: stored config differs from the supplied one")
    return Weights(config, tensors)
