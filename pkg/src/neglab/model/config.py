from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from ..errors import ConfigError

NORM_KINDS = ("layernorm", "rmsnorm")
POSITIONAL_KINDS = ("learned-absolute", "rotary")
ACTIVATIONS = ("gelu", "silu")
ROTARY_STYLES = ("interleaved", "half")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters of a pre-norm decoder-only transformer.

    ``gated_mlp`` defaults to True for silu (SwiGLU-style gate/up/down
    projections) and False for gelu (a plain two-layer MLP).
    """

    n_layers: int
    d_model: int
    n_heads: int
    d_head: int
    vocab_size: int
    mlp_hidden: int
    n_kv_heads: int | None = None
    n_ctx: int = 1024
    norm_kind: str = "rmsnorm"
    positional_kind: str = "rotary"
    activation: str = "silu"
    gated_mlp: bool | None = None
    rope_base: float = 10000.0
    rotary_style: str = "interleaved"
    eps: float = 1e-5
    tie_embeddings: bool = False
    attn_bias: bool = False
    mlp_bias: bool = False
    unembed_bias: bool = False

    def __post_init__(self):
        if self.n_kv_heads is None:
            object.__setattr__(self, "n_kv_heads", self.n_heads)
        if self.gated_mlp is None:
            object.__setattr__(self, "gated_mlp", self.activation == "silu")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.n_heads * self.d_head != self.d_model:
            raise ConfigError(
                f"n_heads * d_head = {self.n_heads * self.d_head} != d_model = {self.d_model}"
            )
        if self.n_kv_heads < 1 or self.n_heads % self.n_kv_heads:
            raise ConfigError(f"n_kv_heads={self.n_kv_heads} must divide n_heads={self.n_heads}")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"norm_kind must be one of {NORM_KINDS}")
        if self.positional_kind not in POSITIONAL_KINDS:
            raise ConfigError(f"positional_kind must be one of {POSITIONAL_KINDS}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.rotary_style not in ROTARY_STYLES:
            raise ConfigError(f"rotary_style must be one of {ROTARY_STYLES}")
        if self.positional_kind == "rotary" and self.d_head % 2:
            raise ConfigError("rotary positions need an even d_head")
        if self.eps < 0:
            raise ConfigError("eps must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, s: str) -> "ModelConfig":
        return cls.from_dict(json.loads(s))


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every tensor name the engine reads for ``cfg``, with its shape.

    Linear maps are stored input-major (``[d_in, d_out]``) so activations are
    multiplied on the left. The tied unembedding is not listed; it aliases the
    token embedding.
    """
    d, v = cfg.d_model, cfg.vocab_size
    q_dim = cfg.n_heads * cfg.d_head
    kv_dim = cfg.n_kv_heads * cfg.d_head
    shapes: dict[str, tuple[int, ...]] = {"embed.W_E": (v, d)}
    if cfg.positional_kind == "learned-absolute":
        shapes["embed.W_pos"] = (cfg.n_ctx, d)

    def norm(prefix: str) -> None:
        shapes[f"{prefix}.w"] = (d,)
        if cfg.norm_kind == "layernorm":
            shapes[f"{prefix}.b"] = (d,)

    for i in range(cfg.n_layers):
        p = f"blocks.{i}"
        norm(f"{p}.ln1")
        shapes[f"{p}.attn.W_Q"] = (d, q_dim)
        shapes[f"{p}.attn.W_K"] = (d, kv_dim)
        shapes[f"{p}.attn.W_V"] = (d, kv_dim)
        shapes[f"{p}.attn.W_O"] = (q_dim, d)
        if cfg.attn_bias:
            shapes[f"{p}.attn.b_Q"] = (q_dim,)
            shapes[f"{p}.attn.b_K"] = (kv_dim,)
            shapes[f"{p}.attn.b_V"] = (kv_dim,)
            shapes[f"{p}.attn.b_O"] = (d,)
        norm(f"{p}.ln2")
        shapes[f"{p}.mlp.W_in"] = (d, cfg.mlp_hidden)
        if cfg.gated_mlp:
            shapes[f"{p}.mlp.W_gate"] = (d, cfg.mlp_hidden)
        shapes[f"{p}.mlp.W_out"] = (cfg.mlp_hidden, d)
        if cfg.mlp_bias:
            shapes[f"{p}.mlp.b_in"] = (cfg.mlp_hidden,)
            if cfg.gated_mlp:
                shapes[f"{p}.mlp.b_gate"] = (cfg.mlp_hidden,)
            shapes[f"{p}.mlp.b_out"] = (d,)
    norm("ln_final")
    if not cfg.tie_embeddings:
        shapes["unembed.W_U"] = (v, d)
    if cfg.unembed_bias:
        shapes["unembed.b_U"] = (v,)
    return shapes
