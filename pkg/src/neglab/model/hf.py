"""Import Hugging Face GPT-2 and Llama checkpoints into the engine's layout."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import ContainerError
from .config import ModelConfig
from .container import load_tensors
from .weights import Weights


def _strip(state: dict, prefix: str) -> dict:
    return {k[len(prefix):] if k.startswith(prefix) else k: v for k, v in state.items()}


def gpt2_config(hf: dict) -> ModelConfig:
    d, h = hf["n_embd"], hf["n_head"]
    return ModelConfig(
        n_layers=hf["n_layer"],
        d_model=d,
        n_heads=h,
        d_head=d // h,
        vocab_size=hf["vocab_size"],
        mlp_hidden=hf.get("n_inner") or 4 * d,
        n_ctx=hf.get("n_positions", 1024),
        norm_kind="layernorm",
        positional_kind="learned-absolute",
        activation="gelu",
        eps=hf.get("layer_norm_epsilon", 1e-5),
        tie_embeddings=True,
        attn_bias=True,
        mlp_bias=True,
    )


def from_gpt2_state(state: dict, hf_config: dict) -> Weights:
    cfg = gpt2_config(hf_config)
    s = _strip(state, "transformer.")
    d = cfg.d_model
    t = {"embed.W_E": s["wte.weight"], "embed.W_pos": s["wpe.weight"]}
    for i in range(cfg.n_layers):
        p, q = f"h.{i}.", f"blocks.{i}."
        t[q + "ln1.w"], t[q + "ln1.b"] = s[p + "ln_1.weight"], s[p + "ln_1.bias"]
        w, b = s[p + "attn.c_attn.weight"], s[p + "attn.c_attn.bias"]
        t[q + "attn.W_Q"], t[q + "attn.W_K"], t[q + "attn.W_V"] = w[:, :d], w[:, d:2 * d], w[:, 2 * d:]
        t[q + "attn.b_Q"], t[q + "attn.b_K"], t[q + "attn.b_V"] = b[:d], b[d:2 * d], b[2 * d:]
        t[q + "attn.W_O"], t[q + "attn.b_O"] = s[p + "attn.c_proj.weight"], s[p + "attn.c_proj.bias"]
        t[q + "ln2.w"], t[q + "ln2.b"] = s[p + "ln_2.weight"], s[p + "ln_2.bias"]
        t[q + "mlp.W_in"], t[q + "mlp.b_in"] = s[p + "mlp.c_fc.weight"], s[p + "mlp.c_fc.bias"]
        t[q + "mlp.W_out"], t[q + "mlp.b_out"] = s[p + "mlp.c_proj.weight"], s[p + "mlp.c_proj.bias"]
    t["ln_final.w"], t["ln_final.b"] = s["ln_f.weight"], s["ln_f.bias"]
    return Weights(cfg, {k: np.asarray(v, dtype=np.float32) for k, v in t.items()})


def llama_config(hf: dict) -> ModelConfig:
    d, h = hf["hidden_size"], hf["num_attention_heads"]
    return ModelConfig(
        n_layers=hf["num_hidden_layers"],
        d_model=d,
        n_heads=h,
        n_kv_heads=hf.get("num_key_value_heads", h),
        d_head=hf.get("head_dim") or d // h,
        vocab_size=hf["vocab_size"],
        mlp_hidden=hf["intermediate_size"],
        n_ctx=hf.get("max_position_embeddings", 4096),
        norm_kind="rmsnorm",
        positional_kind="rotary",
        activation="silu",
        rope_base=hf.get("rope_theta", 10000.0),
        rotary_style="half",
        eps=hf.get("rms_norm_eps", 1e-6),
        tie_embeddings=bool(hf.get("tie_word_embeddings", False)),
        attn_bias=bool(hf.get("attention_bias", False)),
    )


def from_llama_state(state: dict, hf_config: dict) -> Weights:
    cfg = llama_config(hf_config)
    s = _strip(state, "model.")
    t = {"embed.W_E": s["embed_tokens.weight"], "ln_final.w": s["norm.weight"]}
    for i in range(cfg.n_layers):
        p, q = f"layers.{i}.", f"blocks.{i}."
        t[q + "ln1.w"] = s[p + "input_layernorm.weight"]
        t[q + "ln2.w"] = s[p + "post_attention_layernorm.weight"]
        for ours, theirs in (("W_Q", "q_proj"), ("W_K", "k_proj"), ("W_V", "v_proj"), ("W_O", "o_proj")):
            t[q + "attn." + ours] = np.asarray(s[p + f"self_attn.{theirs}.weight"]).T
        if cfg.attn_bias:
            for ours, theirs in (("b_Q", "q_proj"), ("b_K", "k_proj"), ("b_V", "v_proj"), ("b_O", "o_proj")):
                t[q + "attn." + ours] = s[p + f"self_attn.{theirs}.bias"]
        t[q + "mlp.W_gate"] = np.asarray(s[p + "mlp.gate_proj.weight"]).T
        t[q + "mlp.W_in"] = np.asarray(s[p + "mlp.up_proj.weight"]).T
        t[q + "mlp.W_out"] = np.asarray(s[p + "mlp.down_proj.weight"]).T
    if not cfg.tie_embeddings:
        t["unembed.W_U"] = state["lm_head.weight"]
    return Weights(cfg, {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in t.items()})


def load_hf_checkpoint(directory) -> Weights:
    """Load ``config.json`` + ``model.safetensors`` from a Hugging Face model directory."""
    directory = Path(directory)
    cfg_path = directory / "config.json"
    if not cfg_path.exists():
        raise ContainerError(f"{directory}: no config.json")
    hf = json.loads(cfg_path.read_text())
    state, _ = load_tensors(directory / "model.safetensors")
    kind = hf.get("model_type")
    if kind == "gpt2":
        return from_gpt2_state(state, hf)
    if kind in ("llama", "mistral"):
        return from_llama_state(state, hf)
    raise ContainerError(f"unsupported model_type {kind!r}")
