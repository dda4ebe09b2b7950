"""Float64 re-derivation of the toy architecture, written directly from the math.

Covers RMSNorm, interleaved rotary, grouped-query attention and a SiLU-gated
MLP with untied unembedding. Used as an oracle for the engine and for the
intervention plans; it shares no code with neglab's forward pass.
"""

import numpy as np


def _rms(x, g, eps):
    return x / np.sqrt((x * x).mean(-1, keepdims=True) + eps) * g


def _rope(x, base):
    t, dh = x.shape[-2], x.shape[-1]
    inv = base ** (-np.arange(0, dh, 2) / dh)
    ang = np.arange(t)[:, None] * inv[None]
    c, s = np.cos(ang), np.sin(ang)
    out = np.empty_like(x)
    out[..., 0::2] = x[..., 0::2] * c - x[..., 1::2] * s
    out[..., 1::2] = x[..., 0::2] * s + x[..., 1::2] * c
    return out


def reference_forward(weights, ids, sink_last=(), frozen_last=None, ao_last=None):
    """Logits at the last position.

    ``sink_last``: layers whose last query only sees keys {0, T-1}.
    ``frozen_last``: {layer: [H, T]} last-row patterns to use instead.
    ``ao_last``: {layer: vector} that replaces the last row of AO.
    """
    cfg = weights.config
    w = {n: weights[n].astype(np.float64) for n in weights.names()}
    frozen_last = frozen_last or {}
    ao_last = ao_last or {}
    H, Hk, dh = cfg.n_heads, cfg.n_kv_heads, cfg.d_head
    x = w["embed.W_E"][np.asarray(ids)]
    t = len(ids)
    causal = np.tril(np.ones((t, t), bool))
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        h = _rms(x, w[p + "ln1.w"], cfg.eps)
        q = (h @ w[p + "attn.W_Q"]).reshape(t, H, dh).transpose(1, 0, 2)
        k = (h @ w[p + "attn.W_K"]).reshape(t, Hk, dh).transpose(1, 0, 2)
        v = (h @ w[p + "attn.W_V"]).reshape(t, Hk, dh).transpose(1, 0, 2)
        q, k = _rope(q, cfg.rope_base), _rope(k, cfg.rope_base)
        k, v = np.repeat(k, H // Hk, 0), np.repeat(v, H // Hk, 0)
        s = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
        mask = causal.copy()
        if i in sink_last:
            mask[t - 1] = False
            mask[t - 1, [0, t - 1]] = True
        s = np.where(mask, s, -np.inf)
        pat = np.exp(s - s.max(-1, keepdims=True))
        pat /= pat.sum(-1, keepdims=True)
        if i in frozen_last:
            pat[:, t - 1, :] = frozen_last[i]
        z = (pat @ v).transpose(1, 0, 2).reshape(t, H * dh)
        ao = z @ w[p + "attn.W_O"]
        if i in ao_last:
            ao[t - 1] = ao_last[i]
        x = x + ao
        h2 = _rms(x, w[p + "ln2.w"], cfg.eps)
        g = h2 @ w[p + "mlp.W_gate"]
        x = x + (g / (1 + np.exp(-g)) * (h2 @ w[p + "mlp.W_in"])) @ w[p + "mlp.W_out"]
    return _rms(x[-1], w["ln_final.w"], cfg.eps) @ w["unembed.W_U"].T
