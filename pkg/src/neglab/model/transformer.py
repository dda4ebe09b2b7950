"""Instrumented pre-norm decoder-only transformer.

Every forward pass can record the additive pieces of the residual stream:
with ``E`` the (token + position) embedding and ``AO_i``/``MO_i`` what
attention and MLP of layer ``i`` add, the final hidden state is exactly
``E + sum_i (AO_i + MO_i)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .. import tensorops as T
from ..errors import PlanError, ShapeError
from ..interventions import InterventionPlan, resolve
from .config import ModelConfig
from .weights import Weights

POINTS = ("pre", "mid", "post")


def _layer_set(x, n_layers: int) -> frozenset[int]:
    if x == "all":
        return frozenset(range(n_layers))
    out = frozenset(int(i) for i in x)
    bad = [i for i in out if not 0 <= i < n_layers]
    if bad:
        raise PlanError(f"trace request layers {sorted(bad)} out of range for {n_layers} layers")
    return out


@dataclass(frozen=True)
class TraceRequest:
    """What a forward pass should record. Layers are 0-based."""

    ao: object = "all"
    mo: object = "all"
    ap: object = "all"
    residual: object = ()  # "all" or iterable of (layer, point)
    positions: object = "all"  # "all", "last" or iterable of ints

    @classmethod
    def full(cls) -> "TraceRequest":
        return cls(residual="all")

    @classmethod
    def none(cls) -> "TraceRequest":
        return cls(ao=(), mo=(), ap=(), residual=(), positions="last")

    @classmethod
    def last(cls, residual=()) -> "TraceRequest":
        return cls(residual=residual, positions="last")


@dataclass
class TraceRecord:
    """Signals recorded by one forward pass.

    Per-position arrays are indexed by ``positions.index(p)``. ``ap[i]`` has
    shape ``[n_heads, len(positions), T]``; ``final_scale`` is the final
    norm's sigma at each traced position.
    """

    tokens: tuple
    positions: tuple
    embedding: np.ndarray
    ao: dict = field(default_factory=dict)
    mo: dict = field(default_factory=dict)
    ap: dict = field(default_factory=dict)
    resid: dict = field(default_factory=dict)
    final: np.ndarray | None = None
    final_scale: np.ndarray | None = None
    logits: np.ndarray | None = None  # at the readout (last) position

    def row(self, position: int) -> int:
        if position < 0:
            position += len(self.tokens)
        try:
            return self.positions.index(position)
        except ValueError:
            raise PlanError(f"position {position} was not traced") from None

    @property
    def last(self) -> int:
        return self.row(len(self.tokens) - 1)


class Transformer:
    """Forward engine over immutable :class:`Weights`.

    Instances hold no per-call state, so one model can serve concurrent
    forward passes from several threads.
    """

    def __init__(self, weights: Weights):
        self.weights = weights
        self.config: ModelConfig = weights.config
        cfg = self.config
        self._scale = np.float32(1.0 / np.sqrt(cfg.d_head))
        self._group = cfg.n_heads // cfg.n_kv_heads

    # -- pieces --------------------------------------------------------------

    def _norm(self, x: np.ndarray, prefix: str) -> np.ndarray:
        w = self.weights
        if self.config.norm_kind == "rmsnorm":
            return T.rms_norm(x, w[f"{prefix}.w"], self.config.eps)
        return T.layer_norm(x, w[f"{prefix}.w"], w[f"{prefix}.b"], self.config.eps)

    def norm_scale(self, x: np.ndarray) -> np.ndarray:
        """Sigma the final norm divides by, one value per row of ``x``."""
        x = T.as_tensor(x)
        if self.config.norm_kind == "rmsnorm":
            return T.rms_scale(x, self.config.eps)[..., 0]
        return T.layer_scale(x, self.config.eps)[..., 0]

    def final_norm(self, x: np.ndarray) -> np.ndarray:
        return self._norm(T.as_tensor(x), "ln_final")

    def unembed(self, xn: np.ndarray) -> np.ndarray:
        """Project normalized rows onto the vocabulary.

        Rows are projected one at a time so a row's logits do not depend on
        how many other rows were passed alongside it.
        """
        xn = T.as_tensor(xn)
        rows = xn.reshape(-1, xn.shape[-1])
        W_U = self.weights.W_U
        out = np.empty((rows.shape[0], W_U.shape[0]), dtype=np.float32)
        for r in range(rows.shape[0]):
            out[r] = W_U @ rows[r]
        b = self.weights.get("unembed.b_U")
        if b is not None:
            out += b
        if not np.isfinite(out).all():
            raise ShapeError("unembedding produced non-finite logits")
        return out.reshape(xn.shape[:-1] + (W_U.shape[0],))

    def logits_from_hidden(self, h: np.ndarray) -> np.ndarray:
        return self.unembed(self.final_norm(h))

    def embed(self, ids: np.ndarray) -> np.ndarray:
        cfg = self.config
        x = self.weights["embed.W_E"][ids]
        if cfg.positional_kind == "learned-absolute":
            x = x + self.weights["embed.W_pos"][: len(ids)]
        return np.ascontiguousarray(x, dtype=np.float32)

    def _attention(self, h: np.ndarray, i: int, ops, t: int):
        cfg, w = self.config, self.weights
        p = f"blocks.{i}.attn"
        q = T.matmul(h, w[f"{p}.W_Q"])
        k = T.matmul(h, w[f"{p}.W_K"])
        v = T.matmul(h, w[f"{p}.W_V"])
        if cfg.attn_bias:
            q, k, v = q + w[f"{p}.b_Q"], k + w[f"{p}.b_K"], v + w[f"{p}.b_V"]
        q = q.reshape(t, cfg.n_heads, cfg.d_head).transpose(1, 0, 2)
        k = k.reshape(t, cfg.n_kv_heads, cfg.d_head).transpose(1, 0, 2)
        v = v.reshape(t, cfg.n_kv_heads, cfg.d_head).transpose(1, 0, 2)
        if cfg.positional_kind == "rotary":
            q = T.rotary_apply(q, cfg.rope_base, style=cfg.rotary_style)
            k = T.rotary_apply(k, cfg.rope_base, style=cfg.rotary_style)
        if self._group > 1:
            k = np.repeat(k, self._group, axis=0)
            v = np.repeat(v, self._group, axis=0)
        scores = T.matmul(q, k.transpose(0, 2, 1)) * self._scale
        if ops is not None:
            scores = ops.edit_scores(scores)
        pattern = T.masked_softmax_rows(scores)
        if ops is not None and ops.freeze:
            pattern = pattern.copy()
            for rows, frozen in ops.freeze:
                pattern[:, rows, :] = frozen
        z = T.matmul(pattern, v)
        z = z.transpose(1, 0, 2).reshape(t, cfg.n_heads * cfg.d_head)
        ao = T.matmul(z, w[f"{p}.W_O"])
        if cfg.attn_bias:
            ao = ao + w[f"{p}.b_O"]
        return ao, pattern

    def _mlp(self, h: np.ndarray, i: int) -> np.ndarray:
        cfg, w = self.config, self.weights
        p = f"blocks.{i}.mlp"
        act = T.silu if cfg.activation == "silu" else T.gelu
        up = T.matmul(h, w[f"{p}.W_in"])
        if cfg.mlp_bias:
            up = up + w[f"{p}.b_in"]
        if cfg.gated_mlp:
            gate = T.matmul(h, w[f"{p}.W_gate"])
            if cfg.mlp_bias:
                gate = gate + w[f"{p}.b_gate"]
            hidden = act(gate) * up
        else:
            hidden = act(up)
        out = T.matmul(hidden, w[f"{p}.W_out"])
        if cfg.mlp_bias:
            out = out + w[f"{p}.b_out"]
        return out

    # -- forward -------------------------------------------------------------

    def _check_tokens(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ShapeError("forward needs a non-empty 1-D token sequence")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ShapeError("token id out of vocabulary range")
        if self.config.positional_kind == "learned-absolute" and ids.size > self.config.n_ctx:
            raise ShapeError(f"sequence length {ids.size} exceeds n_ctx {self.config.n_ctx}")
        return ids

    def forward(
        self,
        tokens: Iterable[int],
        trace: TraceRequest | None = None,
        plan: InterventionPlan | None = None,
    ) -> tuple[np.ndarray, TraceRecord]:
        """Run the model; returns logits ``[T, vocab]`` and the trace.

        With ``trace=None`` only the final hidden state and readout logits at
        the last position are recorded.
        """
        cfg = self.config
        ids = self._check_tokens(tokens)
        t = int(ids.size)
        req = trace or TraceRequest.none()
        L = cfg.n_layers
        if req.positions == "all":
            pos = tuple(range(t))
        elif req.positions == "last":
            pos = (t - 1,)
        else:
            pos = tuple(sorted({int(p) if p >= 0 else t + int(p) for p in req.positions}))
            if any(not 0 <= p < t for p in pos):
                raise PlanError(f"trace positions {pos} out of range for a {t}-token prompt")
        pos_idx = np.array(pos, dtype=int)
        want_ao = _layer_set(req.ao, L)
        want_mo = _layer_set(req.mo, L)
        want_ap = _layer_set(req.ap, L)
        if req.residual == "all":
            want_res = {(i, pt) for i in range(L) for pt in POINTS}
        else:
            want_res = {(int(i), str(pt)) for i, pt in req.residual}
            for i, pt in want_res:
                if not 0 <= i < L or pt not in POINTS:
                    raise PlanError(f"bad residual snapshot request ({i}, {pt})")

        layer_ops = resolve(plan, L, cfg.n_heads, t, cfg.d_model)

        x = self.embed(ids)
        rec = TraceRecord(tokens=tuple(int(i) for i in ids), positions=pos, embedding=x[pos_idx].copy())
        for i in range(L):
            ops = layer_ops.get(i)
            if (i, "pre") in want_res:
                rec.resid[(i, "pre")] = x[pos_idx].copy()
            ao, pattern = self._attention(self._norm(x, f"blocks.{i}.ln1"), i, ops, t)
            if ops is not None:
                for rows, vec in ops.ao_edits:
                    ao[rows] = 0.0 if vec is None else vec
            x = x + ao
            if i in want_ao:
                rec.ao[i] = ao[pos_idx].copy()
            if i in want_ap:
                rec.ap[i] = pattern[:, pos_idx, :].copy()
            if (i, "mid") in want_res:
                rec.resid[(i, "mid")] = x[pos_idx].copy()
            mo = self._mlp(self._norm(x, f"blocks.{i}.ln2"), i)
            if ops is not None:
                for rows in ops.mo_zero:
                    mo[rows] = 0.0
            x = x + mo
            if i in want_mo:
                rec.mo[i] = mo[pos_idx].copy()
            if (i, "post") in want_res:
                rec.resid[(i, "post")] = x[pos_idx].copy()
        logits = self.unembed(self.final_norm(x))
        rec.final = x[pos_idx].copy()
        rec.final_scale = self.norm_scale(x[pos_idx])
        rec.logits = logits[-1].copy()
        return logits, rec

    def last_logits(self, tokens, plan: InterventionPlan | None = None) -> np.ndarray:
        """Logits at the final position."""
        _, rec = self.forward(tokens, None, plan)
        return rec.logits
