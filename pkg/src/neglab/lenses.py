"""Logit-lens projections of residual-stream vectors onto the vocabulary."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensorops as T
from .errors import PlanError, ShapeError
from .model.tokenizer import Tokenizer
from .model.transformer import TraceRequest, Transformer

SELF = "self"
FROZEN = "frozen"
DEFAULT_K = 10
SIGNALS = ("ao", "mo", "resid")


def frozen_normalize(x, model: Transformer, sigma: float) -> np.ndarray:
    """The final norm with its scale held at ``sigma``: a linear map of ``x``.

    For LayerNorm models the mean is still removed (centering is linear) but
    the shift ``beta`` is left out; see :func:`lens_bias`.
    """
    if not sigma > 0:
        raise ValueError(f"frozen sigma must be positive, got {sigma}")
    x = T.as_tensor(x)
    if x.shape[-1] != model.config.d_model:
        raise ShapeError(f"lens input has dimension {x.shape[-1]}, model is {model.config.d_model}")
    if model.config.norm_kind == "layernorm":
        x = x - x.mean(axis=-1, keepdims=True)
    return x / T.DTYPE(sigma) * model.weights["ln_final.w"]


def lens_bias(model: Transformer) -> np.ndarray:
    """Input-independent logits the frozen lens omits (norm shift and unembedding bias)."""
    out = np.zeros(model.config.vocab_size, dtype=np.float32)
    beta = model.weights.get("ln_final.b")
    if beta is not None:
        out += model.weights.W_U @ beta
    b = model.weights.get("unembed.b_U")
    if b is not None:
        out += b
    return out


def logit_lens(x, model: Transformer, norm_mode: str = SELF, sigma: float | None = None) -> np.ndarray:
    """Vocabulary logits for ``x`` (a vector or a stack of vectors).

    ``self`` applies the model's full final norm before unembedding, so the
    final hidden state reproduces the model's logits. ``frozen`` divides by
    the supplied ``sigma`` instead and drops all bias terms, which makes the
    projection linear in ``x``.
    """
    x = T.as_tensor(x)
    if x.shape[-1] != model.config.d_model:
        raise ShapeError(f"lens input has dimension {x.shape[-1]}, model is {model.config.d_model}")
    if norm_mode == SELF:
        return model.logits_from_hidden(x)
    if norm_mode == FROZEN:
        if sigma is None:
            raise ValueError("frozen lens needs sigma")
        xn = frozen_normalize(x, model, sigma)
        rows = xn.reshape(-1, xn.shape[-1])
        W_U = model.weights.W_U
        out = np.stack([W_U @ r for r in rows]).astype(np.float32)
        return out.reshape(xn.shape[:-1] + (W_U.shape[0],))
    raise ValueError(f"unknown norm mode {norm_mode!r}")


@dataclass(frozen=True)
class LensReadout:
    """Top-k promoted and bottom-k demoted tokens of one projection.

    ``layer`` is 0-based here and written 1-based by :meth:`to_dict`.
    """

    layer: int | None
    signal: str
    position: int
    promoted: tuple  # ((token_id, logit), ...) descending
    demoted: tuple  # ascending
    norm_mode: str = SELF
    logits: np.ndarray | None = None

    def promoted_ids(self) -> list[int]:
        return [t for t, _ in self.promoted]

    def demoted_ids(self) -> list[int]:
        return [t for t, _ in self.demoted]

    def to_dict(self, tokenizer: Tokenizer) -> dict:
        def strs(pairs):
            return [[tokenizer.token_bytes(t).decode("utf-8", errors="replace"), float(v)] for t, v in pairs]

        return {
            "layer": None if self.layer is None else self.layer + 1,
            "signal": self.signal,
            "position": self.position,
            "promoted": strs(self.promoted),
            "demoted": strs(self.demoted),
        }

    def to_json(self, tokenizer: Tokenizer) -> str:
        return json.dumps(self.to_dict(tokenizer))


def readout_from_logits(
    logits, k: int = DEFAULT_K, layer=None, signal: str = "", position: int = -1, norm_mode: str = SELF, keep_logits=False
) -> LensReadout:
    logits = np.asarray(logits)
    if k > logits.shape[-1]:
        raise ShapeError(f"k={k} exceeds vocabulary size {logits.shape[-1]}")
    ti, tv = T.topk(logits, k)
    bi, bv = T.bottomk(logits, k)
    return LensReadout(
        layer=layer,
        signal=signal,
        position=position,
        promoted=tuple((int(i), float(v)) for i, v in zip(ti, tv)),
        demoted=tuple((int(i), float(v)) for i, v in zip(bi, bv)),
        norm_mode=norm_mode,
        logits=logits.copy() if keep_logits else None,
    )


def readout(
    x, model: Transformer, k: int = DEFAULT_K, norm_mode: str = SELF, sigma: float | None = None, **tags
) -> LensReadout:
    return readout_from_logits(logit_lens(x, model, norm_mode, sigma), k, norm_mode=norm_mode, **tags)


def lens_scan(
    model: Transformer,
    prompt_ids,
    layers,
    signal: str = "ao",
    k: int = DEFAULT_K,
    norm_mode: str = SELF,
) -> list[LensReadout]:
    """One readout per requested 0-based layer at the last prompt position.

    ``signal`` picks the attention output, MLP output or the residual stream
    after the layer. Frozen-sigma scans use the prompt's own final-norm scale.
    """
    if signal not in SIGNALS:
        raise ValueError(f"unknown signal {signal!r}; expected one of {SIGNALS}")
    layers = list(layers)
    if not layers:
        return []
    n = model.config.n_layers
    bad = [i for i in layers if not 0 <= i < n]
    if bad:
        raise PlanError(f"lens layers {[i + 1 for i in bad]} outside 1..{n}")
    req = TraceRequest(
        ao=layers if signal == "ao" else (),
        mo=layers if signal == "mo" else (),
        ap=(),
        residual=[(i, "post") for i in layers] if signal == "resid" else (),
        positions="last",
    )
    _, rec = model.forward(prompt_ids, req)
    sigma = float(rec.final_scale[0]) if norm_mode == FROZEN else None
    pos = len(rec.tokens) - 1
    out = []
    for i in layers:
        vec = rec.ao[i][0] if signal == "ao" else rec.mo[i][0] if signal == "mo" else rec.resid[(i, "post")][0]
        out.append(readout(vec, model, k, norm_mode, sigma, layer=i, signal=signal, position=pos))
    return out
