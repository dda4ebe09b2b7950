"""Contrastive attribution of a logit difference to residual-stream components.

With the final norm's scale frozen at the value the prompt actually produced,
the lens is linear, so the logit difference along ``d = W_U[y-] - W_U[y+]``
splits exactly over the embedding, every attention output and every MLP
output. MLP outputs can be broken down further through a sparse autoencoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorops as T
from .errors import ContainerError, DataError, ShapeError
from .lenses import frozen_normalize, lens_bias, readout
from .model.container import load_tensors, save_tensors
from .model.transformer import TraceRecord, TraceRequest, Transformer

SAE_META_KEY = "neglab.sae"


@dataclass(frozen=True)
class ContrastDirection:
    d: np.ndarray
    minus_id: int
    plus_id: int

    @classmethod
    def for_answers(cls, model: Transformer, minus_id: int, plus_id: int) -> "ContrastDirection":
        W_U = model.weights.W_U
        return cls(W_U[minus_id] - W_U[plus_id], int(minus_id), int(plus_id))


def component_contribution(x, direction: ContrastDirection, sigma: float, model: Transformer) -> float:
    """Frozen-sigma lens logit difference of ``x`` along the contrast direction."""
    xn = frozen_normalize(x, model, sigma)
    return float(np.dot(xn.astype(np.float64), direction.d.astype(np.float64)))


def _contributions(rows: np.ndarray, direction: ContrastDirection, sigma: float, model: Transformer) -> np.ndarray:
    xn = frozen_normalize(rows, model, sigma).astype(np.float64)
    return xn @ direction.d.astype(np.float64)


@dataclass(frozen=True)
class ContributionLedger:
    """Per-component contributions for one prompt at its readout position.

    ``bias`` collects the final norm shift and unembedding bias (zero for
    models without them). ``total`` is the logit difference the model
    actually produced.
    """

    sigma: float
    embedding: float
    ao: tuple
    mo: tuple
    bias: float
    total: float

    @property
    def component_sum(self) -> float:
        return self.embedding + sum(self.ao) + sum(self.mo) + self.bias

    @property
    def discrepancy(self) -> float:
        return self.total - self.component_sum

    def items(self) -> list[tuple[str, float]]:
        out = [("E", self.embedding)]
        for i, (a, m) in enumerate(zip(self.ao, self.mo), start=1):
            out += [(f"AO{i}", a), (f"MO{i}", m)]
        out.append(("bias", self.bias))
        return out

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma,
            "components": dict(self.items()),
            "total": self.total,
            "discrepancy": self.discrepancy,
        }


LEDGER_TRACE = TraceRequest(ao="all", mo="all", ap=(), positions="last")


def ledger_from_trace(trace: TraceRecord, direction: ContrastDirection, model: Transformer) -> ContributionLedger:
    L = model.config.n_layers
    r = trace.last
    missing = [i for i in range(L) if i not in trace.ao or i not in trace.mo]
    if missing or trace.final_scale is None:
        raise DataError(f"trace lacks components for layers {[i + 1 for i in missing]}")
    sigma = float(trace.final_scale[r])
    rows = np.stack([trace.embedding[r]] + [trace.ao[i][r] for i in range(L)] + [trace.mo[i][r] for i in range(L)])
    c = _contributions(rows, direction, sigma, model)
    lb = lens_bias(model)
    bias = float(lb[direction.minus_id]) - float(lb[direction.plus_id])
    total = float(trace.logits[direction.minus_id]) - float(trace.logits[direction.plus_id])
    return ContributionLedger(sigma, float(c[0]), tuple(float(v) for v in c[1 : L + 1]), tuple(float(v) for v in c[L + 1 :]), bias, total)


def contribution_ledger(model: Transformer, ids, minus_id: int, plus_id: int, plan=None) -> ContributionLedger:
    """Ledger of Δ(P; y-, y+) for one prompt (optionally under an intervention plan)."""
    _, rec = model.forward(ids, LEDGER_TRACE, plan)
    return ledger_from_trace(rec, ContrastDirection.for_answers(model, minus_id, plus_id), model)


def contrastive_scores(trace_a: TraceRecord, trace_b: TraceRecord, direction: ContrastDirection, model: Transformer) -> dict:
    """``C(x, P_A) - C(x, P_B)`` per component, each run using its own sigma."""
    la = ledger_from_trace(trace_a, direction, model)
    lb = ledger_from_trace(trace_b, direction, model)
    return contrast_ledgers(la, lb)


def contrast_ledgers(la: ContributionLedger, lb: ContributionLedger) -> dict:
    b = dict(lb.items())
    return {k: v - b[k] for k, v in la.items()}


def mlp_scores(scores: dict, n_layers: int) -> dict:
    """0-based layer -> score of that layer's MLP."""
    return {i: scores[f"MO{i + 1}"] for i in range(n_layers)}


def _top_layers(scores: dict, n: int) -> list:
    ranked = sorted(scores, key=lambda k: (-scores[k], k))
    return ranked[: min(n, len(ranked))]


def select_critical_mlps(setting1: dict, setting2: dict, top_n: int = 10) -> list:
    """Layers in both settings' top-``top_n`` MLPs (ties go to the lower layer)."""
    if set(setting1) != set(setting2):
        raise DataError("score maps cover different layers")
    return sorted(set(_top_layers(setting1, top_n)) & set(_top_layers(setting2, top_n)))


# ---------------------------------------------------------------------------
# sparse autoencoders


@dataclass(frozen=True)
class SAEModel:
    """``alpha = act(x @ W_enc + b_enc)``, ``x_hat = alpha @ W_dec + b_dec``.

    ``activation`` is ``"relu"`` or ``"topk"``; top-K keeps the K largest
    pre-activations (ties to the lower index) and then applies ReLU.
    """

    W_enc: np.ndarray  # [d, D]
    b_enc: np.ndarray  # [D]
    W_dec: np.ndarray  # [D, d]
    b_dec: np.ndarray  # [d]
    activation: str = "relu"
    k: int | None = None

    def __post_init__(self):
        d, D = self.W_enc.shape
        if self.W_dec.shape != (D, d) or self.b_enc.shape != (D,) or self.b_dec.shape != (d,):
            raise ShapeError("inconsistent SAE tensor shapes")
        if self.activation not in ("relu", "topk"):
            raise ValueError(f"unknown SAE activation {self.activation!r}")
        if self.activation == "topk" and not (self.k and 1 <= self.k <= D):
            raise ValueError("top-k SAE needs 1 <= k <= latent count")

    @property
    def d_model(self) -> int:
        return self.W_enc.shape[0]

    @property
    def n_latents(self) -> int:
        return self.W_enc.shape[1]


def sae_encode(sae: SAEModel, x) -> np.ndarray:
    x = T.as_tensor(x)
    if x.shape[-1] != sae.d_model:
        raise ShapeError(f"SAE expects dimension {sae.d_model}, got {x.shape[-1]}")
    pre = T.matmul(x, sae.W_enc) + sae.b_enc
    if sae.activation == "relu":
        return np.maximum(pre, 0)
    out = np.zeros_like(pre)
    for idx in np.ndindex(pre.shape[:-1]):
        keep, _ = T.topk(pre[idx], sae.k)
        out[idx][keep] = np.maximum(pre[idx][keep], 0)
    return out


def sae_decode(sae: SAEModel, alpha) -> np.ndarray:
    return T.matmul(T.as_tensor(alpha), sae.W_dec) + sae.b_dec


def save_sae(path, sae: SAEModel) -> None:
    meta = {SAE_META_KEY: json.dumps({"activation": sae.activation, "k": sae.k})}
    save_tensors(path, {"W_enc": sae.W_enc, "b_enc": sae.b_enc, "W_dec": sae.W_dec, "b_dec": sae.b_dec}, meta)


def load_sae(path) -> SAEModel:
    tensors, meta = load_tensors(path)
    missing = [n for n in ("W_enc", "b_enc", "W_dec", "b_dec") if n not in tensors]
    if missing:
        raise ContainerError(f"{path}: missing tensor: {missing[0]}")
    info = json.loads(meta.get(SAE_META_KEY, "{}"))
    return SAEModel(
        tensors["W_enc"], tensors["b_enc"], tensors["W_dec"], tensors["b_dec"], info.get("activation", "relu"), info.get("k")
    )


def load_sae_dir(directory, n_layers: int) -> dict:
    """``{0-based layer: SAEModel}`` from files named ``layer_<1-based>.safetensors``."""
    out = {}
    for i in range(n_layers):
        p = Path(directory) / f"layer_{i + 1}.safetensors"
        if p.exists():
            out[i] = load_sae(p)
    if not out:
        raise DataError(f"no SAE files found in {directory}")
    return out


def random_sae(d_model: int, n_latents: int, seed: int, activation: str = "relu", k: int | None = None, scale=0.1) -> SAEModel:
    """Seeded Gaussian SAE for tests and the toy pipeline."""
    rng = np.random.default_rng(seed)
    f = lambda *s: (rng.standard_normal(s) * scale).astype(np.float32)  # noqa: E731
    return SAEModel(f(d_model, n_latents), f(n_latents), f(n_latents, d_model), f(d_model) * 0.1, activation, k)


@dataclass(frozen=True)
class LatentAttribution:
    layer: int
    alpha: np.ndarray
    scores: np.ndarray  # per-latent contribution
    error: float  # reconstruction error plus decoder bias
    total: float  # C(MO_i)

    @property
    def closure(self) -> float:
        return self.total - (float(self.scores.sum()) + self.error)

    def ranked(self, n: int = 10) -> list[tuple[int, float]]:
        idx, vals = T.topk(self.scores, min(n, self.scores.size))
        return [(int(i), float(v)) for i, v in zip(idx, vals)]


def latent_attribution(mo, sae: SAEModel, direction: ContrastDirection, sigma: float, model: Transformer, layer: int = -1) -> LatentAttribution:
    """Split ``C(MO_i)`` over SAE latents plus one error term.

    The error term is the contribution of ``MO_i - x_hat`` plus that of the
    decoder bias, so the latents only receive input-dependent signal.
    """
    mo = T.as_tensor(mo)
    if mo.shape != (sae.d_model,):
        raise ShapeError(f"MLP output has shape {mo.shape}, SAE expects ({sae.d_model},)")
    alpha = sae_encode(sae, mo)
    x_hat = sae_decode(sae, alpha)
    per_latent = _contributions(sae.W_dec, direction, sigma, model)
    scores = alpha.astype(np.float64) * per_latent
    err = _contributions(np.stack([mo - x_hat, sae.b_dec]), direction, sigma, model)
    total = component_contribution(mo, direction, sigma, model)
    return LatentAttribution(layer, alpha, scores, float(err.sum()), total)


def explain_latents(sae: SAEModel, latents: Sequence[int], model: Transformer, k: int = 10) -> dict:
    """Self-norm lens readout of each latent's decoder row."""
    return {int(j): readout(sae.W_dec[j], model, k, signal="latent", position=-1) for j in latents}
