"""Dense float32 kernels used by the transformer engine and the analysis code.

All functions are pure and operate on ``numpy.ndarray`` values. Outputs are
float32 and are checked for NaN/Inf; a non-finite result raises
:class:`~neglab.errors.NonFiniteError` instead of silently propagating.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError, ShapeError

DTYPE = np.float32
MASK_SENTINEL = -np.inf


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def _finite(out: np.ndarray, name: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    return out


def matmul(a, b) -> np.ndarray:
    """Matrix product ``a @ b`` in float32.

    Batched operands follow numpy broadcasting over leading dimensions. The
    reduction order is fixed by the BLAS kernel for a given shape, so repeated
    calls on the same inputs are bit-identical.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != (b.shape[-2] if b.ndim > 1 else b.shape[0]):
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return _finite(np.matmul(a, b), "matmul")


def causal_mask(t: int) -> np.ndarray:
    """Boolean ``[t, t]`` mask, True where key <= query."""
    return np.tril(np.ones((t, t), dtype=bool))


def masked_softmax_rows(scores, mask=None) -> np.ndarray:
    """Row-wise softmax over the last axis restricted to allowed keys.

    ``mask`` is a boolean array broadcastable to ``scores`` with True marking
    allowed positions; ``None`` means the causal mask over the last two axes.
    Scores already equal to -inf count as masked. Disallowed entries are set
    to -inf before exponentiation and come out as exact zeros.
    """
    scores = as_tensor(scores)
    if scores.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise ShapeError(f"expected square score matrices, got {scores.shape}")
    if mask is None:
        mask = causal_mask(scores.shape[-1])
    mask = np.broadcast_to(mask, scores.shape) & ~np.isneginf(scores)
    if not mask.any(axis=-1).all():
        raise ShapeError("softmax row with every key masked")
    masked = np.where(mask, scores, DTYPE(MASK_SENTINEL))
    shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    e = np.where(mask, e, DTYPE(0.0))
    out = e / e.sum(axis=-1, keepdims=True)
    return _finite(out.astype(DTYPE, copy=False), "masked_softmax_rows")


def _check_vec(x: np.ndarray, p: np.ndarray, name: str) -> None:
    if p.shape != (x.shape[-1],):
        raise ShapeError(f"{name} has shape {p.shape}, expected ({x.shape[-1]},)")


def rms_scale(x, eps: float) -> np.ndarray:
    """sqrt(mean(x^2) + eps) over the last axis (keepdims)."""
    x = as_tensor(x)
    return np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + DTYPE(eps))


def rms_norm(x, gamma, eps: float = 1e-5) -> np.ndarray:
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    if x.shape[-1] == 0:
        raise ShapeError("rms_norm on empty vector")
    _check_vec(x, gamma, "gamma")
    return _finite(x / rms_scale(x, eps) * gamma, "rms_norm")


def layer_scale(x, eps: float) -> np.ndarray:
    """sqrt(var(x) + eps) over the last axis (keepdims)."""
    x = as_tensor(x)
    c = x - x.mean(axis=-1, keepdims=True)
    return np.sqrt(np.mean(c * c, axis=-1, keepdims=True) + DTYPE(eps))


def layer_norm(x, gamma, beta=None, eps: float = 1e-5) -> np.ndarray:
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    _check_vec(x, gamma, "gamma")
    c = x - x.mean(axis=-1, keepdims=True)
    out = c / layer_scale(x, eps) * gamma
    if beta is not None:
        beta = as_tensor(beta)
        _check_vec(x, beta, "beta")
        out = out + beta
    return _finite(out, "layer_norm")


_GELU_C = np.float32(np.sqrt(2.0 / np.pi))


def gelu(x) -> np.ndarray:
    """GELU, tanh approximation (the form used by GPT-2 style checkpoints)."""
    x = as_tensor(x)
    out = DTYPE(0.5) * x * (DTYPE(1.0) + np.tanh(_GELU_C * (x + DTYPE(0.044715) * x * x * x)))
    return _finite(out, "gelu")


def silu(x) -> np.ndarray:
    x = as_tensor(x)
    return _finite(x / (DTYPE(1.0) + np.exp(-x)), "silu")


def rotary_angles(positions, d_head: int, base: float = 10000.0) -> np.ndarray:
    """``[len(positions), d_head // 2]`` rotation angles."""
    if d_head % 2:
        raise ShapeError(f"rotary needs an even head dimension, got {d_head}")
    inv_freq = 1.0 / (base ** (np.arange(0, d_head, 2, dtype=np.float64) / d_head))
    return np.outer(np.asarray(positions, dtype=np.float64), inv_freq)


def rotary_apply(x, base: float = 10000.0, positions=None, style: str = "interleaved") -> np.ndarray:
    """Rotate query/key vectors by position.

    ``x`` has shape ``[..., T, d_head]``. ``style="interleaved"`` rotates the
    adjacent pairs (0,1), (2,3), ...; ``style="half"`` pairs dimension i with
    i + d_head/2 (the layout used by Hugging Face Llama checkpoints).
    """
    x = as_tensor(x)
    t, dh = x.shape[-2], x.shape[-1]
    if positions is None:
        positions = np.arange(t)
    ang = rotary_angles(positions, dh, base)
    cos = np.cos(ang).astype(DTYPE)
    sin = np.sin(ang).astype(DTYPE)
    out = np.empty_like(x)
    if style == "interleaved":
        x0, x1 = x[..., 0::2], x[..., 1::2]
        out[..., 0::2] = x0 * cos - x1 * sin
        out[..., 1::2] = x0 * sin + x1 * cos
    elif style == "half":
        h = dh // 2
        x0, x1 = x[..., :h], x[..., h:]
        out[..., :h] = x0 * cos - x1 * sin
        out[..., h:] = x0 * sin + x1 * cos
    else:
        raise ValueError(f"unknown rotary style {style!r}")
    return _finite(out, "rotary_apply")


def _select(v, k: int, largest: bool) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(v)
    if v.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {v.shape}")
    n = v.shape[0]
    if k > n or k < 0:
        raise ShapeError(f"k={k} out of range for n={n}")
    key = -v if largest else v
    # stable sort keeps the lower index first among ties
    idx = np.argsort(key, kind="stable")[:k]
    return idx, v[idx]


def topk(v, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the k largest entries, descending; ties go to the lower index."""
    return _select(v, k, largest=True)


def bottomk(v, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the k smallest entries, ascending; ties go to the lower index."""
    return _select(v, k, largest=False)
