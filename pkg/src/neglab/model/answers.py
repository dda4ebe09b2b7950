from __future__ import annotations

from ..errors import DataError
from .tokenizer import Tokenizer


def first_divergence_position(y_plus: str, y_minus: str, tokenizer: Tokenizer) -> int:
    """Index of the first token where the two answers' tokenizations differ.

    If one sequence is a prefix of the other, the prefix length is returned.
    """
    a, b = tokenizer.encode(y_plus), tokenizer.encode(y_minus)
    if not a or not b:
        raise DataError("answers must tokenize to non-empty sequences")
    if a == b:
        raise DataError(f"identical answers {y_plus!r} / {y_minus!r}")
    k = 0
    while k < min(len(a), len(b)) and a[k] == b[k]:
        k += 1
    return k


def answer_readout(y_plus: str, y_minus: str, tokenizer: Tokenizer) -> tuple[list[int], int, int]:
    """``(shared_prefix_ids, plus_id, minus_id)`` compared at the divergence point.

    Logits are read after the prompt followed by the shared prefix.
    """
    k = first_divergence_position(y_plus, y_minus, tokenizer)
    a, b = tokenizer.encode(y_plus), tokenizer.encode(y_minus)
    if k >= len(a) or k >= len(b):
        raise DataError(f"answer {y_plus!r} / {y_minus!r}: one is a token prefix of the other")
    return a[:k], a[k], b[k]
