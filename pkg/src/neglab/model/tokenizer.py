"""Byte-level BPE tokenizer (GPT-2 file conventions).

The vocabulary JSON maps printable token strings (bytes passed through the
usual byte-to-unicode table) to ids, and the merges file lists one merge per
line in priority order, optionally preceded by a ``#version`` line.
"""

from __future__ import annotations

import json
from collections import Counter
from functools import lru_cache
from pathlib import Path

import regex

from ..errors import TokenizerError

PRETOKENIZE = regex.compile(r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+""")


@lru_cache(maxsize=None)
def bytes_to_unicode() -> dict[int, str]:
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


def _pieces(data: bytes) -> list[bytes]:
    # surrogateescape keeps invalid UTF-8 bytes addressable by the regex
    text = data.decode("utf-8", errors="surrogateescape")
    return [m.encode("utf-8", errors="surrogateescape") for m in PRETOKENIZE.findall(text)]


class Tokenizer:
    def __init__(
        self,
        vocab: dict[str, int],
        merges: list[tuple[str, str]],
        bos_token: str | None = None,
        special_tokens: tuple[str, ...] = (),
    ):
        self.vocab = dict(vocab)
        self.id_to_token = {i: t for t, i in self.vocab.items()}
        if len(self.id_to_token) != len(self.vocab):
            raise TokenizerError("vocabulary ids are not unique")
        self.merges = list(merges)
        self.ranks = {pair: r for r, pair in enumerate(self.merges)}
        self.byte_encoder = bytes_to_unicode()
        self.byte_decoder = {c: b for b, c in self.byte_encoder.items()}
        missing = [c for c in self.byte_encoder.values() if c not in self.vocab]
        if missing:
            raise TokenizerError(f"vocabulary lacks {len(missing)} base byte tokens")
        self.special_tokens = set(special_tokens)
        if bos_token is not None:
            self.special_tokens.add(bos_token)
        for tok in self.special_tokens:
            if tok not in self.vocab:
                raise TokenizerError(f"special token {tok!r} not in vocabulary")
        self.bos_token = bos_token
        self.bos_id = self.vocab[bos_token] if bos_token is not None else None
        self._cache: dict[bytes, tuple[int, ...]] = {}

    @classmethod
    def from_files(cls, vocab_path, merges_path, bos_token: str | None = None, special_tokens=()) -> "Tokenizer":
        vocab = json.loads(Path(vocab_path).read_text(encoding="utf-8"))
        merges = []
        for line in Path(merges_path).read_text(encoding="utf-8").splitlines():
            if not line or line.startswith("#version"):
                continue
            a, b = line.split(" ")
            merges.append((a, b))
        return cls(vocab, merges, bos_token=bos_token, special_tokens=tuple(special_tokens))

    def save(self, vocab_path, merges_path) -> None:
        Path(vocab_path).write_text(json.dumps(self.vocab, ensure_ascii=False, indent=0), encoding="utf-8")
        lines = ["#version: 0.2"] + [f"{a} {b}" for a, b in self.merges]
        Path(merges_path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def __len__(self) -> int:
        return len(self.vocab)

    def _bpe(self, piece: bytes) -> tuple[int, ...]:
        hit = self._cache.get(piece)
        if hit is not None:
            return hit
        word = [self.byte_encoder[b] for b in piece]
        while len(word) > 1:
            best = None
            best_rank = None
            for i in range(len(word) - 1):
                r = self.ranks.get((word[i], word[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            a, b = word[best], word[best + 1]
            merged = []
            i = 0
            while i < len(word):
                if i < len(word) - 1 and word[i] == a and word[i + 1] == b:
                    merged.append(a + b)
                    i += 2
                else:
                    merged.append(word[i])
                    i += 1
            word = merged
        try:
            ids = tuple(self.vocab[w] for w in word)
        except KeyError as exc:
            raise TokenizerError(f"merge result {exc.args[0]!r} missing from vocabulary") from None
        self._cache[piece] = ids
        return ids

    def encode(self, text: str | bytes) -> list[int]:
        """Token ids for ``text``. Special-token strings are not parsed out."""
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        out: list[int] = []
        for piece in _pieces(data):
            out.extend(self._bpe(piece))
        return out

    def encode_with_offsets(self, text: str) -> list[tuple[int, int, int]]:
        """``(id, byte_start, byte_end)`` for every token of ``text``."""
        data = text.encode("utf-8")
        out = []
        pos = 0
        for piece in _pieces(data):
            for tid in self._bpe(piece):
                n = len(self.token_bytes(tid))
                out.append((tid, pos, pos + n))
                pos += n
        return out

    def token_bytes(self, tid: int) -> bytes:
        try:
            tok = self.id_to_token[int(tid)]
        except KeyError:
            raise TokenizerError(f"unknown token id {tid}") from None
        if tok in self.special_tokens:
            return tok.encode("utf-8")
        return bytes(self.byte_decoder[c] for c in tok)

    def decode_bytes(self, ids) -> bytes:
        return b"".join(self.token_bytes(i) for i in ids)

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")


def train_bpe(texts, vocab_size: int, special_tokens: tuple[str, ...] = ()) -> Tokenizer:
    """Learn merges on ``texts`` until the vocabulary reaches ``vocab_size``.

    Most frequent pair wins; count ties go to the lexicographically smallest
    pair, so the result is a pure function of the input.
    """
    enc = bytes_to_unicode()
    words: Counter[tuple[str, ...]] = Counter()
    for text in texts:
        for piece in _pieces(text.encode("utf-8")):
            words[tuple(enc[b] for b in piece)] += 1
    vocab = {enc[b]: i for i, b in enumerate(sorted(enc))}
    merges: list[tuple[str, str]] = []
    n_target = vocab_size - len(special_tokens)
    while len(vocab) < n_target:
        pairs: Counter[tuple[str, str]] = Counter()
        for w, c in words.items():
            for i in range(len(w) - 1):
                pairs[(w[i], w[i + 1])] += c
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        new_tok = best[0] + best[1]
        if new_tok not in vocab:
            vocab[new_tok] = len(vocab)
        updated: Counter[tuple[str, ...]] = Counter()
        for w, c in words.items():
            if len(w) < 2:
                updated[w] += c
                continue
            out = []
            i = 0
            while i < len(w):
                if i < len(w) - 1 and (w[i], w[i + 1]) == best:
                    out.append(new_tok)
                    i += 2
                else:
                    out.append(w[i])
                    i += 1
            updated[tuple(out)] += c
        words = updated
    for tok in special_tokens:
        vocab[tok] = len(vocab)
    bos = special_tokens[0] if special_tokens else None
    return Tokenizer(vocab, merges, bos_token=bos, special_tokens=special_tokens)
