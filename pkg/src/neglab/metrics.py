"""Logit-difference evaluation: accuracies, sensitivity, surrogate accuracy,
the permutation sanity check, attention-sink mass and path-patch flip rates."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import corpus
from .corpus import DatasetEntry
from .errors import ConfigError, DataError, ShapeError
from .interventions import InterventionPlan, build_path_patch_plan
from .model.answers import answer_readout
from .model.tokenizer import Tokenizer
from .model.transformer import TraceRequest, Transformer
from .model.weights import load_weights
from .parallel import ordered_map


def logit_diff(logits, a: int, b: int) -> float:
    """``logits[a] - logits[b]``."""
    logits = np.asarray(logits)
    v = logits.shape[-1]
    for t in (a, b):
        if not 0 <= int(t) < v:
            raise ShapeError(f"token id {t} outside vocabulary of size {v}")
    return float(logits[a]) - float(logits[b])


@dataclass(frozen=True)
class PreparedEntry:
    """Token-level view of an entry: the two readout prompts and the compared ids.

    When the answers share leading tokens the shared prefix is appended to
    both prompts and the first diverging tokens are compared.
    """

    entry: DatasetEntry
    plus_ids: tuple
    minus_ids: tuple
    plus_id: int
    minus_id: int

    @classmethod
    def build(cls, entry: DatasetEntry, tokenizer: Tokenizer) -> "PreparedEntry":
        prefix, a, b = answer_readout(entry.y_plus, entry.y_minus, tokenizer)
        p = corpus.prompt_ids(entry.p_plus, tokenizer) + prefix
        m = corpus.prompt_ids(entry.p_minus, tokenizer) + prefix
        return cls(entry, tuple(p), tuple(m), a, b)


def prepare(entries: Sequence[DatasetEntry], tokenizer: Tokenizer) -> list[PreparedEntry]:
    return [PreparedEntry.build(e, tokenizer) for e in entries]


@dataclass(frozen=True)
class EntryScore:
    id: str
    delta_plus: float  # Δ(P+; y+, y-)
    delta_minus: float  # Δ(P-; y-, y+)

    @property
    def pos_correct(self) -> bool:
        return self.delta_plus > 0

    @property
    def neg_correct(self) -> bool:
        return self.delta_minus > 0

    @property
    def sensitive(self) -> bool:
        # Δ(P-; y-, y+) > Δ(P+; y-, y+) = -delta_plus
        return self.delta_minus > -self.delta_plus


def score_from_logits(pe: PreparedEntry, plus_logits, minus_logits, plus_id=None, minus_id=None) -> EntryScore:
    a = pe.plus_id if plus_id is None else plus_id
    b = pe.minus_id if minus_id is None else minus_id
    return EntryScore(pe.entry.id, logit_diff(plus_logits, a, b), logit_diff(minus_logits, b, a))


@dataclass(frozen=True)
class EvalResult:
    scores: tuple

    @property
    def n(self) -> int:
        return len(self.scores)

    def _mean(self, attr: str) -> float:
        if not self.scores:
            return float("nan")
        return sum(1 for s in self.scores if getattr(s, attr)) / len(self.scores)

    @property
    def acc_pos(self) -> float:
        return self._mean("pos_correct")

    @property
    def acc_neg(self) -> float:
        return self._mean("neg_correct")

    @property
    def sensitivity(self) -> float:
        return self._mean("sensitive")

    def summary(self) -> dict:
        return {"n": self.n, "acc_pos": self.acc_pos, "acc_neg": self.acc_neg, "sensitivity": self.sensitivity}

    def rows(self) -> list[list]:
        return [
            [s.id, repr(s.delta_plus), repr(s.delta_minus), int(s.pos_correct), int(s.neg_correct), int(s.sensitive)]
            for s in self.scores
        ]

    HEADER = ["id", "delta_plus", "delta_minus", "pos_correct", "neg_correct", "sensitive"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        w.writerows(self.rows())
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)


LogitsFn = Callable[[Sequence[int]], np.ndarray]


def _plain(model, plan: InterventionPlan | None) -> LogitsFn:
    return lambda ids: model.last_logits(ids, plan)


def evaluate_prepared(
    prepared: Sequence[PreparedEntry],
    logits_fn: LogitsFn,
    workers: int = 1,
) -> EvalResult:
    def one(pe: PreparedEntry) -> EntryScore:
        return score_from_logits(pe, logits_fn(pe.plus_ids), logits_fn(pe.minus_ids))

    return EvalResult(tuple(ordered_map(one, prepared, workers)))


def evaluate(
    entries: Sequence[DatasetEntry],
    model,
    tokenizer: Tokenizer,
    plan: InterventionPlan | None = None,
    workers: int = 1,
) -> EvalResult:
    """Acc+, Acc- and sensitivity at the last prompt position.

    ``model`` is anything with ``last_logits(ids, plan)``. Ties count as
    failures for every indicator.
    """
    if not entries:
        raise DataError("empty dataset")
    return evaluate_prepared(prepare(entries, tokenizer), _plain(model, plan), workers)


def evaluate_multi(
    prepared: Sequence[PreparedEntry],
    multi_fn: Callable[[Sequence[int]], dict],
    workers: int = 1,
) -> dict:
    """Several evaluations sharing forward passes.

    ``multi_fn(ids)`` returns ``{key: logits}``; the result maps each key to
    an :class:`EvalResult` in the order keys first appear.
    """

    def one(pe: PreparedEntry):
        lp, lm = multi_fn(pe.plus_ids), multi_fn(pe.minus_ids)
        return {key: score_from_logits(pe, lp[key], lm[key]) for key in lp}

    per_entry = ordered_map(one, prepared, workers)
    keys = list(per_entry[0]) if per_entry else []
    return {key: EvalResult(tuple(d[key] for d in per_entry)) for key in keys}


# ---------------------------------------------------------------------------
# multi-answer surrogate


def _set_ids(answers, tokenizer: Tokenizer) -> list[int]:
    ids = []
    for a in answers:
        toks = tokenizer.encode(a)
        if not toks:
            raise DataError(f"answer {a!r} tokenizes to nothing")
        ids.append(toks[0])
    return ids


def _mean_logit(logits, ids: list[int]) -> float:
    if not ids:
        raise DataError("empty candidate set")
    if len(ids) == 1:
        return float(logits[ids[0]])
    return float(np.mean(np.asarray(logits, dtype=np.float64)[ids]))


def surrogate_score(entry_id: str, plus_logits, minus_logits, plus_ids: list[int], minus_ids: list[int]) -> EntryScore:
    """Entry score with each answer's logit replaced by its set's mean logit."""
    dp = _mean_logit(plus_logits, plus_ids) - _mean_logit(plus_logits, minus_ids)
    dm = _mean_logit(minus_logits, minus_ids) - _mean_logit(minus_logits, plus_ids)
    return EntryScore(entry_id, dp, dm)


def surrogate_evaluate(
    entries: Sequence[DatasetEntry],
    model,
    tokenizer: Tokenizer,
    plan: InterventionPlan | None = None,
    workers: int = 1,
) -> EvalResult:
    """Accuracies on candidate-set mean logits, read at the plain prompts.

    Each candidate contributes the logit of its first token. Entries without
    answer sets are an error.
    """
    if not entries:
        raise DataError("empty dataset")
    jobs = []
    for e in entries:
        if not e.has_answer_sets:
            raise DataError(f"{e.id}: no answer sets")
        jobs.append(
            (
                e.id,
                corpus.prompt_ids(e.p_plus, tokenizer),
                corpus.prompt_ids(e.p_minus, tokenizer),
                _set_ids(e.y_plus_set, tokenizer),
                _set_ids(e.y_minus_set, tokenizer),
            )
        )

    def one(job):
        eid, p, m, pi, mi = job
        return surrogate_score(eid, model.last_logits(p, plan), model.last_logits(m, plan), pi, mi)

    return EvalResult(tuple(ordered_map(one, jobs, workers)))


# ---------------------------------------------------------------------------
# permutation sanity check


@dataclass(frozen=True)
class PermutationResult:
    statistic: float
    null: np.ndarray
    p_value: float
    n_resamples: int

    def summary(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "n_resamples": self.n_resamples,
            "null_mean": float(self.null.mean()) if self.null.size else None,
        }


def _uniform_pairs(rng: np.random.Generator, n_entries: int, pool_size: int) -> tuple[np.ndarray, np.ndarray]:
    a = rng.integers(0, pool_size, size=n_entries)
    b = rng.integers(0, pool_size - 1, size=n_entries)
    b = b + (b >= a)
    return a, b


def permutation_sanity_check(
    entries: Sequence[DatasetEntry],
    model,
    tokenizer: Tokenizer,
    n_resamples: int = 500,
    seed: int = 0,
    pool: Sequence[int] | None = None,
    sampler=None,
    workers: int = 1,
) -> PermutationResult:
    """Empirical p-value of the negation-sensitivity statistic.

    The statistic is the mean over entries of Δ(P-; y-, y+) - Δ(P+; y-, y+).
    Each resample replaces every entry's answer pair by two distinct tokens
    drawn uniformly from ``pool`` (by default the first tokens of every
    answer in the corpus), scored at the same readout prompts as the true
    pair. ``p = (1 + #{X* >= X}) / (1 + R)``.

    ``sampler(rng, n_entries, pool)`` may override the draw; it returns two
    integer arrays of token ids ``(a, b)`` standing in for ``(y-, y+)``.
    """
    if not entries:
        raise DataError("empty dataset")
    prepared = prepare(entries, tokenizer)
    if pool is None:
        pool = sorted({tokenizer.encode(a)[0] for a in corpus.answer_vocabulary(entries)})
    pool = np.asarray(pool, dtype=np.int64)
    if pool.size < 2:
        raise DataError("answer pool needs at least two tokens")

    outs = ordered_map(lambda pe: (model.last_logits(pe.plus_ids), model.last_logits(pe.minus_ids)), prepared, workers)
    lp = np.stack([o[0] for o in outs]).astype(np.float64)
    lm = np.stack([o[1] for o in outs]).astype(np.float64)
    rows = np.arange(len(prepared))

    def stat(a, b) -> float:
        return float(np.mean((lm[rows, a] - lm[rows, b]) - (lp[rows, a] - lp[rows, b])))

    x = stat(np.array([pe.minus_id for pe in prepared]), np.array([pe.plus_id for pe in prepared]))
    rng = np.random.default_rng(seed)
    null = np.empty(n_resamples, dtype=np.float64)
    for r in range(n_resamples):
        if sampler is None:
            ia, ib = _uniform_pairs(rng, len(prepared), pool.size)
            a, b = pool[ia], pool[ib]
        else:
            a, b = (np.asarray(v) for v in sampler(rng, len(prepared), pool))
        null[r] = stat(a, b)
    p = (1 + int(np.sum(null >= x))) / (1 + n_resamples)
    return PermutationResult(x, null, p, n_resamples)


# ---------------------------------------------------------------------------
# attention mass on the sink set


@dataclass(frozen=True)
class AttentionMassStat:
    mean: float
    per_layer: tuple  # mean mass per 0-based layer
    n_prompts: int

    def summary(self) -> dict:
        return {"mean": self.mean, "per_layer": list(self.per_layer), "n_prompts": self.n_prompts}


def prompt_sink_mass(model: Transformer, ids) -> np.ndarray:
    """Per-layer head-averaged attention of the last query on keys {0, last}."""
    _, rec = model.forward(ids, TraceRequest(ao=(), mo=(), ap="all", positions="last"))
    t = len(rec.tokens)
    out = np.empty(model.config.n_layers, dtype=np.float64)
    for i in range(model.config.n_layers):
        row = rec.ap[i][:, 0, :].astype(np.float64)  # [H, T]
        mass = row[:, 0] + (row[:, t - 1] if t > 1 else 0.0)
        out[i] = mass.mean()
    return out


def attention_sink_mass_prompts(model: Transformer, prompts: Sequence[Sequence[int]], workers: int = 1) -> AttentionMassStat:
    if not prompts:
        raise DataError("no prompts")
    per = np.stack(ordered_map(lambda ids: prompt_sink_mass(model, ids), prompts, workers))
    per_layer = per.mean(axis=0)
    return AttentionMassStat(float(per.mean()), tuple(float(v) for v in per_layer), len(prompts))


def attention_sink_mass(entries, model: Transformer, tokenizer: Tokenizer, workers: int = 1) -> AttentionMassStat:
    """Sink mass averaged over heads, layers and both prompts of every entry."""
    prompts = []
    for e in entries:
        prompts.append(corpus.prompt_ids(e.p_plus, tokenizer))
        prompts.append(corpus.prompt_ids(e.p_minus, tokenizer))
    return attention_sink_mass_prompts(model, prompts, workers)


# ---------------------------------------------------------------------------
# checkpoints


def accuracy_over_checkpoints(paths, entries, tokenizer: Tokenizer, workers: int = 1) -> list[EvalResult]:
    """One :class:`EvalResult` per weight file, in the given order."""
    paths = list(paths)
    if not paths:
        return []
    results = []
    first = None
    for path in paths:
        w = load_weights(path)
        if first is None:
            first = w.config
        elif w.config != first:
            raise ConfigError(f"{path}: model config differs from {paths[0]}")
        results.append(evaluate(entries, Transformer(w), tokenizer, workers=workers))
    return results


# ---------------------------------------------------------------------------
# path patching


@dataclass(frozen=True)
class FlipPoint:
    targets: tuple  # 0-based layers
    eligible: int
    flipped: int

    @property
    def rate(self) -> float | None:
        return None if self.eligible == 0 else self.flipped / self.eligible


def flip_rate(
    entries: Sequence[DatasetEntry],
    model: Transformer,
    tokenizer: Tokenizer,
    target_sets: Sequence[Sequence[int]],
    donor: str = "plus",
    workers: int = 1,
) -> list[FlipPoint]:
    """Fraction of correctly answered negative prompts whose preference flips.

    For each target set, attention outputs at the last position of those
    layers come from the donor run (``"plus"`` for P+, ``"self"`` for P-
    itself, a no-op check) and the remaining layers keep P-'s patterns.
    Only entries with Δ(P-; y-, y+) > 0 on the unpatched run count.
    """
    L = model.config.n_layers
    req = TraceRequest(ao="all", mo=(), ap="all", positions="last")
    targets = [tuple(sorted(set(int(i) for i in s))) for s in target_sets]

    def one(pe: PreparedEntry) -> list[bool] | None:
        _, rec_m = model.forward(pe.minus_ids, req)
        if logit_diff(rec_m.logits, pe.minus_id, pe.plus_id) <= 0:
            return None
        if donor == "plus":
            _, rec_p = model.forward(pe.plus_ids, req)
        elif donor == "self":
            rec_p = rec_m
        else:
            raise ValueError(f"unknown donor {donor!r}")
        flips = []
        for s in targets:
            plan = build_path_patch_plan(rec_p, rec_m, s, L)
            lg = model.last_logits(pe.minus_ids, plan)
            flips.append(logit_diff(lg, pe.plus_id, pe.minus_id) > 0)
        return flips

    per = ordered_map(one, prepare(entries, tokenizer), workers)
    eligible = [f for f in per if f is not None]
    return [FlipPoint(s, len(eligible), sum(1 for f in eligible if f[j])) for j, s in enumerate(targets)]
