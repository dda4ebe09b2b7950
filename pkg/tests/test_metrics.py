import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from neglab import metrics
from neglab.errors import ConfigError, DataError, ShapeError
from neglab.model import Transformer, Weights, save_weights
from neglab.model.toy import TOY_SEED, init_weights

from conftest import tiny_model

GOLDEN = json.loads((Path(__file__).parent / "golden" / "toy.json").read_text())


def test_logit_diff_examples():
    lg = np.array([3.5, 1.5, 0.0])
    assert metrics.logit_diff(lg, 0, 0) == 0.0
    assert metrics.logit_diff(lg, 0, 1) == 2.0
    with pytest.raises(ShapeError):
        metrics.logit_diff(lg, 0, 3)


def test_sensitivity_single_entry():
    # Δ(P-; y-, y+) = 2 and Δ(P+; y-, y+) = -3, so Δ(P+; y+, y-) = 3
    s = metrics.EntryScore("e", delta_plus=3.0, delta_minus=2.0)
    res = metrics.EvalResult((s,))
    assert res.sensitivity == 1.0 and res.acc_pos == 1.0 and res.acc_neg == 1.0


def test_ties_are_not_counted():
    s = metrics.EntryScore("e", delta_plus=0.0, delta_minus=0.0)
    assert not s.pos_correct and not s.neg_correct and not s.sensitive
    # both prompts prefer y+ equally strongly: not sensitive
    assert not metrics.EntryScore("e", 1.0, -1.0).sensitive


def test_evaluate_matches_manual_logits(model, tok, entries):
    sub = entries[:12]
    res = metrics.evaluate(sub, model, tok)
    for e, s in zip(sub, res.scores):
        pe = metrics.PreparedEntry.build(e, tok)
        lp = model.last_logits(pe.plus_ids)
        lm = model.last_logits(pe.minus_ids)
        assert s.delta_plus == float(lp[pe.plus_id]) - float(lp[pe.minus_id])
        assert s.delta_minus == float(lm[pe.minus_id]) - float(lm[pe.plus_id])


def test_shared_prefix_answers_read_after_prefix(tok, entries):
    e = next(e for e in entries if e.y_plus == " New York")
    pe = metrics.PreparedEntry.build(e, tok)
    shared = tok.encode(" New")
    assert list(pe.plus_ids[-len(shared):]) == shared
    assert pe.plus_id == tok.encode(" New York")[1]


def test_evaluate_golden_and_workers(model, tok, entries):
    r1 = metrics.evaluate(entries, model, tok)
    r4 = metrics.evaluate(entries, model, tok, workers=4)
    assert r1.summary() == GOLDEN["eval"] == r4.summary()
    assert r1.to_csv() == r4.to_csv()


def test_evaluate_empty():
    with pytest.raises(DataError):
        metrics.evaluate([], None, None)


class TableModel:
    """``last_logits`` from a lookup keyed by the prompt tokens."""

    def __init__(self, table, vocab):
        self.table, self.vocab = table, vocab

    def last_logits(self, ids, plan=None):
        out = np.zeros(self.vocab, dtype=np.float32)
        for tid, v in self.table.get(tuple(ids), {}).items():
            out[tid] = v
        return out


def test_surrogate_reduces_to_evaluate_for_singletons(model, tok, entries):
    single = [
        replace(e, y_plus_set=(e.y_plus,), y_minus_set=(e.y_minus,))
        for e in entries
        if len(tok.encode(e.y_plus)) == 1 and len(tok.encode(e.y_minus)) == 1
    ][:20]
    assert single
    a = metrics.evaluate(single, model, tok)
    b = metrics.surrogate_evaluate(single, model, tok)
    assert a.scores == b.scores


def test_surrogate_uses_set_means(tok):
    lg = np.zeros(len(tok), dtype=np.float32)
    a, b, c = tok.encode(" cat")[0], tok.encode(" horse")[0], tok.encode(" toad")[0]
    lg[[a, b, c]] = [2.0, 4.0, 1.0]
    s = metrics.surrogate_score("e", lg, lg, [c], [a, b])
    assert s.delta_minus == 3.0 - 1.0 and s.delta_plus == 1.0 - 3.0


def test_surrogate_requires_sets(model, tok, entries):
    bare = next(e for e in entries if not e.has_answer_sets)
    with pytest.raises(DataError):
        metrics.surrogate_evaluate([bare], model, tok)


def _rig(tok, entries, margin=10.0):
    table = {}
    for pe in metrics.prepare(entries, tok):
        table[pe.minus_ids] = {pe.minus_id: margin}
        table.setdefault(pe.plus_ids, {})[pe.plus_id] = margin
    return TableModel(table, len(tok))


def test_permutation_rigged_margin(tok, entries):
    t0 = time.perf_counter()
    res = metrics.permutation_sanity_check(entries, _rig(tok, entries), tok, n_resamples=500, seed=3)
    assert time.perf_counter() - t0 < 5
    assert res.statistic == 20.0
    assert res.p_value == 1 / 501
    assert (res.null < res.statistic).all()


def test_permutation_degenerate_pool(tok, entries):
    prepared = metrics.prepare(entries, tok)
    true_a = np.array([pe.minus_id for pe in prepared])
    true_b = np.array([pe.plus_id for pe in prepared])
    res = metrics.permutation_sanity_check(
        entries, _rig(tok, entries), tok, n_resamples=50, sampler=lambda rng, n, pool: (true_a, true_b)
    )
    assert res.p_value == 1.0


def test_permutation_seeded(model, tok, entries):
    a = metrics.permutation_sanity_check(entries[:40], model, tok, n_resamples=50, seed=1)
    b = metrics.permutation_sanity_check(entries[:40], model, tok, n_resamples=50, seed=1, workers=3)
    assert a.p_value == b.p_value and np.array_equal(a.null, b.null)


def test_uniform_pairs_are_distinct():
    a, b = metrics._uniform_pairs(np.random.default_rng(0), 10_000, 5)
    assert (a != b).all() and set(a) == set(b) == set(range(5))


def _uniform_attention_model():
    m = tiny_model()
    t = {n: np.array(v) for n, v in m.weights.stored().items()}
    for i in range(m.config.n_layers):
        t[f"blocks.{i}.attn.W_Q"][:] = 0
        t[f"blocks.{i}.attn.W_K"][:] = 0
    return Transformer(Weights(m.config, t))


@pytest.mark.parametrize("T", [2, 4, 8, 16])
def test_uniform_attention_mass(T):
    m = _uniform_attention_model()
    mass = metrics.prompt_sink_mass(m, list(range(1, T + 1)))
    assert np.abs(mass - 2 / T).max() < 1e-6


def test_single_token_mass_is_one(model):
    assert np.abs(metrics.prompt_sink_mass(_uniform_attention_model(), [3]) - 1.0).max() < 1e-6
    assert np.abs(metrics.prompt_sink_mass(model, [3]) - 1.0).max() < 1e-6


def test_attention_mass_over_corpus(model, tok, entries):
    stat = metrics.attention_sink_mass(entries[:10], model, tok)
    assert stat.n_prompts == 20 and 0 < stat.mean <= 1 and len(stat.per_layer) == 4


def test_checkpoints(tmp_path, model, tok, entries):
    sub = entries[:16]
    a, b = tmp_path / "a.safetensors", tmp_path / "b.safetensors"
    save_weights(a, model.weights)
    save_weights(b, init_weights(model.config, TOY_SEED + 1))
    assert metrics.accuracy_over_checkpoints([], sub, tok) == []
    (one,) = metrics.accuracy_over_checkpoints([a], sub, tok)
    twice = metrics.accuracy_over_checkpoints([a, a], sub, tok)
    assert twice[0].scores == twice[1].scores == one.scores
    ra, rb = metrics.accuracy_over_checkpoints([a, b], sub, tok)
    assert ra.scores == one.scores and ra.scores != rb.scores
    small = tmp_path / "small.safetensors"
    save_weights(small, tiny_model().weights)
    with pytest.raises(ConfigError):
        metrics.accuracy_over_checkpoints([a, small], sub, tok)


def test_flip_rate_examples(model, tok, entries):
    L = model.config.n_layers
    empty, full = metrics.flip_rate(entries[:40], model, tok, [[], list(range(L))], donor="self")
    assert empty.rate == 0.0 and full.rate == 0.0 and empty.eligible == full.eligible > 0
    (plain,) = metrics.flip_rate(entries[:40], model, tok, [[]])
    assert plain.flipped == 0


def test_flip_rate_golden(model, tok, entries):
    g = GOLDEN["flip_rate"]
    pts = metrics.flip_rate(entries, model, tok, [tuple(t) for t in g["targets"]], workers=2)
    assert [p.rate for p in pts] == g["rates"]


def test_flip_rate_unknown_donor(model, tok, entries):
    with pytest.raises(ValueError):
        metrics.flip_rate(entries[:20], model, tok, [[0]], donor="other")
