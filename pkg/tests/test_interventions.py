import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neglab import corpus, metrics
from neglab.errors import PlanError
from neglab.interventions import (
    AttentionKnockout,
    AttentionSink,
    InterventionPlan,
    PatchAO,
    ZeroAO,
    ZeroMO,
    apply_knockout,
    apply_sink,
    build_path_patch_plan,
    cumulative_sink_plan,
    freeze_plan,
    sink_plan,
    window_layers,
    windowed_sink_plan,
)
from neglab import tensorops as T
from neglab.model import TraceRequest

from reference import reference_forward

TRACE = TraceRequest(ao="all", mo=(), ap="all", positions="last")


def test_sink_weights_examples():
    s = np.zeros((1, 4, 4), dtype=np.float32)
    p = T.masked_softmax_rows(apply_sink(s)[0])
    assert p[0].tolist() == [1.0, 0.0, 0.0, 0.0]
    assert p[3].tolist() == [0.5, 0.0, 0.0, 0.5]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(0, 3))
def test_sink_mass_on_first_and_self_is_one(t, seed):
    s = np.random.default_rng(seed).standard_normal((2, t, t)).astype(np.float32)
    p = T.masked_softmax_rows(apply_sink(s))
    rows = np.arange(t)
    mass = p[:, rows, 0] + np.where(rows > 0, p[:, rows, rows], 0)
    assert np.allclose(mass, 1.0, atol=1e-6)


def test_sink_only_touches_selected_rows_and_heads():
    s = np.random.default_rng(0).standard_normal((3, 5, 5)).astype(np.float32)
    out = apply_sink(s, positions=(4,), heads=[1])
    assert np.array_equal(out[[0, 2]], s[[0, 2]])
    assert np.array_equal(out[1, :4], s[1, :4])
    assert np.isinf(out[1, 4, 1:4]).all() and np.isfinite(out[1, 4, [0, 4]]).all()


def test_sink_idempotent():
    s = np.random.default_rng(1).standard_normal((2, 6, 6)).astype(np.float32)
    once = apply_sink(s)
    assert np.array_equal(apply_sink(once), once)


def test_knockout_empty_span_is_noop():
    s = np.random.default_rng(2).standard_normal((2, 5, 5)).astype(np.float32)
    assert np.array_equal(apply_knockout(s, "last", (2, 2)), s)
    out = apply_knockout(s, "last", (1, 3))
    assert np.isinf(out[:, 4, 1:3]).all() and np.array_equal(out[:, :4], s[:, :4])
    with pytest.raises(PlanError):
        apply_knockout(s, "last", (1, 9))


def test_cumulative_sink_plan_examples():
    L = 4
    (d,) = cumulative_sink_plan(L, L).directives
    assert d.layers == {L - 1}
    (d,) = cumulative_sink_plan(1, L).directives
    assert d.layers == set(range(L))
    with pytest.raises(PlanError):
        cumulative_sink_plan(L + 1, L)


def test_window_layers_examples():
    assert window_layers(14, 3, 32) == [13, 14, 15]
    assert window_layers(1, 3, 32) == [1, 2]
    assert window_layers(14, 1, 32) == [14]
    assert window_layers(32, 3, 32) == [31, 32]


def test_width_one_windows_cover_each_layer_once():
    L = 7
    covered = [l for c in range(1, L + 1) for l in window_layers(c, 1, L)]
    assert covered == list(range(1, L + 1))


def test_plan_validation(model):
    with pytest.raises(PlanError):
        model.forward([1, 2], plan=sink_plan([model.config.n_layers]))
    with pytest.raises(PlanError):
        InterventionPlan((ZeroAO({1}, "last"), PatchAO({1}, "last", {1: np.zeros(64)})))
    with pytest.raises(PlanError):
        AttentionKnockout({0}, "last", (3, 1))
    # different slots may share a layer
    InterventionPlan((ZeroAO({1}), ZeroMO({1}), AttentionSink({1})))


def _prompt(tok, text="An animal that is not an amphibian is a"):
    return corpus.prompt_ids(text, tok)


def test_path_patch_with_identical_traces_is_noop(model, tok):
    ids = _prompt(tok)
    base = model.last_logits(ids)
    _, rec = model.forward(ids, TRACE)
    L = model.config.n_layers
    for targets in ([], [1], [0, 1, 2, 3]):
        lg = model.last_logits(ids, build_path_patch_plan(rec, rec, targets, L))
        assert np.abs(lg - base).max() < 1e-4


def test_empty_targets_is_pure_freeze(model, tok):
    ids = _prompt(tok)
    _, rec = model.forward(ids, TRACE)
    plan = build_path_patch_plan(rec, rec, [], model.config.n_layers)
    assert {d.kind for d in plan.directives} == {"freeze_ap"}


def test_path_patch_matches_reference_splice(model, tok, entries):
    """Patched logits against a float64 forward that splices AO directly."""
    L = model.config.n_layers
    targets = [1, 2]
    checked = 0
    for e in entries[:24]:
        pe = metrics.PreparedEntry.build(e, tok)
        _, rp = model.forward(pe.plus_ids, TRACE)
        _, rm = model.forward(pe.minus_ids, TRACE)
        ours = model.last_logits(pe.minus_ids, build_path_patch_plan(rp, rm, targets, L))
        ref = reference_forward(
            model.weights,
            pe.minus_ids,
            frozen_last={i: rm.ap[i][:, 0, :] for i in range(L) if i not in targets},
            ao_last={i: rp.ao[i][0] for i in targets},
        )
        assert np.abs(ours - ref).max() < 1e-4
        d_before = metrics.logit_diff(rm.logits, pe.minus_id, pe.plus_id)
        d_ours = metrics.logit_diff(ours, pe.minus_id, pe.plus_id)
        d_ref = float(ref[pe.minus_id] - ref[pe.plus_id])
        if min(abs(d_ours), abs(d_ref)) > 1e-3:
            assert (d_ours > 0) == (d_ref > 0)
            if d_before > 0:
                checked += 1
    assert checked > 0


def test_windowed_sink_matches_reference(model, tok):
    ids = _prompt(tok, "A fruit that is not red is a")
    L = model.config.n_layers
    _, rec = model.forward(ids, TRACE)
    plan = windowed_sink_plan(2, 1, L, freeze_from=rec)
    ours = model.last_logits(ids, plan)
    ref = reference_forward(
        model.weights, ids, sink_last=[1], frozen_last={i: rec.ap[i][:, 0, :] for i in range(L) if i != 1}
    )
    assert np.abs(ours - ref).max() < 1e-4


def test_full_sink_locality(model):
    rng = np.random.default_rng(11)
    V, L = model.config.vocab_size, model.config.n_layers
    plan = sink_plan(range(L))
    for _ in range(10):
        ids = rng.integers(0, V, int(rng.integers(4, 16)))
        pert = ids.copy()
        pert[len(ids) // 2] = (ids[len(ids) // 2] + 1 + rng.integers(V - 1)) % V
        a, b = model.last_logits(ids, plan), model.last_logits(pert, plan)
        assert np.abs(a - b).max() < 1e-6


def test_knockout_of_whole_context_equals_last_only_sink(model):
    """Knocking out keys 1..T-2 from the last query is a last-position sink."""
    ids = list(range(20, 30))
    t = len(ids)
    ko = InterventionPlan((AttentionKnockout({0, 1, 2, 3}, "last", (1, t - 1)),))
    sk = sink_plan(range(4), positions="last")
    assert np.array_equal(model.last_logits(ids, ko), model.last_logits(ids, sk))


def test_zero_mo_changes_output(model):
    ids = list(range(40, 48))
    base = model.last_logits(ids)
    assert not np.array_equal(model.last_logits(ids, InterventionPlan((ZeroMO({0}, "last"),))), base)


def test_freeze_plan_needs_patterns(model):
    _, rec = model.forward([1, 2, 3], TraceRequest(ao=(), mo=(), ap=[0], positions="last"))
    with pytest.raises(PlanError):
        freeze_plan(rec, [1])


def test_plan_json_round_trip(model):
    ids = list(range(5, 12))
    _, rec = model.forward(ids, TRACE)
    L = model.config.n_layers
    plans = [
        cumulative_sink_plan(2, L),
        InterventionPlan((AttentionKnockout({0, 2}, (3, 4), (1, 3), heads=[0]),)),
        build_path_patch_plan(rec, rec, [1], L),
        InterventionPlan((ZeroAO({0}, "last"), ZeroMO({3}))),
    ]
    for p in plans:
        back = InterventionPlan.from_json(p.to_json())
        assert back == p
        assert np.array_equal(model.last_logits(ids, back), model.last_logits(ids, p))


def test_duplicate_directives_collapse():
    d = AttentionSink({1, 2})
    assert len(InterventionPlan((d, d)).directives) == 1
