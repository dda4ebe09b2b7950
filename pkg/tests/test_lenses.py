import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neglab import corpus, lenses
from neglab.errors import PlanError, ShapeError
from neglab.model import ModelConfig, TraceRequest, Transformer, Weights
from neglab.model.toy import init_weights

from conftest import tiny_model

GOLDEN = json.loads((Path(__file__).parent / "golden" / "toy.json").read_text())


def test_self_lens_of_final_state_is_model_output(model, rng_prompts):
    for ids in rng_prompts[:25]:
        logits, rec = model.forward(ids, TraceRequest.last())
        assert np.abs(lenses.logit_lens(rec.final[0], model) - logits[-1]).max() < 1e-4


def test_frozen_lens_of_final_state_reproduces_logits(model, rng_prompts):
    for ids in rng_prompts[:10]:
        _, rec = model.forward(ids, TraceRequest.last())
        lg = lenses.logit_lens(rec.final[0], model, lenses.FROZEN, float(rec.final_scale[0]))
        assert np.abs(lg - rec.logits).max() < 1e-4


def test_frozen_lens_zero_vector(model):
    assert not lenses.logit_lens(np.zeros(64), model, lenses.FROZEN, 1.3).any()


def test_frozen_lens_requires_positive_sigma(model):
    with pytest.raises(ValueError):
        lenses.logit_lens(np.ones(64), model, lenses.FROZEN, 0.0)
    with pytest.raises(ValueError):
        lenses.logit_lens(np.ones(64), model, lenses.FROZEN)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 5.0))
def test_frozen_lens_superposition(seed, sigma):
    m = tiny_model(norm_kind="layernorm", unembed_bias=True)
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 16)).astype(np.float32)
    lens = lambda x: lenses.logit_lens(x, m, lenses.FROZEN, sigma)  # noqa: E731
    assert np.abs(lens(a + b) - (lens(a) + lens(b))).max() < 1e-4
    assert np.abs(lens(2.5 * a) - 2.5 * lens(a)).max() < 1e-4


def test_lens_dimension_mismatch(model):
    with pytest.raises(ShapeError):
        lenses.logit_lens(np.ones(63), model)


def test_readout_example():
    r = lenses.readout_from_logits(np.array([2.0, -1.0, 0.0]), k=1)
    assert r.promoted_ids() == [0] and r.demoted_ids() == [1]
    with pytest.raises(ShapeError):
        lenses.readout_from_logits(np.zeros(3), k=4)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-4, 4), min_size=1, max_size=30))
def test_full_k_promoted_is_reverse_of_demoted(vals):
    r = lenses.readout_from_logits(np.array(vals, dtype=np.float32), k=len(vals))
    assert [v for _, v in r.promoted] == [v for _, v in r.demoted][::-1]


def _orthonormal_model(V=12, d=16):
    cfg = ModelConfig(n_layers=1, d_model=d, n_heads=2, d_head=8, vocab_size=V, mlp_hidden=8, norm_kind="rmsnorm")
    t = {n: np.array(v) for n, v in init_weights(cfg, seed=0).stored().items()}
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((d, V)))
    t["unembed.W_U"] = q.T.astype(np.float32)  # orthonormal rows
    return Transformer(Weights(cfg, t))


@pytest.mark.parametrize("target", [0, 3, 11])
def test_scaled_unembedding_row_is_top_token(target):
    m = _orthonormal_model()
    x = 5 * m.weights.W_U[target]
    direct = m.weights.W_U @ m.final_norm(x)
    r = lenses.readout(x, m, k=3)
    assert r.promoted_ids()[0] == target == int(np.argmax(direct))


def test_lens_scan_shapes_and_errors(model, tok):
    ids = corpus.prompt_ids("A fruit that is not red is", tok)
    assert len(lenses.lens_scan(model, ids, [2])) == 1
    assert lenses.lens_scan(model, ids, []) == []
    with pytest.raises(PlanError):
        lenses.lens_scan(model, ids, [model.config.n_layers])


def test_lens_scan_readouts_match_direct_projection(model, tok):
    ids = corpus.prompt_ids("A fruit that is not red is", tok)
    _, rec = model.forward(ids, TraceRequest(positions="last"))
    for r in lenses.lens_scan(model, ids, range(4), "mo", k=4):
        direct = model.logits_from_hidden(rec.mo[r.layer][0])
        assert r.promoted_ids() == np.argsort(-direct, kind="stable")[:4].tolist()


def test_lens_scan_golden(model, tok):
    g = GOLDEN["lens_scan"]
    scan = lenses.lens_scan(model, corpus.prompt_ids(g["prompt"], tok), range(4), "ao", k=5)
    assert [r.promoted_ids() for r in scan] == g["promoted"]
    assert [r.demoted_ids() for r in scan] == g["demoted"]


def test_readout_to_dict_is_one_based(model, tok):
    ids = corpus.prompt_ids("A fruit that is not red is", tok)
    (r,) = lenses.lens_scan(model, ids, [0], k=2)
    d = r.to_dict(tok)
    assert d["layer"] == 1 and len(d["promoted"]) == 2 and isinstance(d["promoted"][0][0], str)
