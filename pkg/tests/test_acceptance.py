"""Acceptance criteria 1-13, each printing one PASS/FAIL line with the measured value."""

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from neglab import annotate as ann
from neglab import attribution as A
from neglab import cli, corpus, geometry, lenses, metrics
from neglab.errors import CorpusError
from neglab.interventions import build_path_patch_plan, sink_plan
from neglab.model import TraceRequest, Transformer, Weights, save_weights
from neglab.model.toy import TOY_SEED, data_path, init_weights

from conftest import tiny_model

GPT2_ENV = "NEGLAB_GPT2_DIR"


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {n}: {detail}"

    return emit


def test_c01_residual_decomposition(model, rng_prompts, report):
    assert model.config.n_layers == 4 and model.config.d_model == 64
    t0 = time.perf_counter()
    worst = 0.0
    for ids in rng_prompts:
        _, rec = model.forward(ids, TraceRequest(positions="all"))
        total = rec.embedding.astype(np.float64) + sum(rec.ao[i] + rec.mo[i] for i in range(4))
        worst = max(worst, float(np.abs(rec.final - total).max()))
    dt = time.perf_counter() - t0
    report(1, worst < 1e-4 and dt < 10, f"max |h - (E + sum AO + sum MO)| = {worst:.2e} over 100 prompts in {dt:.2f}s")


def test_c02_logit_lens_identity(model, rng_prompts, report):
    worst = 0.0
    for ids in rng_prompts:
        logits, rec = model.forward(ids, TraceRequest.last())
        worst = max(worst, float(np.abs(lenses.logit_lens(rec.final[0], model) - logits[-1]).max()))
    rng = np.random.default_rng(0)
    sup = 0.0
    for _ in range(100):
        a, b = rng.standard_normal((2, 64)).astype(np.float32)
        s = float(rng.uniform(0.2, 3.0))
        f = lambda x: lenses.logit_lens(x, model, lenses.FROZEN, s)  # noqa: E731
        sup = max(sup, float(np.abs(f(a + b) - f(a) - f(b)).max()))
    report(2, worst < 1e-4 and sup < 1e-4, f"self-norm identity {worst:.2e}; frozen superposition {sup:.2e}")


def test_c03_path_patch_noop(model, tok, entries, report):
    t0 = time.perf_counter()
    L = model.config.n_layers
    req = TraceRequest(ao="all", mo=(), ap="all", positions="last")
    worst = 0.0
    for pe in metrics.prepare(entries, tok):
        _, rec = model.forward(pe.minus_ids, req)
        for targets in ([], [1, 2], list(range(L))):
            lg = model.last_logits(pe.minus_ids, build_path_patch_plan(rec, rec, targets, L))
            worst = max(worst, float(np.abs(lg - rec.logits).max()))
    sets = [[], [0], [1], [2], [3], list(range(L))]
    rates = [p.rate for p in metrics.flip_rate(entries, model, tok, sets, donor="self")]
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and all(r == 0.0 for r in rates) and dt < 30
    report(3, ok, f"max logit change {worst:.2e}, flip rates {rates} on {len(entries)} entries in {dt:.1f}s")


def test_c04_full_sink_locality(model, report):
    rng = np.random.default_rng(4)
    V, L = model.config.vocab_size, model.config.n_layers
    plan = sink_plan(range(L))
    worst = 0.0
    for _ in range(50):
        ids = rng.integers(0, V, int(rng.integers(3, 30)))
        j = int(rng.integers(1, len(ids) - 1))
        pert = ids.copy()
        pert[j] = (ids[j] + int(rng.integers(1, V))) % V
        worst = max(worst, float(np.abs(model.last_logits(ids, plan) - model.last_logits(pert, plan)).max()))
    report(4, worst < 1e-6, f"max last-position logit change {worst:.2e} over 50 perturbations")


def test_c05_attribution_completeness(model, rng_prompts, report):
    rng = np.random.default_rng(5)
    V = model.config.vocab_size
    gap = 0.0
    for ids in rng_prompts:
        a, b = (int(v) for v in rng.choice(V, 2, replace=False))
        led = A.contribution_ledger(model, ids, a, b)
        gap = max(gap, abs(led.discrepancy) / max(1.0, abs(led.total)))
    closure = 0.0
    for seed in range(50):
        ids = rng_prompts[seed]
        _, rec = model.forward(ids, A.LEDGER_TRACE)
        d = A.ContrastDirection.for_answers(model, *(int(v) for v in rng.choice(V, 2, replace=False)))
        kind = "topk" if seed % 2 else "relu"
        sae = A.random_sae(64, 128, 1000 + seed, activation=kind, k=16 if kind == "topk" else None)
        la = A.latent_attribution(rec.mo[seed % 4][0], sae, d, float(rec.final_scale[0]), model, seed % 4)
        closure = max(closure, abs(la.closure))
    report(5, gap < 1e-3 and closure < 1e-4, f"ledger relative gap {gap:.2e} (100 pairs); SAE closure {closure:.2e} (50 SAEs)")


def test_c06_geometry_oracles(report):
    st = geometry.planted_states(200, 8, 32, planted_layer=4, point="mid", seed=6)
    rep = geometry.decode_not_states(st, folds=10, seed=0)
    (layer, point), peak = rep.peak()
    means = []
    for seed in range(20):
        mask = np.random.default_rng(seed).random(st.n) < 0.5
        shuffled = geometry.decode_not_states(st.swapped(mask), folds=10, seed=seed)
        means.append(float(np.mean(list(shuffled.accuracy.values()))))
    m = float(np.mean(means))
    ok = (layer, point) == (4, "mid") and peak >= 0.99 and 0.35 <= m <= 0.65
    report(6, ok, f"planted peak at layer {layer + 1}/{point} acc {peak:.3f}; shuffled mean {m:.3f} over 20 seeds")


def test_c07_permutation_harness(tok, entries, report):
    class Rigged:
        def __init__(self):
            self.table = {}
            for pe in metrics.prepare(entries, tok):
                self.table[pe.minus_ids] = {pe.minus_id: 10.0}
                self.table.setdefault(pe.plus_ids, {})[pe.plus_id] = 10.0

        def last_logits(self, ids, plan=None):
            out = np.zeros(len(tok), dtype=np.float32)
            for t, v in self.table[tuple(ids)].items():
                out[t] = v
            return out

    t0 = time.perf_counter()
    res = metrics.permutation_sanity_check(entries, Rigged(), tok, n_resamples=500, seed=0)
    dt = time.perf_counter() - t0
    report(7, res.p_value == 1 / 501 and dt < 5, f"p = {res.p_value:.6f} (1/501 = {1 / 501:.6f}) in {dt:.2f}s")


def test_c08_attention_mass(report):
    base = tiny_model()
    t = {n: np.array(v) for n, v in base.weights.stored().items()}
    for i in range(base.config.n_layers):
        t[f"blocks.{i}.attn.W_Q"][:] = 0
        t[f"blocks.{i}.attn.W_K"][:] = 0
    m = Transformer(Weights(base.config, t))
    errs = {T: float(np.abs(metrics.prompt_sink_mass(m, list(range(1, T + 1))) - 2 / T).max()) for T in (2, 4, 8, 16)}
    single = float(metrics.attention_sink_mass_prompts(m, [[7]]).mean)
    ok = max(errs.values()) < 1e-6 and abs(single - 1.0) < 1e-6
    report(8, ok, f"max |mass - 2/T| = {max(errs.values()):.2e}; single-token mass {single}")


def _digests(d: Path) -> dict:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir())}


@pytest.fixture(scope="module")
def ckpts(tmp_path_factory, model):
    d = tmp_path_factory.mktemp("ckpt")
    save_weights(d / "a.safetensors", model.weights)
    save_weights(d / "b.safetensors", init_weights(model.config, TOY_SEED + 1))
    return [str(d / "a.safetensors"), str(d / "b.safetensors")]


def _all_commands(ckpts):
    return {
        "eval": [],
        "sink-sweep": [],
        "logitlens-eval": [],
        "windowed": [],
        "path-patch": [],
        "lens-scan": [],
        "decode-not": [],
        "attribute": ["--sae-dir", str(data_path("toy_sae"))],
        "annotate": [],
        "checkpoints": ["--checkpoints", *ckpts],
    }


def test_c09_determinism(tmp_path, ckpts, report, capsys):
    cmds = _all_commands(ckpts)
    for tag, workers in (("a", 1), ("b", 1), ("c", 4)):
        for name, extra in cmds.items():
            assert cli.main([name, "--out", str(tmp_path / tag / name), "--workers", str(workers), *extra]) == 0
    capsys.readouterr()
    bad = [n for n in cmds if not (_digests(tmp_path / "a" / n) == _digests(tmp_path / "b" / n) == _digests(tmp_path / "c" / n))]
    n_files = sum(len(_digests(tmp_path / "a" / n)) for n in cmds)
    report(9, not bad, f"{len(cmds)} commands, {n_files} files identical across 2 reruns and 1 vs 4 workers; differing: {bad}")


def test_c10_end_to_end(tmp_path, entries, report, capsys):
    assert len(entries) >= 40
    expected = {
        "eval": {"eval.csv", "eval.json", "surrogate.csv"},
        "sink-sweep": {"sink_sweep.csv", "sink_sweep.json", "sink_sweep.svg"},
        "windowed": {"windowed.csv", "windowed.json", "windowed.svg"},
        "decode-not": {"decode_not.csv", "decode_not.json", "decode_not.svg"},
        "attribute": {"ledger.csv", "attribution.csv", "attribute.json", "latents.csv"},
    }
    t0 = time.perf_counter()
    for name in expected:
        extra = ["--sae-dir", str(data_path("toy_sae"))] if name == "attribute" else []
        assert cli.main([name, "--out", str(tmp_path), *extra]) == 0
    dt = time.perf_counter() - t0
    capsys.readouterr()
    have = {p.name for p in tmp_path.iterdir()}
    missing = set().union(*expected.values()) - have
    kinds = {p.suffix for p in tmp_path.iterdir()}
    ok = dt < 60 and not missing and kinds == {".csv", ".json", ".svg"}
    report(10, ok, f"5 commands on {len(entries)} entries in {dt:.1f}s; {len(have)} artifacts, missing {sorted(missing)}")


def test_c11_annotation_offline(model, tok, entries, monkeypatch, report):
    import httpx

    calls = []
    monkeypatch.setattr(httpx.Client, "send", lambda *a, **k: calls.append(1))
    store = ann.FixtureStore.load(ann.default_fixtures_path())
    samples = ann.build_samples(entries, model, tok, n=10)
    layers = [r.layer + 1 for r in samples[0].readouts]
    fracs, parsed = [], 0
    for mode in ann.MODES:
        out = ann.annotate_samples(samples, tok, mode, fixtures=store)
        parsed += len(out)
        fracs += list(ann.evidence_curve([out[s.id] for s in samples], layers, mode).fractions)
    ok = len(samples) == 10 and parsed == 20 and all(0 <= f <= 1 for f in fracs) and not calls
    report(11, ok, f"{parsed} responses parsed for 10 samples, fractions {fracs}, network calls {len(calls)}")


def test_c12_corpus_validation(tmp_path, tok, report):
    clean = corpus.load(data_path("seed_corpus.jsonl"), tok)
    lines = data_path("seed_corpus.jsonl").read_text().splitlines()
    first = json.loads(lines[0])
    results = []
    for label, row, at, needle in (
        ("duplicate", dict(first, id="dup"), 17, "duplicate"),
        ("degenerate", dict(first, id="deg", y="gizmo", y_plus=" cat", y_minus=" cat"), 42, "degenerate"),
    ):
        injected = list(lines)
        injected.insert(at - 1, json.dumps(row))
        p = tmp_path / f"{label}.jsonl"
        p.write_text("\n".join(injected) + "\n")
        try:
            corpus.load(p, tok)
            results.append((label, None, False))
        except CorpusError as exc:
            results.append((label, exc.line, exc.line == at and needle in str(exc)))
    ok = len(clean) >= 40 and all(r[2] for r in results)
    report(12, ok, f"seed corpus {len(clean)} entries clean; injected errors reported at lines {[r[1] for r in results]} (expected [17, 42])")


def test_c13_small_pretrained_checkpoint(tmp_path, report, capsys):
    path = os.environ.get(GPT2_ENV)
    if not path:
        with capsys.disabled():
            print(f"\ncriterion 13: SKIP  optional asset; set {GPT2_ENV} to a GPT-2 checkpoint directory")
        pytest.skip(f"{GPT2_ENV} not set")
    outs = []
    t0 = time.perf_counter()
    for tag in "ab":
        assert cli.main(["eval", "--weights", path, "--out", str(tmp_path / tag)]) == 0
        outs.append(_digests(tmp_path / tag))
    dt = time.perf_counter() - t0
    capsys.readouterr()
    sens = json.loads((tmp_path / "a" / "eval.json").read_text())["eval"]["sensitivity"]
    ok = 0 <= sens <= 1 and outs[0] == outs[1] and dt / 2 < 600
    report(13, ok, f"sensitivity {sens:.4f}, reruns identical {outs[0] == outs[1]}, {dt / 2:.0f}s per run")
