"""Command-line experiment drivers.

Every subcommand writes CSV/JSON (and SVG for curves) into ``--out``. Each
file carries a hash of the resolved configuration and the input files, so
two runs with identical inputs produce byte-identical outputs. Layers are
1-based on the command line and in every output file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import annotate as ann
from . import attribution as attr
from . import corpus, geometry, metrics
from .errors import (
    ConfigError,
    ContainerError,
    DataError,
    NetworkError,
    PlanError,
    TokenizerError,
)
from .interventions import LAST, build_path_patch_plan, cumulative_sink_plan, window_layers, windowed_sink_plan
from .lenses import SELF, lens_scan, logit_lens
from .model import Tokenizer, TraceRequest, Transformer, load_weights
from .model.hf import load_hf_checkpoint
from .model.toy import BOS_TOKEN, data_path, load_toy_tokenizer
from .parallel import ordered_map
from .reporting import config_hash, line_svg, write_csv, write_json, write_text

log = logging.getLogger("neglab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NETWORK = 0, 2, 3, 4

# settings that never change results and so stay out of the config hash
_UNHASHED = ("out", "workers", "config", "command")

DEFAULTS = {
    "weights": None,
    "tokenizer": None,
    "bos": None,
    "corpus": None,
    "out": "out",
    "seed": 0,
    "workers": 1,
    "window_width": 3,
    "positions": None,
    "k": 10,
    "folds": 10,
    "layers": None,
    "fixtures": None,
    "live": False,
    "states": None,
    "sae_dir": None,
    "sink_from": None,
    "top_n": None,
    "donor": "plus",
    "signal": "ao",
    "mode": "both",
    "n": None,
    "checkpoints": None,
}


# ---------------------------------------------------------------------------
# configuration


def parse_layers(value, n_layers: int) -> list[int]:
    """``"A..B"`` (inclusive, 1-based) or ``"A"`` -> 0-based layer list."""
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        layers = [int(v) for v in value]
    else:
        s = str(value).strip()
        if ".." in s:
            a, b = s.split("..", 1)
            try:
                a, b = int(a), int(b)
            except ValueError:
                raise ConfigError(f"bad layer range {value!r}; expected A..B") from None
            layers = list(range(a, b + 1))
        else:
            try:
                layers = [int(v) for v in s.split(",") if v.strip()]
            except ValueError:
                raise ConfigError(f"bad layer list {value!r}") from None
    bad = [v for v in layers if not 1 <= v <= n_layers]
    if bad:
        raise ConfigError(f"layers {bad} outside 1..{n_layers}")
    return [v - 1 for v in layers]


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_inputs(paths) -> list:
    out = []
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        out.append([[q.relative_to(p).as_posix() if p.is_dir() else q.name, _file_digest(q)] for q in files])
    return out


@dataclass
class Context:
    cfg: dict
    model: Transformer
    tokenizer: Tokenizer
    out: Path
    chash: str
    _entries: list | None = None

    @property
    def L(self) -> int:
        return self.model.config.n_layers

    @property
    def workers(self) -> int:
        return int(self.cfg["workers"])

    def entries(self) -> list:
        if self._entries is None:
            path = self.cfg["corpus"] or data_path("seed_corpus.jsonl")
            self._entries = corpus.load(path, self.tokenizer)
        return self._entries

    def path(self, name: str) -> Path:
        return self.out / name


def _load_tokenizer(cfg: dict) -> Tokenizer:
    tok = cfg["tokenizer"]
    if tok is None:
        w = cfg["weights"]
        if w is not None and Path(w).is_dir():
            tok = w
        elif w is None:
            return load_toy_tokenizer()
        else:
            raise ConfigError("--tokenizer is required with custom --weights")
    p = Path(tok)
    if not p.is_dir():
        raise ConfigError(f"tokenizer directory {tok} not found")
    vocab = next((p / n for n in ("vocab.json", "toy_vocab.json") if (p / n).exists()), None)
    merges = next((p / n for n in ("merges.txt", "toy_merges.txt") if (p / n).exists()), None)
    if vocab is None or merges is None:
        raise ConfigError(f"{tok} needs vocab.json and merges.txt")
    bos = cfg["bos"]
    if bos is None:
        bos = BOS_TOKEN if BOS_TOKEN in json.loads(vocab.read_text(encoding="utf-8")) else None
    return Tokenizer.from_files(vocab, merges, bos_token=bos or None)


def _load_model(path) -> Transformer:
    if path is None:
        path = data_path("toy_model.safetensors")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"weights {path} not found")
    if p.is_dir():
        return Transformer(load_hf_checkpoint(p))
    return Transformer(load_weights(p))


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config}: {exc}") from None
        unknown = set(doc) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(doc)
    for k in DEFAULTS:
        v = getattr(args, k, None)
        if v is not None and v is not False:
            cfg[k] = v
    cfg["command"] = args.command
    for key in ("weights", "tokenizer", "corpus", "fixtures", "states", "sae_dir"):
        if cfg[key] is not None and not Path(cfg[key]).exists():
            raise ConfigError(f"{key.replace('_', '-')} path {cfg[key]} does not exist")
    if cfg["checkpoints"]:
        for c in cfg["checkpoints"]:
            if not Path(c).exists():
                raise ConfigError(f"checkpoint {c} does not exist")
    if int(cfg["workers"]) < 1:
        raise ConfigError("--workers must be >= 1")
    if cfg["positions"] not in (None, "all", "last"):
        raise ConfigError("--positions must be all or last")
    return cfg


def _input_paths(cfg: dict) -> list:
    """Every file a run reads, bundled defaults included."""
    paths = [
        cfg["weights"] or data_path("toy_model.safetensors"),
        cfg["corpus"] or data_path("seed_corpus.jsonl"),
    ]
    if cfg["tokenizer"]:
        paths.append(cfg["tokenizer"])
    elif not cfg["weights"]:
        paths += [data_path("toy_vocab.json"), data_path("toy_merges.txt")]
    for key in ("fixtures", "states", "sae_dir"):
        if cfg[key]:
            paths.append(cfg[key])
    if cfg["command"] == "annotate" and not cfg["fixtures"] and not cfg["live"]:
        paths.append(ann.default_fixtures_path())
    return paths + list(cfg["checkpoints"] or [])


def build_context(args: argparse.Namespace) -> Context:
    cfg = resolve_config(args)
    model = _load_model(cfg["weights"])
    tok = _load_tokenizer(cfg)
    if len(tok) > model.config.vocab_size:
        raise ConfigError(f"tokenizer has {len(tok)} tokens but the model vocabulary is {model.config.vocab_size}")
    hashed = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    hashed["inputs"] = _digest_inputs(_input_paths(cfg))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return Context(cfg, model, tok, out, config_hash(hashed))


# ---------------------------------------------------------------------------
# commands


def _summary_row(res: metrics.EvalResult) -> list:
    return [res.acc_pos, res.acc_neg, res.sensitivity]


def cmd_eval(ctx: Context) -> dict:
    entries = ctx.entries()
    res = metrics.evaluate(entries, ctx.model, ctx.tokenizer, workers=ctx.workers)
    write_csv(ctx.path("eval.csv"), metrics.EvalResult.HEADER, res.rows(), ctx.chash)
    doc = {"eval": res.summary()}
    with_sets = [e for e in entries if e.has_answer_sets]
    if with_sets:
        sur = metrics.surrogate_evaluate(with_sets, ctx.model, ctx.tokenizer, workers=ctx.workers)
        write_csv(ctx.path("surrogate.csv"), metrics.EvalResult.HEADER, sur.rows(), ctx.chash)
        doc["surrogate"] = sur.summary()
    write_json(ctx.path("eval.json"), doc, ctx.chash)
    return doc


def _best(values: list[tuple[int, float]]) -> int:
    """Layer with the largest value; the earliest wins ties."""
    return max(values, key=lambda lv: (lv[1], -lv[0]))[0]


def cmd_sink_sweep(ctx: Context) -> dict:
    entries = ctx.entries()
    prepared = metrics.prepare(entries, ctx.tokenizer)
    positions = ctx.cfg["positions"] or "all"
    vanilla = metrics.evaluate_prepared(prepared, lambda ids: ctx.model.last_logits(ids), ctx.workers)
    rows = [["vanilla", *_summary_row(vanilla)]]
    curve = []
    for start in range(1, ctx.L + 1):
        plan = cumulative_sink_plan(start, ctx.L, positions)
        res = metrics.evaluate_prepared(prepared, lambda ids, p=plan: ctx.model.last_logits(ids, p), ctx.workers)
        rows.append([start, *_summary_row(res)])
        curve.append((start, res))
    best = _best([(s, r.acc_neg) for s, r in curve])
    write_csv(ctx.path("sink_sweep.csv"), ["start_layer", "acc_pos", "acc_neg", "sensitivity"], rows, ctx.chash)
    svg = line_svg(
        {"acc_neg": [(s, r.acc_neg) for s, r in curve], "acc_pos": [(s, r.acc_pos) for s, r in curve]},
        "cumulative attention sink",
        "first sunk layer",
        "accuracy",
        ctx.chash,
        hlines={"vanilla acc_neg": vanilla.acc_neg, "vanilla acc_pos": vanilla.acc_pos},
    )
    write_text(ctx.path("sink_sweep.svg"), svg)
    best_res = dict(curve)[best]
    doc = {"positions": positions, "vanilla": vanilla.summary(), "best_layer": best, "best": best_res.summary()}
    write_json(ctx.path("sink_sweep.json"), doc, ctx.chash)
    return doc


def cmd_logitlens_eval(ctx: Context) -> dict:
    L = ctx.L
    req = TraceRequest(ao=(), mo=(), ap=(), residual=[(i, "post") for i in range(L)], positions="last")

    def multi(ids):
        _, rec = ctx.model.forward(ids, req)
        return {i: logit_lens(rec.resid[(i, "post")][0], ctx.model, SELF) for i in range(L)}

    res = metrics.evaluate_multi(metrics.prepare(ctx.entries(), ctx.tokenizer), multi, ctx.workers)
    rows = [[i + 1, *_summary_row(res[i])] for i in range(L)]
    best = _best([(i + 1, res[i].acc_neg) for i in range(L)])
    write_csv(ctx.path("logitlens_eval.csv"), ["layer", "acc_pos", "acc_neg", "sensitivity"], rows, ctx.chash)
    write_text(
        ctx.path("logitlens_eval.svg"),
        line_svg(
            {"acc_neg": [(i + 1, res[i].acc_neg) for i in range(L)], "acc_pos": [(i + 1, res[i].acc_pos) for i in range(L)]},
            "logit lens accuracy",
            "layer",
            "accuracy",
            ctx.chash,
        ),
    )
    doc = {"best_layer": best, "best": res[best - 1].summary(), "final_layer": res[L - 1].summary()}
    write_json(ctx.path("logitlens_eval.json"), doc, ctx.chash)
    return doc


def _windowed_rows(ctx: Context, width: int) -> tuple[list, dict]:
    """Per-centre windowed-sink and path-patch statistics."""
    L, model = ctx.L, ctx.model
    entries = ctx.entries()
    prepared = metrics.prepare(entries, ctx.tokenizer)
    positions = ctx.cfg["positions"] or LAST
    ap_last = TraceRequest(ao=(), mo=(), ap="all", positions="last")
    centers = list(range(1, L + 1))

    def one(pe: metrics.PreparedEntry):
        _, tp = model.forward(pe.plus_ids, ap_last)
        _, tm = model.forward(pe.minus_ids, ap_last)
        out = []
        for c in centers:
            lp = model.last_logits(pe.plus_ids, windowed_sink_plan(c, width, L, positions, freeze_from=tp))
            lm = model.last_logits(pe.minus_ids, windowed_sink_plan(c, width, L, positions, freeze_from=tm))
            out.append(metrics.score_from_logits(pe, lp, lm))
        return out

    per = ordered_map(one, prepared, ctx.workers)
    sink = {c: metrics.EvalResult(tuple(p[j] for p in per)) for j, c in enumerate(centers)}
    targets = [[i - 1 for i in window_layers(c, width, L)] for c in centers]
    flips = metrics.flip_rate(entries, model, ctx.tokenizer, targets, ctx.cfg["donor"], ctx.workers)
    rows = []
    for c, fp in zip(centers, flips):
        r = sink[c]
        rows.append([c, " ".join(str(i + 1) for i in fp.targets), r.acc_pos, r.acc_neg, fp.eligible, fp.flipped, fp.rate])
    return rows, {"sink": sink, "flips": dict(zip(centers, flips))}


def cmd_windowed(ctx: Context) -> dict:
    width = int(ctx.cfg["window_width"])
    if width < 1:
        raise ConfigError("--window-width must be >= 1")
    vanilla = metrics.evaluate(ctx.entries(), ctx.model, ctx.tokenizer, workers=ctx.workers)
    rows, parts = _windowed_rows(ctx, width)
    header = ["center", "layers", "sink_acc_pos", "sink_acc_neg", "eligible", "flipped", "flip_rate"]
    write_csv(ctx.path("windowed.csv"), header, rows, ctx.chash)
    write_text(
        ctx.path("windowed.svg"),
        line_svg(
            {"sink acc_neg": [(r[0], r[3]) for r in rows], "patch flip rate": [(r[0], r[6]) for r in rows]},
            f"windowed attention sink and path patching (width {width})",
            "window center",
            "fraction",
            ctx.chash,
            hlines={"vanilla acc_neg": vanilla.acc_neg},
        ),
    )
    sink_best = min(rows, key=lambda r: (r[3], r[0]))[0]
    doc = {
        "width": width,
        "positions": ctx.cfg["positions"] or LAST,
        "vanilla": vanilla.summary(),
        "lowest_sink_acc_neg_center": sink_best,
    }
    write_json(ctx.path("windowed.json"), doc, ctx.chash)
    return doc


def cmd_path_patch(ctx: Context) -> dict:
    layers = parse_layers(ctx.cfg["layers"], ctx.L) if ctx.cfg["layers"] else ann.middle_third(ctx.L)
    entries = ctx.entries()
    L, model = ctx.L, ctx.model
    req = TraceRequest(ao="all", mo=(), ap="all", positions="last")

    def one(pe: metrics.PreparedEntry):
        _, tm = model.forward(pe.minus_ids, req)
        base = metrics.logit_diff(tm.logits, pe.minus_id, pe.plus_id)
        tp = tm if ctx.cfg["donor"] == "self" else model.forward(pe.plus_ids, req)[1]
        lg = model.last_logits(pe.minus_ids, build_path_patch_plan(tp, tm, layers, L))
        patched = metrics.logit_diff(lg, pe.plus_id, pe.minus_id)
        return [pe.entry.id, base, patched, int(base > 0), int(base > 0 and patched > 0)]

    rows = ordered_map(one, metrics.prepare(entries, ctx.tokenizer), ctx.workers)
    header = ["id", "delta_minus", "patched_delta_plus_over_minus", "eligible", "flipped"]
    write_csv(ctx.path("path_patch.csv"), header, rows, ctx.chash)
    eligible = sum(r[3] for r in rows)
    flipped = sum(r[4] for r in rows)
    doc = {
        "layers": [i + 1 for i in layers],
        "donor": ctx.cfg["donor"],
        "eligible": eligible,
        "flipped": flipped,
        "flip_rate": flipped / eligible if eligible else None,
    }
    write_json(ctx.path("path_patch.json"), doc, ctx.chash)
    return doc


def cmd_lens_scan(ctx: Context) -> dict:
    layers = parse_layers(ctx.cfg["layers"], ctx.L) if ctx.cfg["layers"] else ann.middle_third(ctx.L)
    entries = ctx.entries()
    if ctx.cfg["n"]:
        entries = entries[: int(ctx.cfg["n"])]
    k = int(ctx.cfg["k"])
    signal = ctx.cfg["signal"]

    def one(e):
        return lens_scan(ctx.model, corpus.prompt_ids(e.p_minus, ctx.tokenizer), layers, signal, k)

    scans = ordered_map(one, entries, ctx.workers)
    lines = []
    for e, scan in zip(entries, scans):
        for r in scan:
            lines.append(json.dumps({"id": e.id, **r.to_dict(ctx.tokenizer)}, ensure_ascii=False))
    write_text(ctx.path("lens_scan.jsonl"), "".join(line + "\n" for line in lines))
    doc = {"entries": len(entries), "layers": [i + 1 for i in layers], "signal": signal, "k": k}
    write_json(ctx.path("lens_scan.json"), doc, ctx.chash)
    return doc


def load_states_npz(path) -> geometry.PairStates:
    """Paired states from ``plus_<layer>_<point>`` / ``minus_<layer>_<point>`` arrays (1-based layers)."""
    with np.load(path) as z:
        names = sorted(n for n in z.files if n.startswith("plus_"))
        if not names:
            raise DataError(f"{path}: no plus_<layer>_<point> arrays")
        keys, plus, minus = [], {}, {}
        for n in names:
            _, layer, point = n.split("_", 2)
            key = (int(layer) - 1, point)
            m = f"minus_{layer}_{point}"
            if m not in z.files:
                raise DataError(f"{path}: {n} has no matching {m}")
            keys.append(key)
            plus[key], minus[key] = z[n], z[m]
    order = {p: j for j, p in enumerate(("pre", "mid", "post"))}
    keys.sort(key=lambda k: (k[0], order.get(k[1], 99), k[1]))
    return geometry.PairStates(tuple(keys), plus, minus)


def save_states_npz(path, states: geometry.PairStates) -> None:
    arrays = {}
    for layer, point in states.keys:
        arrays[f"plus_{layer + 1}_{point}"] = states.plus[(layer, point)]
        arrays[f"minus_{layer + 1}_{point}"] = states.minus[(layer, point)]
    np.savez(path, **arrays)


def cmd_decode_not(ctx: Context) -> dict:
    folds, seed = int(ctx.cfg["folds"]), int(ctx.cfg["seed"])
    if ctx.cfg["states"]:
        states = load_states_npz(ctx.cfg["states"])
    else:
        states = geometry.collect_pair_states(ctx.entries(), ctx.model, ctx.tokenizer, workers=ctx.workers)
    report = geometry.decode_not_states(states, folds, seed)
    write_text(ctx.path("decode_not.csv"), report.to_csv(ctx.chash))
    write_text(ctx.path("decode_not.svg"), report.to_svg(ctx.chash))
    doc = report.summary()
    write_json(ctx.path("decode_not.json"), doc, ctx.chash)
    return doc


def _default_top_n(L: int) -> int:
    # ten of thirty-two layers, scaled to the model depth
    return max(1, round(10 * L / 32))


def cmd_attribute(ctx: Context) -> dict:
    L, model = ctx.L, ctx.model
    sink_from = int(ctx.cfg["sink_from"] or L // 2 + 1)
    sink = cumulative_sink_plan(sink_from, L, ctx.cfg["positions"] or "all")
    top_n = int(ctx.cfg["top_n"] or _default_top_n(L))
    saes = attr.load_sae_dir(ctx.cfg["sae_dir"], L) if ctx.cfg["sae_dir"] else {}
    prepared = metrics.prepare(ctx.entries(), ctx.tokenizer)

    def one(pe: metrics.PreparedEntry):
        d = attr.ContrastDirection.for_answers(model, pe.minus_id, pe.plus_id)
        _, tm = model.forward(pe.minus_ids, attr.LEDGER_TRACE)
        _, tp = model.forward(pe.plus_ids, attr.LEDGER_TRACE)
        _, ts = model.forward(pe.minus_ids, attr.LEDGER_TRACE, sink)
        lm = attr.ledger_from_trace(tm, d, model)
        s1 = attr.contrast_ledgers(lm, attr.ledger_from_trace(tp, d, model))
        s2 = attr.contrast_ledgers(lm, attr.ledger_from_trace(ts, d, model))
        lat = {}
        for i, sae in saes.items():
            a = attr.latent_attribution(tm.mo[i][0], sae, d, float(tm.final_scale[0]), model, i)
            b = attr.latent_attribution(tp.mo[i][0], sae, d, float(tp.final_scale[0]), model, i)
            lat[i] = (a.scores - b.scores, a.error - b.error, max(abs(a.closure), abs(b.closure)))
        return lm, s1, s2, lat

    per = ordered_map(one, prepared, ctx.workers)
    names = [k for k, _ in per[0][0].items()]
    rows = []
    for pe, (lm, _, _, _) in zip(prepared, per):
        rows += [[pe.entry.id, k, v] for k, v in lm.items()] + [[pe.entry.id, "total", lm.total]]
    write_csv(ctx.path("ledger.csv"), ["id", "component", "contribution"], rows, ctx.chash)
    mean1 = {k: float(np.mean([p[1][k] for p in per])) for k in names}
    mean2 = {k: float(np.mean([p[2][k] for p in per])) for k in names}
    write_csv(
        ctx.path("attribution.csv"),
        ["component", "setting1_mean", "setting2_mean"],
        [[k, mean1[k], mean2[k]] for k in names],
        ctx.chash,
    )
    critical = attr.select_critical_mlps(attr.mlp_scores(mean1, L), attr.mlp_scores(mean2, L), top_n)
    max_disc = max(abs(p[0].discrepancy) / max(1.0, abs(p[0].total)) for p in per)
    doc = {
        "sink_from": sink_from,
        "top_n": top_n,
        "critical_mlps": [i + 1 for i in critical],
        "max_relative_discrepancy": max_disc,
    }
    if saes:
        lrows = []
        latents = {}
        for i in critical:
            if i not in saes:
                continue
            scores = np.mean([p[3][i][0] for p in per], axis=0)
            err = float(np.mean([p[3][i][1] for p in per]))
            idx = np.argsort(-scores, kind="stable")[: int(ctx.cfg["k"])]
            expl = attr.explain_latents(saes[i], idx, model, int(ctx.cfg["k"]))
            for j in idx:
                toks = [ctx.tokenizer.token_bytes(t).decode("utf-8", errors="replace") for t in expl[int(j)].promoted_ids()]
                lrows.append([i + 1, int(j), float(scores[j]), json.dumps(toks, ensure_ascii=False)])
            lrows.append([i + 1, "error", err, ""])
            latents[i + 1] = {"top": [int(j) for j in idx], "max_closure": max(p[3][i][2] for p in per)}
        write_csv(ctx.path("latents.csv"), ["layer", "latent", "contrastive_score", "promoted_tokens"], lrows, ctx.chash)
        doc["latents"] = latents
    write_json(ctx.path("attribute.json"), doc, ctx.chash)
    return doc


def cmd_annotate(ctx: Context) -> dict:
    layers = parse_layers(ctx.cfg["layers"], ctx.L) if ctx.cfg["layers"] else None
    n = int(ctx.cfg["n"] or 10)
    samples = ann.build_samples(ctx.entries(), ctx.model, ctx.tokenizer, layers, n, int(ctx.cfg["k"]))
    if ctx.cfg["live"]:
        fixtures, endpoint = None, ann.EndpointConfig.from_env()
    else:
        fixtures = ann.FixtureStore.load(ctx.cfg["fixtures"] or ann.default_fixtures_path())
        endpoint = None
    modes = ann.MODES if ctx.cfg["mode"] == "both" else (ctx.cfg["mode"],)
    scanned = [r.layer + 1 for r in samples[0].readouts] if samples else []
    lines, rows, doc, series = [], [], {"samples": len(samples), "layers": scanned}, {}
    for mode in modes:
        res = ann.annotate_samples(samples, ctx.tokenizer, mode, endpoint, fixtures)
        ordered = [res[s.id] for s in samples]
        for s, items in zip(samples, ordered):
            lines.append(
                json.dumps(
                    {"id": s.id, "mode": mode, "evidence": [{"layer": it.layer, "tokens": list(it.tokens), "justification": it.justification} for it in items]},
                    ensure_ascii=False,
                )
            )
        curve = ann.evidence_curve(ordered, scanned, mode)
        rows += [[mode, layer, frac] for layer, frac in curve.rows()]
        doc[mode] = curve.summary()
        series[mode] = curve.rows()
    write_text(ctx.path("annotations.jsonl"), "".join(line + "\n" for line in lines))
    write_csv(ctx.path("evidence_curve.csv"), ["mode", "layer", "fraction"], rows, ctx.chash)
    write_text(
        ctx.path("evidence_curve.svg"),
        line_svg({m: [tuple(r) for r in s] for m, s in series.items()}, "normalized evidence count", "layer", "fraction", ctx.chash),
    )
    write_json(ctx.path("annotate.json"), doc, ctx.chash)
    return doc


def cmd_checkpoints(ctx: Context) -> dict:
    paths = list(ctx.cfg["checkpoints"] or [])
    if not paths:
        raise ConfigError("--checkpoints needs at least one weight file")
    series = metrics.accuracy_over_checkpoints(paths, ctx.entries(), ctx.tokenizer, ctx.workers)
    rows = [[n, Path(p).name, *_summary_row(r)] for n, (p, r) in enumerate(zip(paths, series))]
    write_csv(ctx.path("checkpoints.csv"), ["index", "checkpoint", "acc_pos", "acc_neg", "sensitivity"], rows, ctx.chash)
    write_text(
        ctx.path("checkpoints.svg"),
        line_svg(
            {"acc_neg": [(r[0], r[3]) for r in rows], "acc_pos": [(r[0], r[2]) for r in rows]},
            "accuracy over checkpoints",
            "checkpoint index",
            "accuracy",
            ctx.chash,
        ),
    )
    doc = {"checkpoints": len(rows)}
    write_json(ctx.path("checkpoints.json"), doc, ctx.chash)
    return doc


COMMANDS = {
    "eval": cmd_eval,
    "sink-sweep": cmd_sink_sweep,
    "logitlens-eval": cmd_logitlens_eval,
    "windowed": cmd_windowed,
    "path-patch": cmd_path_patch,
    "lens-scan": cmd_lens_scan,
    "decode-not": cmd_decode_not,
    "attribute": cmd_attribute,
    "annotate": cmd_annotate,
    "checkpoints": cmd_checkpoints,
}


HELP = {
    "eval": "accuracies and sensitivity (plus surrogate accuracy when answer sets exist)",
    "sink-sweep": "cumulative attention sink from each start layer",
    "logitlens-eval": "accuracies read through the logit lens after every layer",
    "windowed": "windowed attention sink and path-patch flip rates per window centre",
    "path-patch": "path patching with one target layer set",
    "lens-scan": "top/bottom lens tokens of attention outputs on negative prompts",
    "decode-not": "cross-validated PCA+LDA decoding of the negation indicator",
    "attribute": "contrastive attribution, critical MLPs and SAE latents",
    "annotate": "evidence annotation of lens scans (recorded responses by default)",
    "checkpoints": "accuracies over a series of weight files",
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with default values for any flag")
    common.add_argument("--weights", help="weight container, or a Hugging Face checkpoint directory")
    common.add_argument("--tokenizer", help="directory holding vocab.json and merges.txt")
    common.add_argument("--bos", help="BOS token string (default: <|endoftext|> when in the vocabulary)")
    common.add_argument("--corpus", help="JSONL corpus (default: bundled seed corpus)")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="threads for per-entry work (default 1)")
    common.add_argument("--window-width", dest="window_width", type=int)
    common.add_argument("--positions", choices=("all", "last"))
    common.add_argument("--k", type=int, help="tokens per lens readout (default 10)")
    common.add_argument("--folds", type=int)
    common.add_argument("--layers", help="1-based inclusive range A..B")
    common.add_argument("--fixtures", help="recorded annotator responses (JSONL)")
    common.add_argument("--live", action="store_true", help="query the configured chat endpoint")
    common.add_argument("--states", help="decode-not: paired states .npz instead of model traces")
    common.add_argument("--sae-dir", dest="sae_dir", help="attribute: directory of layer_<i>.safetensors SAEs")
    common.add_argument("--sink-from", dest="sink_from", type=int, help="attribute: first sunk layer for setting 2")
    common.add_argument("--top-n", dest="top_n", type=int, help="attribute: MLPs kept per setting")
    common.add_argument("--donor", choices=("plus", "self"), help="path patching donor run")
    common.add_argument("--signal", choices=("ao", "mo", "resid"))
    common.add_argument("--mode", choices=("promoted", "demoted", "both"))
    common.add_argument("--n", type=int, help="number of corpus entries to use")
    common.add_argument("--checkpoints", nargs="+", help="weight files in training order")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="neglab", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        ctx = build_context(args)
        doc = COMMANDS[args.command](ctx)
    except (ConfigError, PlanError) as exc:
        print(f"neglab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NetworkError as exc:
        print(f"neglab: network error: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except (DataError, ContainerError, TokenizerError) as exc:
        print(f"neglab: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
