"""Declarative forward-pass modifications.

A plan is an immutable list of directives. Layers inside directives are
0-based; the plan builders that mirror the experiment sweeps
(:func:`cumulative_sink_plan`, :func:`windowed_sink_plan`) take 1-based layer
numbers, as do the JSON documents.

Positions are ``"all"``, ``"last"`` or a tuple of absolute token indices and
are resolved against the prompt length at forward time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Union

import numpy as np

from .errors import PlanError

ALL = "all"
LAST = "last"

Positions = Union[str, tuple]


def _layers(xs: Iterable[int]) -> frozenset[int]:
    out = frozenset(int(x) for x in xs)
    if any(x < 0 for x in out):
        raise PlanError(f"negative layer index in {sorted(out)}")
    return out


def _positions(p) -> Positions:
    if p in (ALL, LAST):
        return p
    if isinstance(p, (int, np.integer)):
        p = (p,)
    out = tuple(sorted({int(x) for x in p}))
    if any(x < 0 for x in out):
        raise PlanError(f"negative position in {out}")
    return out


def _heads(h):
    return None if h is None else frozenset(int(x) for x in h)


@dataclass(frozen=True)
class AttentionSink:
    """Restrict queries to attend only to position 0 and themselves."""

    layers: frozenset
    heads: frozenset | None = None
    positions: Positions = ALL
    kind = "sink"

    def __post_init__(self):
        object.__setattr__(self, "layers", _layers(self.layers))
        object.__setattr__(self, "heads", _heads(self.heads))
        object.__setattr__(self, "positions", _positions(self.positions))


@dataclass(frozen=True)
class AttentionKnockout:
    """Block attention from ``query`` to keys in ``[keys[0], keys[1])``."""

    layers: frozenset
    query: Positions
    keys: tuple[int, int]
    heads: frozenset | None = None
    kind = "knockout"

    def __post_init__(self):
        object.__setattr__(self, "layers", _layers(self.layers))
        object.__setattr__(self, "heads", _heads(self.heads))
        object.__setattr__(self, "query", _positions(self.query))
        a, b = (int(k) for k in self.keys)
        if a < 0 or b < a:
            raise PlanError(f"invalid key span [{a}, {b})")
        object.__setattr__(self, "keys", (a, b))


@dataclass(frozen=True, eq=False)
class FreezeAP:
    """Replace post-softmax patterns at ``positions`` with recorded ones.

    ``patterns[layer]`` has shape ``[n_heads, len(positions), T]``. Values are
    still computed from the live residual stream.
    """

    layers: frozenset
    patterns: Mapping[int, np.ndarray]
    positions: tuple
    kind = "freeze_ap"

    def __post_init__(self):
        object.__setattr__(self, "layers", _layers(self.layers))
        pos = _positions(self.positions)
        if not isinstance(pos, tuple):
            raise PlanError("FreezeAP needs explicit positions")
        object.__setattr__(self, "positions", pos)
        pats = {}
        for layer in self.layers:
            if layer not in self.patterns:
                raise PlanError(f"FreezeAP has no pattern for layer {layer}")
            p = np.array(self.patterns[layer], dtype=np.float32)
            if p.ndim != 3 or p.shape[1] != len(pos):
                raise PlanError(f"FreezeAP pattern for layer {layer} has shape {p.shape}")
            p.setflags(write=False)
            pats[layer] = p
        object.__setattr__(self, "patterns", pats)

    def __eq__(self, other):
        return isinstance(other, FreezeAP) and _key(self) == _key(other)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class PatchAO:
    """Overwrite the attention output at ``position`` with recorded vectors."""

    layers: frozenset
    position: Positions
    vectors: Mapping[int, np.ndarray]
    source: str | None = None
    kind = "patch_ao"

    def __post_init__(self):
        object.__setattr__(self, "layers", _layers(self.layers))
        pos = _positions(self.position)
        if pos == ALL or (isinstance(pos, tuple) and len(pos) != 1):
            raise PlanError("PatchAO targets a single position")
        object.__setattr__(self, "position", pos)
        vecs = {}
        for layer in self.layers:
            if layer not in self.vectors:
                raise PlanError(f"PatchAO has no vector for layer {layer}")
            v = np.array(self.vectors[layer], dtype=np.float32)
            if v.ndim != 1:
                raise PlanError(f"PatchAO vector for layer {layer} must be 1-D, got {v.shape}")
            v.setflags(write=False)
            vecs[layer] = v
        object.__setattr__(self, "vectors", vecs)

    def __eq__(self, other):
        return isinstance(other, PatchAO) and _key(self) == _key(other)

    __hash__ = None


@dataclass(frozen=True)
class ZeroAO:
    layers: frozenset
    position: Positions = ALL
    kind = "zero_ao"

    def __post_init__(self):
        object.__setattr__(self, "layers", _layers(self.layers))
        object.__setattr__(self, "position", _positions(self.position))


@dataclass(frozen=True)
class ZeroMO:
    layers: frozenset
    position: Positions = ALL
    kind = "zero_mo"

    def __post_init__(self):
        object.__setattr__(self, "layers", _layers(self.layers))
        object.__setattr__(self, "position", _positions(self.position))


Directive = Union[AttentionSink, AttentionKnockout, FreezeAP, PatchAO, ZeroAO, ZeroMO]

# directive kinds that write the same quantity; two of them may not target
# the same (layer, position)
_SLOT = {
    "sink": "pattern",
    "knockout": "pattern",
    "freeze_ap": "pattern",
    "patch_ao": "ao",
    "zero_ao": "ao",
    "zero_mo": "mo",
}


def _key(d) -> tuple:
    parts = [d.kind]
    for name in ("layers", "heads", "positions", "position", "query", "keys"):
        if hasattr(d, name):
            v = getattr(d, name)
            parts.append(tuple(sorted(v)) if isinstance(v, frozenset) else v)
    for name in ("patterns", "vectors"):
        if hasattr(d, name):
            m = getattr(d, name)
            parts.append(tuple((k, m[k].shape, m[k].tobytes()) for k in sorted(m)))
    return tuple(parts)


def _targets(d) -> Positions:
    for name in ("positions", "position", "query"):
        if hasattr(d, name):
            return getattr(d, name)
    raise AssertionError(d)


def _overlap(a: Positions, b: Positions) -> bool:
    if a == ALL or b == ALL:
        return True
    if a == LAST or b == LAST:
        return a == b
    return bool(set(a) & set(b))


def _same_sub_target(a, b) -> bool:
    # sink and knockout may share a layer when they touch different heads
    ha, hb = getattr(a, "heads", None), getattr(b, "heads", None)
    if ha is not None and hb is not None and not (ha & hb):
        return False
    if a.kind == "knockout" and b.kind == "knockout":
        # disjoint key spans on the same query compose without ambiguity
        return False
    return True


def _check_conflicts(directives: list, resolved_positions=None) -> None:
    for i, a in enumerate(directives):
        for b in directives[i + 1 :]:
            if _SLOT[a.kind] != _SLOT[b.kind]:
                continue
            if a.kind in ("sink", "knockout") and b.kind in ("sink", "knockout") and a.kind != b.kind:
                continue
            common = a.layers & b.layers
            if not common or not _same_sub_target(a, b):
                continue
            pa, pb = _targets(a), _targets(b)
            if resolved_positions is not None:
                pa, pb = resolved_positions(pa), resolved_positions(pb)
                hit = bool(set(pa) & set(pb))
            else:
                hit = _overlap(pa, pb)
            if hit:
                raise PlanError(
                    f"conflicting directives {a.kind} and {b.kind} on layer(s) {sorted(common)}"
                )


@dataclass(frozen=True)
class InterventionPlan:
    directives: tuple = ()

    def __post_init__(self):
        uniq: list = []
        keys = set()
        for d in self.directives:
            k = _key(d)
            if k in keys:
                continue
            keys.add(k)
            uniq.append(d)
        _check_conflicts(uniq)
        object.__setattr__(self, "directives", tuple(uniq))

    def __bool__(self) -> bool:
        return bool(self.directives)

    def __add__(self, other: "InterventionPlan") -> "InterventionPlan":
        return InterventionPlan(self.directives + other.directives)

    def max_layer(self) -> int:
        return max((max(d.layers) for d in self.directives if d.layers), default=-1)

    def to_json(self) -> str:
        return json.dumps({"directives": [_directive_to_dict(d) for d in self.directives]}, sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "InterventionPlan":
        doc = json.loads(s)
        return cls(tuple(_directive_from_dict(d) for d in doc.get("directives", [])))


EMPTY_PLAN = InterventionPlan()


# --------------------------------------------------------------------------
# score-level operations


def _rows(positions: Positions, t: int) -> np.ndarray:
    if positions == ALL:
        return np.arange(t)
    if positions == LAST:
        return np.array([t - 1])
    rows = np.array(positions, dtype=int)
    if rows.size and rows.max() >= t:
        raise PlanError(f"position {int(rows.max())} out of range for a {t}-token prompt")
    return rows


def _head_index(heads, n_heads: int) -> np.ndarray:
    if heads is None:
        return np.arange(n_heads)
    idx = np.array(sorted(heads), dtype=int)
    if idx.size and idx.max() >= n_heads:
        raise PlanError(f"head {int(idx.max())} out of range ({n_heads} heads)")
    return idx


def apply_sink(scores: np.ndarray, positions: Positions = ALL, heads=None) -> np.ndarray:
    """Mask every key except position 0 and the query itself for the targeted rows.

    ``scores`` is ``[n_heads, T, T]`` (pre-softmax). Returns a new array with
    the masked entries set to -inf.
    """
    out = np.array(scores, dtype=np.float32)
    n_heads, t, _ = out.shape
    rows = _rows(positions, t)
    hs = _head_index(heads, n_heads)
    keep = np.zeros((len(rows), t), dtype=bool)
    keep[:, 0] = True
    keep[np.arange(len(rows)), rows] = True
    block = np.where(keep, np.float32(0), np.float32(-np.inf))
    out[np.ix_(hs, rows, np.arange(t))] += block[None]
    return out


def apply_knockout(scores: np.ndarray, query: Positions, keys: tuple[int, int], heads=None) -> np.ndarray:
    out = np.array(scores, dtype=np.float32)
    n_heads, t, _ = out.shape
    a, b = keys
    if a >= b:
        return out
    if b > t:
        raise PlanError(f"knockout span [{a}, {b}) exceeds prompt length {t}")
    rows = _rows(query, t)
    hs = _head_index(heads, n_heads)
    out[np.ix_(hs, rows, np.arange(a, b))] = -np.inf
    return out


@dataclass
class LayerOps:
    """Directives of one plan that touch one layer, resolved for a prompt."""

    score_edits: list = field(default_factory=list)
    freeze: list = field(default_factory=list)  # (rows, patterns[H, P, T])
    ao_edits: list = field(default_factory=list)  # (rows, vector or None for zero)
    mo_zero: list = field(default_factory=list)  # rows

    def edit_scores(self, scores: np.ndarray) -> np.ndarray:
        for d in self.score_edits:
            if d.kind == "sink":
                scores = apply_sink(scores, d.positions, d.heads)
            else:
                scores = apply_knockout(scores, d.query, d.keys, d.heads)
        return scores


def resolve(plan: InterventionPlan | None, n_layers: int, n_heads: int, t: int, d_model: int) -> dict[int, LayerOps]:
    """Group a plan's directives by layer and check them against the prompt."""
    ops: dict[int, LayerOps] = {}
    if not plan:
        return ops
    if plan.max_layer() >= n_layers:
        raise PlanError(f"plan references layer {plan.max_layer()} but the model has {n_layers}")
    _check_conflicts(list(plan.directives), resolved_positions=lambda p: tuple(_rows(p, t)))
    for d in plan.directives:
        for layer in sorted(d.layers):
            lo = ops.setdefault(layer, LayerOps())
            if d.kind in ("sink", "knockout"):
                _head_index(d.heads, n_heads)
                _rows(_targets(d), t)
                lo.score_edits.append(d)
            elif d.kind == "freeze_ap":
                p = d.patterns[layer]
                if p.shape[0] != n_heads or p.shape[2] != t:
                    raise PlanError(
                        f"frozen pattern for layer {layer} has (H, T) = ({p.shape[0]}, {p.shape[2]}), "
                        f"prompt needs ({n_heads}, {t})"
                    )
                lo.freeze.append((_rows(d.positions, t), p))
            elif d.kind == "patch_ao":
                v = d.vectors[layer]
                if v.shape != (d_model,):
                    raise PlanError(f"patch vector for layer {layer} has dimension {v.shape[0]}, expected {d_model}")
                lo.ao_edits.append((_rows(d.position, t), v))
            elif d.kind == "zero_ao":
                lo.ao_edits.append((_rows(d.position, t), None))
            elif d.kind == "zero_mo":
                lo.mo_zero.append(_rows(d.position, t))
    return ops


# --------------------------------------------------------------------------
# plan builders


def sink_plan(layers: Iterable[int], positions: Positions = ALL, heads=None) -> InterventionPlan:
    layers = list(layers)
    if not layers:
        return EMPTY_PLAN
    return InterventionPlan((AttentionSink(frozenset(layers), heads, positions),))


def cumulative_sink_plan(start: int, n_layers: int, positions: Positions = ALL) -> InterventionPlan:
    """Sink every attention module from 1-based layer ``start`` through the last."""
    if not 1 <= start <= n_layers:
        raise PlanError(f"sink start layer {start} outside 1..{n_layers}")
    return sink_plan(range(start - 1, n_layers), positions)


def window_layers(center: int, width: int, n_layers: int) -> list[int]:
    """1-based layers ``[center - width//2, center + width//2]`` clipped to ``[1, n_layers]``."""
    if width < 1:
        raise PlanError(f"window width must be >= 1, got {width}")
    half = width // 2
    return [i for i in range(center - half, center + half + 1) if 1 <= i <= n_layers]


def windowed_sink_plan(
    center: int,
    width: int,
    n_layers: int,
    positions: Positions = LAST,
    freeze_from=None,
) -> InterventionPlan:
    """Sink a window of layers around 1-based ``center``.

    With ``freeze_from`` (a trace of the same prompt that recorded AP), the
    attention patterns of every layer outside the window are frozen to the
    recorded values at the traced query positions.
    """
    window = [i - 1 for i in window_layers(center, width, n_layers)]
    plan = sink_plan(window, positions)
    if freeze_from is not None:
        others = [i for i in range(n_layers) if i not in window]
        plan = plan + freeze_plan(freeze_from, others)
    return plan


def freeze_plan(trace, layers: Iterable[int]) -> InterventionPlan:
    layers = sorted(layers)
    if not layers:
        return EMPTY_PLAN
    missing = [i for i in layers if i not in trace.ap]
    if missing:
        raise PlanError(f"trace has no attention patterns for layers {missing}")
    return InterventionPlan((FreezeAP(frozenset(layers), {i: trace.ap[i] for i in layers}, trace.positions),))


def build_path_patch_plan(trace_plus, trace_minus, target_layers: Iterable[int], n_layers: int) -> InterventionPlan:
    """Path-patching plan for a forward pass on the negative prompt.

    Attention outputs at the last position of ``target_layers`` are taken
    from ``trace_plus``; all other layers keep the attention patterns of
    ``trace_minus``. MLPs are recomputed.
    """
    targets = sorted(set(int(i) for i in target_layers))
    if any(not 0 <= i < n_layers for i in targets):
        raise PlanError(f"target layers {targets} out of range")
    last = len(trace_plus.tokens) - 1
    if last not in trace_plus.positions:
        raise PlanError("positive trace did not record the last position")
    row = trace_plus.positions.index(last)
    missing = [i for i in targets if i not in trace_plus.ao]
    if missing:
        raise PlanError(f"positive trace lacks attention outputs for layers {missing}")
    directives = []
    if targets:
        directives.append(PatchAO(frozenset(targets), LAST, {i: trace_plus.ao[i][row] for i in targets}, source="plus"))
    others = [i for i in range(n_layers) if i not in targets]
    if len(trace_minus.tokens) - 1 not in trace_minus.positions:
        raise PlanError("negative trace did not record the last position")
    return InterventionPlan(tuple(directives)) + freeze_plan(trace_minus, others)


# --------------------------------------------------------------------------
# JSON


def _pos_to_json(p):
    return p if isinstance(p, str) else list(p)


def _pos_from_json(p):
    return p if isinstance(p, str) else tuple(p)


def _directive_to_dict(d) -> dict:
    out: dict = {"kind": d.kind, "layers": sorted(i + 1 for i in d.layers)}
    if d.kind in ("sink", "knockout"):
        out["heads"] = None if d.heads is None else sorted(d.heads)
    if d.kind == "sink":
        out["positions"] = _pos_to_json(d.positions)
    elif d.kind == "knockout":
        out["query"] = _pos_to_json(d.query)
        out["keys"] = list(d.keys)
    elif d.kind == "freeze_ap":
        out["positions"] = list(d.positions)
        out["patterns"] = {str(i + 1): d.patterns[i].tolist() for i in sorted(d.patterns)}
    elif d.kind == "patch_ao":
        out["position"] = _pos_to_json(d.position)
        out["vectors"] = {str(i + 1): d.vectors[i].tolist() for i in sorted(d.vectors)}
        out["source"] = d.source
    else:
        out["position"] = _pos_to_json(d.position)
    return out


def _directive_from_dict(doc: dict):
    kind = doc.get("kind")
    layers = frozenset(int(i) - 1 for i in doc["layers"])
    if kind == "sink":
        return AttentionSink(layers, doc.get("heads"), _pos_from_json(doc.get("positions", ALL)))
    if kind == "knockout":
        return AttentionKnockout(layers, _pos_from_json(doc["query"]), tuple(doc["keys"]), doc.get("heads"))
    if kind == "freeze_ap":
        pats = {int(k) - 1: np.array(v, dtype=np.float32) for k, v in doc["patterns"].items()}
        return FreezeAP(layers, pats, tuple(doc["positions"]))
    if kind == "patch_ao":
        vecs = {int(k) - 1: np.array(v, dtype=np.float32) for k, v in doc["vectors"].items()}
        return PatchAO(layers, _pos_from_json(doc["position"]), vecs, doc.get("source"))
    if kind == "zero_ao":
        return ZeroAO(layers, _pos_from_json(doc.get("position", ALL)))
    if kind == "zero_mo":
        return ZeroMO(layers, _pos_from_json(doc.get("position", ALL)))
    raise PlanError(f"unknown directive kind {kind!r}")
