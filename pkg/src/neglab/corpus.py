"""Paired positive/negative prompt dataset.

Each JSONL line is one (question, template) entry::

    {"id": "animals-amphibian-t2", "x": "animal", "y": "amphibian",
     "neg_indicator": "not", "affirm_marker": "indeed", "template": 2,
     "y_plus": " frog", "y_minus": " dog", "category": "Living things"}

Optional fields: ``y_plus_set``/``y_minus_set`` (candidate answer lists),
``x_article``/``y_article`` (override the automatic a/an choice; ``""``
drops the article) and ``suffix`` (text appended after the template).
Answer strings keep their leading space: it is part of the token.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace

from .errors import CorpusError, DataError
from .model.tokenizer import Tokenizer

CATEGORIES = (
    "Living things",
    "Human domains",
    "Technology",
    "Materials & objects",
    "Environment",
    "Consumables",
    "Geography",
    "Miscellaneous",
)

TEMPLATES = {
    1: "Here is a list of {x} that are{ind} {y}:",
    2: "{X} that is{ind} {y} is",
    3: "Something that is {x} and{ind} {y} is",
    4: "What is {x} that is{ind} {y}? It is",
}

REQUIRED = ("id", "x", "y", "template", "y_plus", "y_minus", "category")
OPTIONAL = (
    "neg_indicator",
    "affirm_marker",
    "y_plus_set",
    "y_minus_set",
    "x_article",
    "y_article",
    "suffix",
)


def article(word: str) -> str:
    return "an" if word[:1].lower() in "aeiou" else "a"


def _with_article(word: str, art: str | None) -> str:
    art = article(word) if art is None else art
    return f"{art} {word}" if art else word


def render(
    x: str,
    y: str,
    template: int,
    polarity: str,
    neg_indicator: str = "not",
    affirm_marker: str = "indeed",
    x_article: str | None = None,
    y_article: str | None = None,
    suffix: str = "",
) -> str:
    """Fill one of the four templates.

    ``polarity`` is ``"negative"`` (inserts ``neg_indicator``) or
    ``"positive"`` (inserts ``affirm_marker``, or nothing when it is empty).
    Templates 2-4 put an indefinite article before X and Y unless overridden.
    """
    if not x or not y:
        raise DataError("X and Y must be non-empty")
    if template not in TEMPLATES:
        raise DataError(f"unknown template id {template}")
    if polarity == "negative":
        word = neg_indicator
    elif polarity == "positive":
        word = affirm_marker
    else:
        raise ValueError(f"polarity must be 'positive' or 'negative', got {polarity!r}")
    ind = f" {word}" if word else ""
    if template == 1:
        text = TEMPLATES[1].format(x=x, y=y, ind=ind)
    else:
        xs = _with_article(x, x_article)
        ys = _with_article(y, y_article)
        caps = xs[:1].upper() + xs[1:]
        text = TEMPLATES[template].format(X=caps, x=xs, y=ys, ind=ind)
    return text + suffix


_ART = r"(?:(?P<{name}>an?|An?) )?"
_PARSERS = {
    1: r"Here is a list of (?P<x>.+?) that are(?: (?P<ind>\S+))? (?P<y>.+):",
    2: _ART.format(name="xa") + r"(?P<x>.+?) that is(?: (?P<ind>\S+))? " + _ART.format(name="ya") + r"(?P<y>.+) is",
    3: r"Something that is " + _ART.format(name="xa") + r"(?P<x>.+?) and(?: (?P<ind>\S+))? " + _ART.format(name="ya") + r"(?P<y>.+) is",
    4: r"What is " + _ART.format(name="xa") + r"(?P<x>.+?) that is(?: (?P<ind>\S+))? " + _ART.format(name="ya") + r"(?P<y>.+)\? It is",
}


def parse(text: str, neg_indicators=("not", "no", "never", "cannot"), affirm_markers=("indeed",)) -> dict:
    """Recover template id, polarity, X and Y from a rendered prompt.

    Returns a dict with ``template``, ``polarity``, ``indicator``, ``x``,
    ``y`` and the trailing ``suffix``. Raises :class:`DataError` if no
    template matches.
    """
    for tid in (1, 4, 3, 2):
        m = re.match(_PARSERS[tid] + r"(?P<suffix>.*)$", text)
        if not m:
            continue
        ind = m.group("ind")
        x, y = m.group("x"), m.group("y")
        if ind is not None and ind not in neg_indicators and ind not in affirm_markers:
            # the "indicator" was really the first word of an article-less Y
            y = f"{ind} {y}"
            ind = None
        polarity = "negative" if ind in neg_indicators else "positive"
        return {
            "template": tid,
            "polarity": polarity,
            "indicator": ind or "",
            "x": x,
            "y": y,
            "suffix": m.group("suffix"),
        }
    raise DataError(f"prompt matches no template: {text!r}")


@dataclass(frozen=True)
class DatasetEntry:
    id: str
    x: str
    y: str
    template: int
    y_plus: str
    y_minus: str
    category: str
    neg_indicator: str = "not"
    affirm_marker: str = "indeed"
    y_plus_set: tuple | None = None
    y_minus_set: tuple | None = None
    x_article: str | None = None
    y_article: str | None = None
    suffix: str = ""

    def render(self, polarity: str) -> str:
        return render(
            self.x,
            self.y,
            self.template,
            polarity,
            self.neg_indicator,
            self.affirm_marker,
            self.x_article,
            self.y_article,
            self.suffix,
        )

    @property
    def p_plus(self) -> str:
        return self.render("positive")

    @property
    def p_minus(self) -> str:
        return self.render("negative")

    @property
    def has_answer_sets(self) -> bool:
        return bool(self.y_plus_set) and bool(self.y_minus_set)

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "x": self.x,
            "y": self.y,
            "neg_indicator": self.neg_indicator,
            "affirm_marker": self.affirm_marker,
            "template": self.template,
            "y_plus": self.y_plus,
            "y_minus": self.y_minus,
            "category": self.category,
        }
        for name in ("y_plus_set", "y_minus_set"):
            v = getattr(self, name)
            if v is not None:
                d[name] = list(v)
        for name in ("x_article", "y_article"):
            if getattr(self, name) is not None:
                d[name] = getattr(self, name)
        if self.suffix:
            d["suffix"] = self.suffix
        return d


def _entry_from_dict(d: dict) -> DatasetEntry:
    missing = [k for k in REQUIRED if k not in d]
    if missing:
        raise DataError(f"missing field(s) {missing}")
    unknown = set(d) - set(REQUIRED) - set(OPTIONAL)
    if unknown:
        raise DataError(f"unknown field(s) {sorted(unknown)}")
    for k in ("id", "x", "y", "y_plus", "y_minus", "category"):
        if not isinstance(d[k], str):
            raise DataError(f"field {k!r} must be a string")
    if not isinstance(d["template"], int) or d["template"] not in TEMPLATES:
        raise DataError(f"unknown template id {d['template']!r}")
    if not d["x"].strip() or not d["y"].strip():
        raise DataError("X and Y must be non-empty")
    if d["category"] not in CATEGORIES:
        raise DataError(f"unknown category {d['category']!r}")
    kw = {k: d[k] for k in REQUIRED}
    for k in OPTIONAL:
        if k in d and d[k] is not None:
            kw[k] = tuple(d[k]) if k.endswith("_set") else d[k]
    for k in ("y_plus_set", "y_minus_set"):
        if k in kw and (not kw[k] or not all(isinstance(a, str) and a for a in kw[k])):
            raise DataError(f"{k} must be a non-empty list of strings")
    if not kw.get("neg_indicator", "not"):
        raise DataError("neg_indicator must be non-empty")
    return DatasetEntry(**kw)


def validate_entries(entries: list[DatasetEntry], tokenizer: Tokenizer | None = None, lines=None) -> None:
    """Corpus-wide checks: unique (X, Y, template), distinct answers."""
    issues = []
    seen: dict[tuple, int] = {}
    for n, e in enumerate(entries):
        line = lines[n] if lines else n + 1
        key = (e.x, e.y, e.template)
        if key in seen:
            issues.append((line, f"duplicate (X, Y) = ({e.x!r}, {e.y!r}) in template {e.template}, first seen on line {seen[key]}"))
        else:
            seen[key] = line
        same = e.y_plus == e.y_minus
        if tokenizer is not None and not same:
            same = tokenizer.encode(e.y_plus) == tokenizer.encode(e.y_minus)
        if same:
            issues.append((line, f"degenerate answers: y_plus == y_minus == {e.y_plus!r}"))
    _raise(issues)


def _raise(issues: list) -> None:
    if not issues:
        return
    issues.sort(key=lambda it: it[0])
    line, msg = issues[0]
    err = CorpusError(msg, line)
    if len(issues) > 1:
        err.args = ("; ".join(f"line {ln}: {m}" for ln, m in issues),)
    err.issues = issues
    raise err


def load(path, tokenizer: Tokenizer | None = None) -> list[DatasetEntry]:
    """Read and validate a JSONL corpus. Errors report 1-based line numbers."""
    entries, lines, issues = [], [], []
    with open(path, encoding="utf-8") as f:
        for ln, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                d = json.loads(raw)
                if not isinstance(d, dict):
                    raise DataError("entry is not a JSON object")
                entries.append(_entry_from_dict(d))
                lines.append(ln)
            except json.JSONDecodeError as exc:
                issues.append((ln, f"malformed JSON: {exc.msg}"))
            except DataError as exc:
                issues.append((ln, str(exc)))
    _raise(issues)
    if not entries:
        raise CorpusError(f"{path}: corpus is empty")
    validate_entries(entries, tokenizer, lines)
    return entries


def dump(entries, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps(e.to_dict(), ensure_ascii=False) + "\n")


def prompt_ids(text: str, tokenizer: Tokenizer) -> list[int]:
    """Prompt tokens with the tokenizer's BOS prepended when it defines one."""
    ids = tokenizer.encode(text)
    return [tokenizer.bos_id] + ids if tokenizer.bos_id is not None else ids


def _locate(text: str, y: str, tokenizer: Tokenizer) -> int:
    idx = text.rfind(y)
    if idx < 0:
        raise DataError(f"Y {y!r} not found in prompt {text!r}")
    end = len(text[: idx + len(y)].encode("utf-8"))
    offset = 1 if tokenizer.bos_id is not None else 0
    for n, (_, a, b) in enumerate(tokenizer.encode_with_offsets(text)):
        if a < end <= b:
            return n + offset
    raise DataError(f"Y {y!r} could not be aligned to tokens")


def locate_y_span(entry: DatasetEntry, tokenizer: Tokenizer) -> tuple[int, int]:
    """Token index of Y's last token in (P+, P-), counted in :func:`prompt_ids` coordinates.

    The last occurrence of Y wins when it appears more than once.
    """
    return _locate(entry.p_plus, entry.y, tokenizer), _locate(entry.p_minus, entry.y, tokenizer)


def _clean_answers(words, tokenizer, single_token: bool) -> tuple:
    out = []
    for w in words:
        w = w.strip()
        if not w or any(c.isspace() for c in w):
            continue
        a = " " + w
        if tokenizer is not None:
            ids = tokenizer.encode(a)
            if not ids or (single_token and len(ids) != 1):
                continue
        if a not in out:
            out.append(a)
    return tuple(out)


def expand_answers(
    entry: DatasetEntry,
    positive: list[str] | None,
    negative: list[str] | None,
    tokenizer: Tokenizer | None = None,
    single_token: bool = False,
) -> DatasetEntry:
    """Attach candidate answer sets after filtering and de-duplication.

    Multi-word items are dropped; kept answers get a leading space. With
    ``single_token`` only answers that are one token under ``tokenizer``
    survive.
    """
    updates = {}
    for name, words in (("y_plus_set", positive), ("y_minus_set", negative)):
        if words is None:
            continue
        cleaned = _clean_answers(words, tokenizer, single_token)
        if not cleaned:
            raise DataError(f"{entry.id}: no usable answers left for {name}")
        updates[name] = cleaned
    return replace(entry, **updates)


def load_seed_corpus(tokenizer: Tokenizer | None = None) -> list[DatasetEntry]:
    from .model.toy import data_path

    return load(data_path("seed_corpus.jsonl"), tokenizer)


def answer_vocabulary(entries) -> list[str]:
    """Every distinct answer string in the corpus, in first-seen order."""
    out: dict[str, None] = {}
    for e in entries:
        for a in (e.y_plus, e.y_minus, *(e.y_plus_set or ()), *(e.y_minus_set or ())):
            out.setdefault(a, None)
    return list(out)
