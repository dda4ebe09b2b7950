"""Evidence annotation of lens readouts through an external chat model.

Live requests go to any chat-completions compatible endpoint. Tests and
the default CLI run replay recorded responses from a fixture file instead,
keyed by a hash of the request, so no network access is needed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import httpx

from .corpus import DatasetEntry, prompt_ids
from .errors import ConfigError, DataError, EvidenceParseError, NetworkError
from .lenses import DEFAULT_K, LensReadout, lens_scan
from .model.tokenizer import Tokenizer
from .model.toy import data_path

log = logging.getLogger(__name__)

PROMOTED = "promoted"
DEMOTED = "demoted"
MODES = (PROMOTED, DEMOTED)
IN_FLIGHT = 4

ENV_API_KEY = "NEGLAB_API_KEY"
ENV_BASE_URL = "NEGLAB_BASE_URL"
ENV_MODEL = "NEGLAB_MODEL"


def _template(name: str) -> str:
    return data_path(f"prompts/{name}").read_text(encoding="utf-8")


# ---------------------------------------------------------------------------
# requests


def _token_list(tokens: Sequence[str]) -> str:
    return json.dumps(list(tokens), ensure_ascii=False)


def build_annotation_prompt(entry: DatasetEntry, readouts: Sequence[LensReadout], tokenizer: Tokenizer, mode: str = PROMOTED) -> str:
    """Instruction text with the negative prompt and one block per readout layer."""
    if mode not in MODES:
        raise ValueError(f"unknown annotation mode {mode!r}")
    if not readouts:
        raise DataError(f"{entry.id}: no readouts to annotate")
    lines = [
        "#### Prompt to analyze",
        "",
        f"- {entry.p_minus}",
        "",
        "In this prompt:",
        f'* **A** = "{entry.x}"',
        f'* **B** = "{entry.y}"',
        "",
        "#### Attention outputs" if mode == PROMOTED else "#### Most suppressed tokens per attention output",
        "",
    ]
    for r in readouts:
        ids = r.promoted_ids() if mode == PROMOTED else r.demoted_ids()
        toks = [tokenizer.token_bytes(t).decode("utf-8", errors="replace") for t in ids]
        lines.append(f"- `{r.layer + 1}_attn_out`: {_token_list(toks)}")
    name = "annotation_promoted.txt" if mode == PROMOTED else "annotation_demoted.txt"
    return _template(name).replace("{{INPUT}}", "\n".join(lines))


def annotation_messages(prompt: str) -> list[dict]:
    return [{"role": "user", "content": prompt}]


def answer_generation_messages(x_plural: str, y_plural: str, negative: bool, n: int = 5) -> list[dict]:
    """Messages asking for single-word answers to the positive or negative stem.

    ``negative=True`` asks for examples of X that are NOT Y, i.e. answers for
    the negative prompt.
    """
    user = _template("answers_user.txt").format(n=n, x=x_plural, y=y_plural, neg="NOT " if negative else "")
    return [
        {"role": "system", "content": _template("answers_system.txt").strip()},
        {"role": "user", "content": user.strip()},
    ]


def parse_answer_list(raw: str) -> list[str]:
    """Comma-separated words; multi-word items are dropped."""
    out = []
    for item in raw.replace("\n", ",").split(","):
        w = item.strip().strip(".").strip()
        if w and not any(c.isspace() for c in w) and w not in out:
            out.append(w)
    return out


def request_hash(messages: list[dict]) -> str:
    blob = json.dumps({"messages": messages}, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# transport


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    api_key_env: str = ENV_API_KEY
    timeout: float = 60.0
    max_attempts: int = 3
    backoff: float = 1.0
    temperature: float = 0.0

    @classmethod
    def from_env(cls, **overrides) -> "EndpointConfig":
        base = overrides.pop("base_url", None) or os.environ.get(ENV_BASE_URL)
        model = overrides.pop("model", None) or os.environ.get(ENV_MODEL)
        if not base or not model:
            raise ConfigError(f"set {ENV_BASE_URL} and {ENV_MODEL} for live annotation")
        return cls(base, model, **overrides)


class FixtureStore:
    """Recorded responses: JSONL lines ``{"request_hash": ..., "response": ...}``."""

    def __init__(self, records: dict[str, str] | None = None):
        self.records = dict(records or {})

    @classmethod
    def load(cls, path) -> "FixtureStore":
        records = {}
        with open(path, encoding="utf-8") as f:
            for n, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    doc = json.loads(line)
                    records[doc["request_hash"]] = doc["response"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise DataError(f"{path}: line {n}: bad fixture record ({exc})") from None
        return cls(records)

    def add(self, messages: list[dict], response: str) -> None:
        self.records[request_hash(messages)] = response

    def lookup(self, messages: list[dict]) -> str:
        h = request_hash(messages)
        try:
            return self.records[h]
        except KeyError:
            raise DataError(f"no recorded response for request {h[:12]}") from None

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for h in sorted(self.records):
                f.write(json.dumps({"request_hash": h, "response": self.records[h]}, ensure_ascii=False) + "\n")


def call_chat(
    messages: list[dict],
    endpoint: EndpointConfig | None = None,
    fixtures: FixtureStore | None = None,
    client: httpx.Client | None = None,
    sleep=time.sleep,
) -> str:
    """Response text for one chat request.

    With ``fixtures`` the recorded response is returned and nothing touches
    the network. Otherwise the request is POSTed to
    ``{base_url}/chat/completions``; transport errors, 429 and 5xx are
    retried with exponential backoff, other non-2xx statuses fail at once.
    """
    if fixtures is not None:
        return fixtures.lookup(messages)
    if endpoint is None:
        raise ConfigError("no endpoint configured and no fixtures given")
    key = os.environ.get(endpoint.api_key_env)
    if not key:
        raise ConfigError(f"missing credential: environment variable {endpoint.api_key_env} is not set")
    url = endpoint.base_url.rstrip("/") + "/chat/completions"
    body = {"model": endpoint.model, "messages": messages, "temperature": endpoint.temperature}
    headers = {"Authorization": f"Bearer {key}"}
    own = client is None
    client = client or httpx.Client(timeout=endpoint.timeout)
    last = None
    try:
        for attempt in range(1, endpoint.max_attempts + 1):
            log.info("chat request %s to %s (attempt %d)", request_hash(messages)[:12], url, attempt)
            try:
                resp = client.post(url, json=body, headers=headers)
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}"
            else:
                if resp.is_success:
                    try:
                        return resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError):
                        raise NetworkError("malformed chat completion response") from None
                if resp.status_code != 429 and resp.status_code < 500:
                    raise NetworkError(f"endpoint returned HTTP {resp.status_code}")
                last = f"HTTP {resp.status_code}"
            if attempt < endpoint.max_attempts:
                sleep(endpoint.backoff * 2 ** (attempt - 1))
    finally:
        if own:
            client.close()
    raise NetworkError(f"chat request failed after {endpoint.max_attempts} attempts ({last})")


# ---------------------------------------------------------------------------
# parsing


@dataclass(frozen=True)
class EvidenceItem:
    layer: int  # 1-based, as written by the annotator
    tokens: tuple
    justification: str


_FENCE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.S)


def _first_array(raw: str):
    for block in _FENCE.findall(raw):
        try:
            doc = json.loads(block)
        except json.JSONDecodeError:
            continue
        if isinstance(doc, list):
            return doc
    dec = json.JSONDecoder()
    for m in re.finditer(r"\[", raw):
        try:
            doc, _ = dec.raw_decode(raw, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(doc, list):
            return doc
    raise EvidenceParseError("no JSON array found in response")


def parse_evidence(raw: str, layers: Sequence[int] | None = None) -> list[EvidenceItem]:
    """Evidence items from an annotator response.

    ``layers`` (1-based), when given, is the scanned range; items outside it
    are rejected.
    """
    doc = _first_array(raw)
    out = []
    for n, item in enumerate(doc):
        if not isinstance(item, dict):
            raise EvidenceParseError(f"item {n} is not an object")
        layer, tokens, why = item.get("layer"), item.get("tokens"), item.get("justification", "")
        if isinstance(layer, str) and layer.strip().isdigit():
            layer = int(layer)
        if not isinstance(layer, int) or isinstance(layer, bool):
            raise EvidenceParseError(f"item {n}: layer must be an integer")
        if not isinstance(tokens, list) or not tokens or not all(isinstance(t, str) for t in tokens):
            raise EvidenceParseError(f"item {n}: tokens must be a non-empty list of strings")
        if not isinstance(why, str):
            raise EvidenceParseError(f"item {n}: justification must be a string")
        if layers is not None and layer not in layers:
            raise EvidenceParseError(f"item {n}: layer {layer} outside the scanned range")
        out.append(EvidenceItem(layer, tuple(tokens), why))
    return out


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class EvidenceCurve:
    layers: tuple  # 1-based
    fractions: tuple
    any_layer: float
    mode: str
    n_samples: int

    def rows(self) -> list[list]:
        return [[layer, frac] for layer, frac in zip(self.layers, self.fractions)]

    def summary(self) -> dict:
        return {"mode": self.mode, "n_samples": self.n_samples, "any_layer": self.any_layer}


def evidence_curve(annotations: Sequence[Sequence[EvidenceItem]], layers: Sequence[int], mode: str = PROMOTED) -> EvidenceCurve:
    """Per-layer fraction of samples with at least one evidence item there."""
    layers = tuple(layers)
    n = len(annotations)
    if n == 0:
        return EvidenceCurve(layers, tuple(0.0 for _ in layers), 0.0, mode, 0)
    hit = [{it.layer for it in items} for items in annotations]
    fr = tuple(sum(1 for h in hit if layer in h) / n for layer in layers)
    any_layer = sum(1 for h in hit if h & set(layers)) / n
    return EvidenceCurve(layers, fr, any_layer, mode, n)


@dataclass(frozen=True)
class Sample:
    id: str
    entry: DatasetEntry
    readouts: tuple


def annotate_samples(
    samples: Sequence[Sample],
    tokenizer: Tokenizer,
    mode: str = PROMOTED,
    endpoint: EndpointConfig | None = None,
    fixtures: FixtureStore | None = None,
    in_flight: int = IN_FLIGHT,
    client: httpx.Client | None = None,
) -> dict[str, list[EvidenceItem]]:
    """Annotate every sample with at most ``in_flight`` requests outstanding.

    Results are keyed by sample id, so completion order does not matter.
    """

    def one(s: Sample):
        layers = [r.layer + 1 for r in s.readouts]
        prompt = build_annotation_prompt(s.entry, s.readouts, tokenizer, mode)
        raw = call_chat(annotation_messages(prompt), endpoint, fixtures, client)
        return s.id, parse_evidence(raw, layers)

    with ThreadPoolExecutor(max_workers=max(1, in_flight)) as pool:
        return dict(pool.map(one, samples))


def middle_third(n_layers: int) -> list[int]:
    """0-based layers of the middle third of the model (at least one)."""
    start = n_layers // 3
    stop = max(start + 1, (2 * n_layers + 2) // 3)
    return list(range(start, min(stop, n_layers)))


def build_samples(entries, model, tokenizer: Tokenizer, layers=None, n: int = 10, k: int = DEFAULT_K) -> list[Sample]:
    """Attention-output lens scans of the first ``n`` negative prompts."""
    layers = middle_third(model.config.n_layers) if layers is None else list(layers)
    out = []
    for e in list(entries)[:n]:
        scan = lens_scan(model, prompt_ids(e.p_minus, tokenizer), layers, "ao", k)
        out.append(Sample(e.id, e, tuple(scan)))
    return out


def default_fixtures_path() -> Path:
    return data_path("fixtures/annotations.jsonl")
