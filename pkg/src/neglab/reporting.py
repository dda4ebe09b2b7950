"""Output files: CSV with a config-hash header, JSON and bare-bones SVG line plots."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path
from typing import Sequence

HASH_PREFIX = "# config_sha256: "


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def csv_text(header: Sequence[str], rows, chash: str | None = None) -> str:
    buf = io.StringIO()
    if chash is not None:
        buf.write(f"{HASH_PREFIX}{chash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_csv(path) -> tuple[str | None, list[dict]]:
    """``(config_hash, rows)`` of a file written by :func:`write_csv`."""
    text = Path(path).read_text()
    chash = None
    if text.startswith(HASH_PREFIX):
        first, text = text.split("\n", 1)
        chash = first[len(HASH_PREFIX):]
    return chash, list(csv.DictReader(io.StringIO(text)))


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    return path


def write_csv(path, header, rows, chash: str | None = None) -> Path:
    return write_text(path, csv_text(header, rows, chash))


def write_json(path, doc: dict, chash: str | None = None) -> Path:
    if chash is not None:
        doc = {"config_sha256": chash, **doc}
    return write_text(path, json.dumps(doc, indent=2, sort_keys=True, allow_nan=False, default=_jsonable) + "\n")


def _jsonable(v):
    if hasattr(v, "tolist"):
        return v.tolist()
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def _clean(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v


def line_svg(
    series: dict[str, Sequence[tuple[float, float | None]]],
    title: str,
    xlabel: str,
    ylabel: str,
    chash: str | None = None,
    hlines: dict[str, float] | None = None,
    width: int = 480,
    height: int = 320,
) -> str:
    """Polyline chart; points with a ``None`` y are skipped."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    pts = [(x, y) for s in series.values() for x, y in s if _clean(y) is not None]
    ys = [y for _, y in pts] + [v for v in (hlines or {}).values() if _clean(v) is not None]
    xs = [x for x, _ in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    ml, mr, mt, mb = 56, 16, 28, 44
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">']
    if chash is not None:
        out.append(f"<!-- config_sha256: {chash} -->")
    out.append(f'<text x="{width / 2:.1f}" y="16" text-anchor="middle">{_esc(title)}</text>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{_esc(xlabel)}</text>')
    out.append(
        f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" transform="rotate(-90 14 {mt + ph / 2:.1f})">{_esc(ylabel)}</text>'
    )
    for v, anchor, (px, py) in ((x0, "start", (ml, height - mb + 14)), (x1, "end", (ml + pw, height - mb + 14))):
        out.append(f'<text x="{px}" y="{py}" text-anchor="{anchor}">{v:g}</text>')
    out.append(f'<text x="{ml - 4}" y="{mt + ph}" text-anchor="end">{y0:.3g}</text>')
    out.append(f'<text x="{ml - 4}" y="{mt + 8}" text-anchor="end">{y1:.3g}</text>')
    legend_y = mt + 14
    for n, (name, v) in enumerate((hlines or {}).items()):
        if _clean(v) is None:
            continue
        c = colors[(len(series) + n) % len(colors)]
        out.append(
            f'<line x1="{ml}" x2="{ml + pw}" y1="{sy(v):.2f}" y2="{sy(v):.2f}" stroke="{c}" stroke-dasharray="4 3"/>'
        )
        out.append(f'<text x="{ml + pw - 4}" y="{legend_y}" text-anchor="end" fill="{c}">{_esc(name)}</text>')
        legend_y += 13
    for n, (name, s) in enumerate(series.items()):
        c = colors[n % len(colors)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in s if _clean(y) is not None)
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{coords}"/>')
        out.append(f'<text x="{ml + pw - 4}" y="{legend_y}" text-anchor="end" fill="{c}">{_esc(name)}</text>')
        legend_y += 13
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
