"""Artifact writers: CSV tables, JSON documents, SVG line plots, HTML highlights."""
from __future__ import annotations

import csv
import io
import json
from importlib import resources
from html import escape
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import EvalCurve, auc

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def load_schema(name: str) -> dict:
    """A JSON schema shipped with the package, e.g. ``load_schema("manifest")``."""
    return json.loads(resources.files("decsal").joinpath("schemas", f"{name}.schema.json").read_text())


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(path, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_curves_csv(path, curves: Sequence[EvalCurve]) -> None:
    write_csv(path, ("fraction", "accuracy", "explainer", "game"),
              ((repr(float(f)), repr(float(a)), c.explainer, c.game)
               for c in curves for f, a in c.points))


def read_curves_csv(path) -> list[EvalCurve]:
    groups: dict[tuple[str, str], list[tuple[float, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            groups.setdefault((row["explainer"], row["game"]), []).append(
                (float(row["fraction"]), float(row["accuracy"])))
    return [EvalCurve([p[0] for p in pts], [p[1] for p in pts], game, explainer)
            for (explainer, game), pts in groups.items()]


def auc_rows(curves: Sequence[EvalCurve]) -> list[tuple[str, float, float]]:
    """One row per explainer: (explainer, hiding AUC, revealing AUC), in first-seen order."""
    table: dict[str, dict[str, float]] = {}
    for c in curves:
        table.setdefault(c.explainer, {})[c.game] = auc(c)
    return [(name, g.get("hiding", float("nan")), g.get("revealing", float("nan")))
            for name, g in table.items()]


def write_auc_csv(path, curves: Sequence[EvalCurve]) -> None:
    write_csv(path, ("explainer", "hiding_auc", "revealing_auc"),
              ((name, repr(h), repr(r)) for name, h, r in auc_rows(curves)))


def svg_line_plot(curves: Sequence[EvalCurve], title: str, xlabel: str, ylabel: str,
                  width: int = 640, height: int = 420) -> str:
    """Accuracy curves as a standalone SVG document, one polyline per curve."""
    left, right, top, bottom = 60, 170, 40, 50
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + x * pw

    def sy(y):
        return top + (1.0 - y) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2 - right / 2:.1f}" y="22" text-anchor="middle" '
           f'font-size="15">{escape(title)}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in np.linspace(0.0, 1.0, 6):
        out.append(f'<line x1="{sx(t):.1f}" y1="{top + ph}" x2="{sx(t):.1f}" y2="{top + ph + 5}" '
                   f'stroke="black"/>')
        out.append(f'<text x="{sx(t):.1f}" y="{top + ph + 18}" text-anchor="middle" '
                   f'font-size="11">{t:.1f}</text>')
        out.append(f'<line x1="{left - 5}" y1="{sy(t):.1f}" x2="{left}" y2="{sy(t):.1f}" '
                   f'stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{sy(t) + 4:.1f}" text-anchor="end" '
                   f'font-size="11">{t:.1f}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" '
               f'font-size="13">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="13" '
               f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, c in enumerate(curves):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in c.points)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}">'
                   f'<title>{escape(c.explainer)}</title></polyline>')
        ly = top + 12 + 18 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly + 4}" font-size="11">'
                   f'{escape(c.explainer)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def minmax(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    lo, hi = scores.min(), scores.max()
    return (scores - lo) / (hi - lo) if hi > lo else np.zeros_like(scores)


def highlight_html(title: str, rows: Sequence[dict]) -> str:
    """Well-formed XHTML page; each row holds ``tokens``, ``scores`` and a ``caption``.

    Background intensity is the min-max normalized score within the row.
    """
    out = ['<!DOCTYPE html>',
           '<html xmlns="http://www.w3.org/1999/xhtml">',
           f'<head><meta charset="utf-8"/><title>{escape(title)}</title>',
           '<style>span.t{padding:1px 3px;margin:1px;border-radius:3px;display:inline-block}'
           'div.row{margin:6px 0;font-family:monospace}</style></head>',
           f'<body><h1>{escape(title)}</h1>']
    for row in rows:
        weights = minmax(row["scores"]) if len(row["scores"]) else []
        spans = "".join(
            f'<span class="t" style="background-color:rgba(220,40,40,{w:.3f})" '
            f'title="{s:.6g}">{escape(tok)}</span>'
            for tok, w, s in zip(row["tokens"], weights, row["scores"]))
        out.append(f'<div class="row"><small>{escape(row["caption"])}</small><br/>{spans}</div>')
    out.append("</body></html>")
    return "\n".join(out) + "\n"
