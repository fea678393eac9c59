"""Deterministic artifact writing: JSON, CSV with a provenance line, and small SVG line plots."""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np


def _clean(obj):
    """Make ``obj`` JSON-serializable with stable float text; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(_clean(obj), sort_keys=True).encode()).hexdigest()


class ArtifactWriter:
    """Writes every artifact of one run under ``out`` and stamps it with the manifest hash and seed."""

    def __init__(self, out: Path, manifest_hash: str, seed: int):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_hash = manifest_hash
        self.seed = int(seed)
        self.written: list[str] = []

    def _path(self, name: str) -> Path:
        self.written.append(name)
        return self.out / name

    def json(self, name: str, payload: dict) -> None:
        body = dict(payload)
        body["manifest_hash"] = self.manifest_hash
        body["seed"] = self.seed
        self._path(name).write_text(canonical_json(body))

    def csv(self, name: str, text: str) -> None:
        head = f"# manifest_hash={self.manifest_hash} seed={self.seed}\n"
        self._path(name).write_text(head + text)

    def svg(self, name: str, series, title: str = "", xlabel: str = "", ylabel: str = "",
            logy: bool = False) -> None:
        self._path(name).write_text(line_plot(series, title, xlabel, ylabel, logy,
                                              note=f"manifest_hash={self.manifest_hash} seed={self.seed}"))


_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _fmt(v: float) -> str:
    return f"{v:.3g}"


def line_plot(series: Sequence[tuple], title: str = "", xlabel: str = "", ylabel: str = "",
              logy: bool = False, width: int = 480, height: int = 320, note: str = "") -> str:
    """Polylines with axes and tick labels; ``series`` holds ``(x, y, label)`` triples."""
    left, right, top, bottom = 60, 20, 30, 45
    xs_all, ys_all = [], []
    prepared = []
    for x, y, label in series:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if logy:
            keep = y > 0
            x, y = x[keep], np.log10(y[keep])
        keep = np.isfinite(x) & np.isfinite(y)
        x, y = x[keep], y[keep]
        prepared.append((x, y, label))
        xs_all.append(x)
        ys_all.append(y)
    xs = np.concatenate(xs_all) if xs_all else np.zeros(1)
    ys = np.concatenate(ys_all) if ys_all else np.zeros(1)
    if xs.size == 0:
        xs, ys = np.zeros(1), np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = width - left - right, height - top - bottom

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return top + (1 - (v - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">']
    if note:
        out.append(f"<desc>{note}</desc>")
    out.append(f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>')
    out.append(f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>')
    out.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>')
    for i in range(5):
        fx = x0 + (x1 - x0) * i / 4
        fy = y0 + (y1 - y0) * i / 4
        ty = _fmt(10 ** fy) if logy else _fmt(fy)
        out.append(f'<text x="{sx(fx):.1f}" y="{top + ph + 15}" text-anchor="middle">{_fmt(fx)}</text>')
        out.append(f'<text x="{left - 5}" y="{sy(fy) + 4:.1f}" text-anchor="end">{ty}</text>')
    for j, (x, y, label) in enumerate(prepared):
        color = _COLORS[j % len(_COLORS)]
        if len(x) == 0:
            continue
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{left + pw - 5}" y="{top + 12 + 13 * j}" text-anchor="end" fill="{color}">{label}</text>')
    out.append(f'<text x="{width / 2}" y="{top - 10}" text-anchor="middle" font-size="13">{title}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 8}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="14" y="{top + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2})">{ylabel}</text>')
    out.append("</svg>\n")
    return "\n".join(out)
