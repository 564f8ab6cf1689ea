"""Result emission: CSV and JSON tables, a text summary and small SVG plots.

Layout: ``{out}/{experiment_id}/{config_hash}/``.  Files are written into a
temporary sibling directory and moved into place only once complete, so a
failed run leaves nothing behind.  Output contains no timestamps; identical
inputs give identical bytes.
"""
from __future__ import annotations

import csv
import json
import math
import os
import shutil
import tempfile
from dataclasses import asdict

import numpy as np

FIELDS = ("experiment_id", "beta", "seed", "step", "metric_name", "metric_value", "config_hash")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if not math.isfinite(v) else v
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj):
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def format_summary(title, summary, indent=0):
    lines = [title] if title else []
    pad = "  " * indent
    for key in sorted(summary):
        val = summary[key]
        if isinstance(val, dict):
            lines.append(f"{pad}{key}:")
            lines.extend(format_summary("", val, indent + 1))
        elif isinstance(val, (list, tuple)):
            if val and all(isinstance(v, (int, float)) for v in val):
                lines.append(f"{pad}{key}: [" + ", ".join(_fmt(v) for v in val) + "]")
            else:
                lines.append(f"{pad}{key}: {val}")
        else:
            lines.append(f"{pad}{key}: {_fmt(val)}")
    return lines


def _fmt(v):
    if isinstance(v, bool) or v is None:
        return str(v)
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def write_result(result, out_dir, config=None, plots=True):
    """Write one experiment's files; returns the final directory."""
    final = os.path.join(out_dir, result.experiment_id, result.config_hash)
    parent = os.path.dirname(final)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".partial-", dir=parent)
    try:
        rows = result.sorted_records()
        with open(os.path.join(tmp, "table.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(FIELDS)
            for r in rows:
                w.writerow([r.experiment_id, repr(float(r.beta)), r.seed, r.step, r.metric_name,
                            repr(float(r.metric_value)), r.config_hash])
        payload = {
            "experiment_id": result.experiment_id,
            "config_hash": result.config_hash,
            "config": config,
            "summary": result.summary,
            "records": [asdict(r) for r in rows],
        }
        with open(os.path.join(tmp, "table.json"), "w") as fh:
            fh.write(dumps(payload))
        text = format_summary(f"{result.experiment_id} [{result.config_hash}]", result.summary)
        with open(os.path.join(tmp, "summary.txt"), "w") as fh:
            fh.write("\n".join(text) + "\n")
        if plots:
            for name, spec in sorted(result.plots.items()):
                with open(os.path.join(tmp, f"{name}.svg"), "w") as fh:
                    fh.write(svg_plot(spec, title=f"{result.experiment_id}: {name}"))
        os.chmod(tmp, 0o755)
        if os.path.exists(final):
            shutil.rmtree(final)
        os.replace(tmp, final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return final


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def svg_plot(spec, title="", width=480, height=320):
    """Minimal line/scatter plot with optional log axes."""
    series = {k: [(float(x), float(y)) for x, y in v if y is not None and math.isfinite(float(y))]
              for k, v in spec["series"].items()}
    logx, logy = spec.get("logx", False), spec.get("logy", False)
    pts = [p for s in series.values() for p in s if (not logx or p[0] > 0) and (not logy or p[1] > 0)]
    ml, mr, mt, mb = 60, 110, 28, 40
    pw, ph = width - ml - mr, height - mt - mb
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="10">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="12">{_esc(title)}</text>']
    if not pts:
        out.append("</svg>")
        return "\n".join(out) + "\n"

    def tx(v):
        return math.log10(v) if logx else v

    def ty(v):
        return math.log10(v) if logy else v

    xs = [tx(p[0]) for p in pts]
    ys = [ty(p[1]) for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1

    def px(v):
        return ml + (tx(v) - x0) / (x1 - x0) * pw

    def py(v):
        return mt + ph - (ty(v) - y0) / (y1 - y0) * ph

    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for lo, hi, axis, is_log in ((x0, x1, "x", logx), (y0, y1, "y", logy)):
        for t in np.linspace(lo, hi, 5):
            label = f"1e{t:.1f}" if is_log else f"{t:.3g}"
            if axis == "x":
                xp = ml + (t - lo) / (hi - lo) * pw
                out.append(f'<text x="{xp:.1f}" y="{mt + ph + 14}" text-anchor="middle">{label}</text>')
            else:
                yp = mt + ph - (t - lo) / (hi - lo) * ph
                out.append(f'<text x="{ml - 4}" y="{yp + 3:.1f}" text-anchor="end">{label}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">{_esc(spec.get("xlabel", ""))}</text>')
    out.append(f'<text x="12" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 12 {mt + ph / 2:.1f})">{_esc(spec.get("ylabel", ""))}</text>')
    for i, (name, s) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        s = [p for p in s if (not logx or p[0] > 0) and (not logy or p[1] > 0)]
        coords = [(px(x), py(y)) for x, y in s]
        if spec.get("kind") == "line" and len(coords) > 1:
            d = " ".join(f"{a:.2f},{b:.2f}" for a, b in coords)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{d}"/>')
        for a, b in coords:
            out.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="2.5" fill="{color}"/>')
        ly = mt + 12 + 14 * i
        out.append(f'<rect x="{ml + pw + 8}" y="{ly - 7}" width="10" height="3" fill="{color}"/>')
        out.append(f'<text x="{ml + pw + 22}" y="{ly}">{_esc(name)}</text>')
    for name, xv in sorted(spec.get("vlines", {}).items()):
        if (not logx or xv > 0) and x0 <= tx(xv) <= x1:
            xp = px(xv)
            out.append(f'<line x1="{xp:.2f}" y1="{mt}" x2="{xp:.2f}" y2="{mt + ph}" stroke="gray" stroke-dasharray="4 3"/>')
            out.append(f'<text x="{xp + 3:.2f}" y="{mt + 10}" fill="gray">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
