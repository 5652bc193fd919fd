"""Standalone SVG charts: accuracy curves and a schedule x refresh heat grid."""

from __future__ import annotations

import csv
import io
import statistics
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import FormatError
from .training import MetricsLog

W, H = 640, 400
ML, MR, MT, MB = 60, 170, 30, 50

SERIES = [
    ("proxy_train_acc", "proxy train", "#1f77b4", None),
    ("proxy_test_acc", "proxy test", "#1f77b4", "6,4"),
    ("deploy_train_acc", "deploy train", "#d62728", None),
    ("deploy_test_acc", "deploy test", "#d62728", "6,4"),
]


def _fmt(v):
    return f"{v:.2f}"


def _svg(body, width=W, height=H):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}" '
            f'width="{width}" height="{height}" font-family="sans-serif" font-size="12">\n'
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>\n'
            + "\n".join(body) + "\n</svg>\n")


def curves_svg(log: MetricsLog, title: str = "") -> str:
    epochs = [r.epoch for r in log.rows]
    x0, x1 = min(epochs), max(epochs)
    span = max(x1 - x0, 1)
    pw, ph = W - ML - MR, H - MT - MB

    def px(e):
        return ML + (e - x0) / span * pw

    def py(a):
        return MT + (1.0 - a) * ph

    body = [f'<text x="{W / 2:.0f}" y="18" text-anchor="middle">{escape(title)}</text>',
            f'<rect x="{ML}" y="{MT}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for k in range(6):
        a = k / 5
        y = _fmt(py(a))
        body.append(f'<line x1="{ML}" y1="{y}" x2="{ML + pw}" y2="{y}" stroke="#ddd"/>')
        body.append(f'<text x="{ML - 6}" y="{y}" text-anchor="end" dominant-baseline="middle">{a * 100:.0f}</text>')
    for k in range(6):
        e = x0 + span * k / 5
        body.append(f'<text x="{_fmt(px(e))}" y="{MT + ph + 18}" text-anchor="middle">{e:.0f}</text>')
    body.append(f'<text x="{ML + pw / 2:.0f}" y="{H - 10}" text-anchor="middle">epoch</text>')
    body.append(f'<text x="16" y="{MT + ph / 2:.0f}" text-anchor="middle" '
                f'transform="rotate(-90 16 {MT + ph / 2:.0f})">accuracy (%)</text>')
    for i, (col, label, color, dash) in enumerate(SERIES):
        pts = " ".join(f"{_fmt(px(r.epoch))},{_fmt(py(getattr(r, col)))}" for r in log.rows)
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        body.append(f'<polyline class="series" data-label="{label}" points="{pts}" fill="none" '
                    f'stroke="{color}" stroke-width="1.5"{dash_attr}/>')
        ly = MT + 14 + 18 * i
        body.append(f'<line x1="{W - MR + 12}" y1="{ly}" x2="{W - MR + 40}" y2="{ly}" stroke="{color}" '
                    f'stroke-width="1.5"{dash_attr}/>')
        body.append(f'<text x="{W - MR + 46}" y="{ly}" dominant-baseline="middle">{label}</text>')
    return _svg(body)


def read_summary(path):
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise FormatError(f"{path}: empty file (line 1)")
    header = rows[0]
    need = ("schedule", "refresh_r", "final_deploy_test")
    missing = [c for c in need if c not in header]
    if missing:
        raise FormatError(f"{path}: line 1 lacks columns {', '.join(missing)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise FormatError(f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
        rec = dict(zip(header, row))
        try:
            out.append((rec["schedule"], int(rec["refresh_r"]), float(rec["final_deploy_test"])))
        except ValueError:
            raise FormatError(f"{path}: non-numeric field on line {lineno}") from None
    if not out:
        raise FormatError(f"{path}: no data rows after the header (line 2)")
    return out


def heat_svg(records, title: str = "") -> str:
    """Cells hold the median final deploy test accuracy per (schedule, refresh)."""
    schedules = sorted({s for s, _, _ in records})
    refreshes = sorted({r for _, r, _ in records})
    cells = {}
    for s, r, a in records:
        cells.setdefault((s, r), []).append(a)
    cw, ch = 90, 40
    left, top = 140, 50
    width, height = left + cw * len(refreshes) + 20, top + ch * len(schedules) + 50
    body = [f'<text x="{width / 2:.0f}" y="20" text-anchor="middle">{escape(title)}</text>']
    for j, r in enumerate(refreshes):
        body.append(f'<text x="{left + cw * j + cw / 2:.0f}" y="{top - 8}" text-anchor="middle">r={r}</text>')
    for i, s in enumerate(schedules):
        y = top + ch * i
        body.append(f'<text x="{left - 8}" y="{y + ch / 2:.0f}" text-anchor="end" dominant-baseline="middle">'
                    f'{escape(s)}</text>')
        for j, r in enumerate(refreshes):
            x = left + cw * j
            vals = cells.get((s, r))
            if vals is None:
                body.append(f'<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="#eee" stroke="white"/>')
                continue
            med = statistics.median(vals)
            shade = int(255 - 200 * max(0.0, min(1.0, med)))
            body.append(f'<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="rgb({shade},{shade},255)" '
                        f'stroke="white"/>')
            body.append(f'<text x="{x + cw / 2:.0f}" y="{y + ch / 2:.0f}" text-anchor="middle" '
                        f'dominant-baseline="middle">{med * 100:.1f}</text>')
    body.append(f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle">median deploy test accuracy (%)</text>')
    return _svg(body, width, height)


def write_curves(csv_path, svg_path, title=None) -> None:
    log = MetricsLog.read_csv(csv_path)  # raises before any file is written
    Path(svg_path).write_text(curves_svg(log, title if title is not None else Path(csv_path).stem), encoding="utf-8")


def write_heat(csv_path, svg_path, title=None) -> None:
    recs = read_summary(csv_path)
    Path(svg_path).write_text(heat_svg(recs, title if title is not None else Path(csv_path).stem), encoding="utf-8")
