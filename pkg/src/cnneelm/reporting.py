"""Self-contained SVG charts and CSV tables for training runs and evaluations."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#c0392b", "#2471a3", "#229954", "#7d3c98", "#ca6f1e", "#566573", "#17a589", "#b7950b")


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def line_chart(series: dict[str, list[float]], x=None, title: str = "", ylabel: str = "",
               width: int = 640, height: int = 360) -> str:
    """SVG line chart; every series shares the x axis."""
    if not series:
        raise ValueError("no series to plot")
    n = max(len(v) for v in series.values())
    xs = np.arange(1, n + 1, dtype=float) if x is None else np.asarray(x, dtype=float)
    ys = np.concatenate([np.asarray(v, dtype=float) for v in series.values()])
    ys = ys[np.isfinite(ys)]
    lo, hi = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    ml, mr, mt, mb = 56, 120, 32, 40
    pw, ph = width - ml - mr, height - mt - mb
    x0, x1 = float(xs[0]), float(xs[-1]) if len(xs) > 1 else float(xs[0]) + 1

    def px(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def py(v):
        return mt + (1 - (v - lo) / (hi - lo)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>']
    for t in np.linspace(lo, hi, 5):
        out.append(f'<text x="{ml - 4}" y="{py(t) + 4:.1f}" text-anchor="end">{_fmt(t)}</text>')
        out.append(f'<line x1="{ml}" y1="{py(t):.1f}" x2="{ml + pw}" y2="{py(t):.1f}" stroke="#ddd"/>')
    for t in np.linspace(x0, x1, 6):
        out.append(f'<text x="{px(t):.1f}" y="{mt + ph + 16}" text-anchor="middle">{_fmt(t)}</text>')
    out.append(f'<text x="14" y="{mt + ph / 2:.1f}" transform="rotate(-90 14 {mt + ph / 2:.1f})" text-anchor="middle">{escape(ylabel)}</text>')
    for k, (name, vals) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(xs, vals) if np.isfinite(b))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = mt + 14 * k + 8
        out.append(f'<line x1="{ml + pw + 10}" y1="{ly}" x2="{ml + pw + 28}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 32}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart(labels, values, title: str = "", ylabel: str = "", ymax: float = 1.0,
              width: int = 640, height: int = 360) -> str:
    """SVG bar chart for values in [0, ymax]."""
    ml, mr, mt, mb = 56, 16, 32, 48
    pw, ph = width - ml - mr, height - mt - mb
    n = len(labels)
    if n == 0 or n != len(values):
        raise ValueError("labels and values must be non-empty and equally long")
    slot = pw / n
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
           f'<text x="14" y="{mt + ph / 2:.1f}" transform="rotate(-90 14 {mt + ph / 2:.1f})" text-anchor="middle">{escape(ylabel)}</text>']
    for t in np.linspace(0, ymax, 5):
        y = mt + (1 - t / ymax) * ph
        out.append(f'<text x="{ml - 4}" y="{y + 4:.1f}" text-anchor="end">{_fmt(t)}</text>')
    for i, (lab, v) in enumerate(zip(labels, values)):
        v = float(np.clip(v, 0, ymax))
        bh = v / ymax * ph
        x = ml + i * slot + slot * 0.15
        out.append(f'<rect x="{x:.1f}" y="{mt + ph - bh:.1f}" width="{slot * 0.7:.1f}" height="{bh:.1f}" fill="{PALETTE[i % len(PALETTE)]}"/>')
        out.append(f'<text x="{x + slot * 0.35:.1f}" y="{mt + ph - bh - 4:.1f}" text-anchor="middle">{v:.2f}</text>')
        out.append(f'<text x="{x + slot * 0.35:.1f}" y="{mt + ph + 16}" text-anchor="middle">{escape(str(lab))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def confusion_csv(confusion: np.ndarray, class_names) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred", *class_names])
    for name, row in zip(class_names, confusion):
        w.writerow([name, *(int(v) for v in row)])
    return buf.getvalue()


def per_class_csv(class_names, accuracies) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "accuracy"])
    for name, acc in zip(class_names, accuracies):
        w.writerow([name, f"{acc:.4f}"])
    return buf.getvalue()


def write_training_report(rows: list[dict], out_dir, prefix: str = "") -> list[Path]:
    """Accuracy, loss and weight/bias summary charts from per-epoch metric rows."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not rows:
        raise ValueError("no metric rows")
    epochs = [r["epoch"] for r in rows]
    col = lambda k: [r[k] for r in rows]  # noqa: E731
    written = []
    charts = {
        "accuracy": line_chart({"train": col("trainAcc"), "validation": col("valAcc")}, epochs, "Accuracy per epoch", "accuracy"),
        "loss": line_chart({"train CE": col("trainCE"), "validation CE": col("valCE")}, epochs, "Cross-entropy per epoch", "loss"),
    }
    stats = sorted(k for k in rows[0] if k[0] in "wb" and k.endswith(("Mean", "Std")))
    if stats:
        charts["weights"] = line_chart({k: col(k) for k in stats if k.startswith("w")}, epochs, "Weight summaries", "value")
        charts["biases"] = line_chart({k: col(k) for k in stats if k.startswith("b")}, epochs, "Bias summaries", "value")
    for name, svg in charts.items():
        p = out_dir / f"{prefix}{name}.svg"
        p.write_text(svg, encoding="utf-8")
        written.append(p)
    return written


def write_evaluation_report(confusion: np.ndarray, class_names, out_dir, prefix: str = "") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    totals = confusion.sum(axis=1)
    acc = np.divide(np.diag(confusion), totals, out=np.zeros(len(totals)), where=totals > 0)
    files = {
        f"{prefix}per_class.svg": bar_chart(class_names, acc, "Per-class accuracy", "accuracy"),
        f"{prefix}per_class.csv": per_class_csv(class_names, acc),
        f"{prefix}confusion.csv": confusion_csv(confusion, class_names),
    }
    written = []
    for name, text in files.items():
        p = out_dir / name
        p.write_text(text, encoding="utf-8")
        written.append(p)
    return written
