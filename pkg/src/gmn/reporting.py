"""Report files: tab-delimited tables, JSON documents, aligned text and figures.

Figures are rendered off-screen with the Agg canvas, so no display is needed.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .errors import ReportIOError


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_cell(x) for x in v)
    return str(v)


def _writable(path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportIOError(f"cannot create directory {path.parent}: {exc}") from exc
    return path


def write_text(path, text: str) -> Path:
    path = _writable(path)
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ReportIOError(f"cannot write {path}: {exc}") from exc
    return path


def tsv_text(rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> str:
    columns = list(columns or (rows[0].keys() if rows else []))
    lines = ["\t".join(columns)]
    lines += ["\t".join(_cell(r.get(c, "")) for c in columns) for r in rows]
    return "\n".join(lines) + "\n"


def write_tsv(path, rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> Path:
    return write_text(path, tsv_text(rows, columns))


def read_tsv(path) -> list[dict[str, str]]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ReportIOError(f"cannot read {path}: {exc}") from exc
    if not lines:
        return []
    header = lines[0].split("\t")
    return [dict(zip(header, ln.split("\t"))) for ln in lines[1:] if ln]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(path, payload) -> Path:
    return write_text(path, json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ReportIOError(f"cannot read {path}: {exc}") from exc


def aligned_table(rows: Sequence[Mapping], columns: Sequence[str] | None = None,
                  floatfmt: str = "{:.4f}") -> str:
    """Fixed-width text table; numbers right-aligned, text left-aligned."""
    columns = list(columns or (rows[0].keys() if rows else []))

    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return floatfmt.format(v)
        return str(v)

    cells = [[fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[k]) for row in cells]) for k, c in enumerate(columns)]
    numeric = [all(isinstance(r.get(c), (int, float, np.number)) for r in rows) and rows
               for c in columns]

    def line(values):
        out = [v.rjust(w) if num else v.ljust(w) for v, w, num in zip(values, widths, numeric)]
        return "  ".join(out).rstrip()

    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(columns), sep] + [line(r) for r in cells]) + "\n"


# figures ---------------------------------------------------------------------


def _new_figure(width=6.0, height=4.0):
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    return fig, fig.add_subplot(1, 1, 1)


def _save(fig, path) -> Path:
    path = _writable(path)
    fig.tight_layout()
    try:
        fig.savefig(path)
    except OSError as exc:
        raise ReportIOError(f"cannot write figure {path}: {exc}") from exc
    return path


def plot_cmc(curves: Mapping[str, Sequence[float]], path, max_rank: int = 20) -> Path:
    fig, ax = _new_figure()
    for label, curve in curves.items():
        n = min(max_rank, len(curve))
        ax.plot(np.arange(1, n + 1), np.asarray(curve[:n]) * 100.0, marker="o", ms=3, label=label)
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    return _save(fig, path)


def plot_ablation(rows: Sequence[Mapping], path, metrics=("mAP", "R1")) -> Path:
    """Grouped bars, one group per configuration (rows need a ``config`` key)."""
    fig, ax = _new_figure(max(6.0, 1.2 * len(rows)), 4.0)
    x = np.arange(len(rows))
    width = 0.8 / len(metrics)
    for k, m in enumerate(metrics):
        vals = [float(r[m]) * 100.0 for r in rows]
        err = [float(r.get(m + "_std", 0.0)) * 100.0 for r in rows]
        ax.bar(x + (k - (len(metrics) - 1) / 2) * width, vals, width, yerr=err, capsize=3, label=m)
    ax.set_xticks(x)
    ax.set_xticklabels([str(r["config"]) for r in rows], rotation=20, ha="right")
    ax.set_ylabel("%")
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def plot_loss_curves(history: Sequence[Mapping], path,
                     keys=("l_cls", "l_tri", "l_gmn", "l_pic_pos", "l_pic_neg", "total")) -> Path:
    fig, ax = _new_figure()
    epochs = [int(h["epoch"]) for h in history]
    for key in keys:
        if not all(key in h for h in history):
            continue
        vals = [float(h[key]) for h in history]
        if any(v != 0.0 for v in vals):
            ax.plot(epochs, vals, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_scaling(sizes, seconds: Mapping[str, Sequence[float]], path, fit=None) -> Path:
    """Wall time against gallery size; ``fit`` maps a label to ``(a, b, r2)``."""
    fig, ax = _new_figure()
    sizes = np.asarray(sizes, dtype=float)
    for label, ys in seconds.items():
        ax.plot(sizes, ys, marker="o", label=label)
        if fit and label in fit:
            a, b, r2 = fit[label]
            ax.plot(sizes, a + b * sizes, ls="--", color="grey", label=f"{label} fit, R²={r2:.3f}")
    ax.set_xlabel("gallery size")
    ax.set_ylabel("seconds")
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_domain_gap(rows: Sequence[Mapping], path) -> Path:
    """Instance vs pair-space held-out accuracy per seed, with chance level."""
    fig, ax = _new_figure()
    seeds = np.arange(len(rows))
    ax.plot(seeds, [r["instance_space_accuracy"] for r in rows], "o-", label="instance features")
    ax.plot(seeds, [r["pair_space_accuracy"] for r in rows], "s-", label="pair features")
    ax.axhline(rows[0]["chance_level"], color="grey", ls=":", label="chance")
    ax.set_xlabel("seed index")
    ax.set_ylabel("held-out domain accuracy")
    ax.set_ylim(0, 1.05)
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)
