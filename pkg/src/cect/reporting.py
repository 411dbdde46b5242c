"""File artifacts: confusion-matrix SVG, JSON/CSV tables, embedding exports.

JSON is written with keys in insertion order, one-space indent and a
trailing newline, so a parse/serialize cycle reproduces the bytes. CSV cells
use ``repr``-exact floats, ``true``/``false`` for flags and ``undefined``
where a metric has a zero denominator (``null`` in JSON).
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import ContractError
from .evaluation import ConfusionMatrix

UNDEFINED = "undefined"


def _write(path: Path, text: str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"{path}: cannot write ({exc.strerror or exc})") from exc
    return path


def _plain(value):
    """numpy scalars/arrays and tuples to plain JSON types."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not math.isfinite(value):
        raise ContractError(f"cannot serialize non-finite value {value}")
    return value


def to_json(obj) -> str:
    return json.dumps(_plain(obj), indent=1, allow_nan=False) + "\n"


def emit_json(obj, path) -> Path:
    return _write(path, to_json(obj))


def _cell(v) -> str:
    if v is None:
        return UNDEFINED
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _parse_cell(text: str):
    if text == UNDEFINED:
        return None
    if text in ("true", "false"):
        return text == "true"
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def to_csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def emit_csv(rows: list[dict], columns, path) -> Path:
    return _write(path, to_csv(rows, columns))


def read_csv(path) -> tuple[list[str], list[dict]]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [dict(zip(header, map(_parse_cell, r))) for r in reader]


def emit_embeddings(matrix: np.ndarray, labels, path) -> Path:
    """One row per sample: d feature columns, then the label."""
    matrix = np.asarray(matrix)
    labels = np.asarray(labels)
    if matrix.ndim != 2 or len(labels) != matrix.shape[0]:
        raise ContractError(f"embeddings {matrix.shape} and labels {labels.shape} disagree")
    cols = [f"f{i}" for i in range(matrix.shape[1])] + ["label"]
    rows = [dict(zip(cols, [*map(float, feats), int(lab)])) for feats, lab in zip(matrix, labels)]
    return emit_csv(rows, cols, path)


def render_confusion(cm: ConfusionMatrix, class_names=("positive", "negative"), title: str = "") -> str:
    """SVG 1.1 2x2 grid: true class along x, predicted class along y.

    Reading order is TP FP on the top row and FN TN on the bottom row.
    """
    if cm.total == 0:
        raise ContractError("cannot render an empty confusion matrix")
    cell, left, top = 120, 110, 60
    peak = max(cm.tp, cm.fp, cm.fn, cm.tn)
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{left + 2 * cell + 20}" '
        f'height="{top + 2 * cell + 60}" font-family="sans-serif">',
    ]
    if title:
        parts.append(f'<text x="{left + cell}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>')
    for r, row in enumerate(cm.grid()):
        for c, count in enumerate(row):
            shade = int(235 - 170 * count / peak) if peak else 235
            x, y = left + c * cell, top + r * cell
            ink = "#ffffff" if shade < 140 else "#000000"
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                         f'fill="rgb({shade},{shade},255)" stroke="#333333"/>')
            parts.append(f'<text x="{x + cell // 2}" y="{y + cell // 2 + 6}" text-anchor="middle" '
                         f'font-size="20" fill="{ink}">{count}</text>')
    for i, name in enumerate(class_names):
        parts.append(f'<text x="{left + i * cell + cell // 2}" y="{top - 8}" text-anchor="middle" '
                     f'font-size="12">{escape(name)}</text>')
        parts.append(f'<text x="{left - 8}" y="{top + i * cell + cell // 2 + 4}" text-anchor="end" '
                     f'font-size="12">{escape(name)}</text>')
    parts.append(f'<text x="{left + cell}" y="{top + 2 * cell + 36}" text-anchor="middle" font-size="14">true</text>')
    cy = top + cell
    parts.append(f'<text x="20" y="{cy}" text-anchor="middle" font-size="14" '
                 f'transform="rotate(-90 20 {cy})">predicted</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_confusion(cm: ConfusionMatrix, path, title: str = "") -> Path:
    return _write(path, render_confusion(cm, title=title))
