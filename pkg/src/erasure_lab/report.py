"""CSV, JSON and SVG emitters.

Every file carries a metadata block (tool version, resolved config, seed
and the sign convention) and is byte-for-byte reproducible: floats are
written with 9 significant digits, line endings are LF, keys are sorted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from .autodiff import ContractError, DimensionError
from .erasure import SIGN_CONVENTION, ImportanceReport, signed_log

TOOL = "erasure-lab"
VERSION = "0.1.0"
SCALES = ("linear", "signed_log")

NEG_RGB = (33, 102, 172)
MID_RGB = (255, 255, 255)
POS_RGB = (178, 24, 43)


def metadata(config: Mapping | None = None, seed: int | None = None, **extra) -> dict:
    meta = {"tool": TOOL, "version": VERSION, "sign_convention": SIGN_CONVENTION, "seed": seed, "config": dict(config or {})}
    meta.update(extra)
    return meta


def fmt(x) -> str:
    """Decimal text with 9 significant digits; integers and strings pass through."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if x == 0.0:
            return "0"
        return format(x, ".9g")
    return str(x)


def _csv_cell(x) -> str:
    s = fmt(x)
    if any(c in s for c in ',"\n\r'):
        s = '"' + s.replace('"', '""') + '"'
    return s


def _write(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def csv_text(header: Sequence[str], rows: Iterable[Sequence], meta: Mapping | None = None) -> str:
    lines = []
    if meta is not None:
        lines.append("# " + json.dumps(meta, sort_keys=True))
    lines.append(",".join(_csv_cell(h) for h in header))
    width = len(header)
    for row in rows:
        if len(row) != width:
            raise ContractError(f"row has {len(row)} cells, header has {width}")
        lines.append(",".join(_csv_cell(v) for v in row))
    return "\n".join(lines) + "\n"


def emit_table_csv(header, rows, path, meta: Mapping | None = None) -> None:
    _write(path, csv_text(header, rows, meta))


def emit_csv(reports: ImportanceReport | Sequence[ImportanceReport], path, meta: Mapping | None = None) -> None:
    """``target,I,n,skipped``: one row per importance report."""
    if isinstance(reports, ImportanceReport):
        reports = [reports]
    rows = [(r.target, r.I, r.n_examples, r.skipped_examples) for r in reports]
    emit_table_csv(("target", "I", "n", "skipped"), rows, path, meta)


def emit_detail_csv(reports: ImportanceReport | Sequence[ImportanceReport], path, meta: Mapping | None = None) -> None:
    """``target,id,S,S_erased,contribution``: one row per scored example."""
    if isinstance(reports, ImportanceReport):
        reports = [reports]
    rows = [(r.target, s.id, s.S, s.S_erased, s.contribution) for r in reports for s in r.per_example]
    emit_table_csv(("target", "id", "S", "S_erased", "contribution"), rows, path, meta)


def _round(x):
    if isinstance(x, float):
        return float(fmt(x)) if np.isfinite(x) else str(x)
    if isinstance(x, dict):
        return {str(k): _round(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round(v) for v in x]
    if isinstance(x, np.generic):
        return _round(x.item())
    return x


def json_text(body: Mapping, meta: Mapping | None = None) -> str:
    doc = {"metadata": dict(meta or metadata()), **body}
    return json.dumps(_round(doc), sort_keys=True, indent=1) + "\n"


def report_document(reports: Sequence[ImportanceReport], meta: Mapping | None = None) -> str:
    body = {
        "reports": [
            {
                "target": r.target,
                "I": r.I,
                "n_examples": r.n_examples,
                "skipped_examples": r.skipped_examples,
                "metadata": dict(r.metadata),
            }
            for r in reports
        ]
    }
    return json_text(body, meta)


def emit_json(body: Mapping, path, meta: Mapping | None = None) -> None:
    _write(path, json_text(body, meta))


# ------------------------------------------------------------------ SVG


@dataclass(frozen=True)
class HeatmapData:
    row_labels: tuple[str, ...]
    col_labels: tuple[str, ...]
    matrix: np.ndarray
    scale: str = "linear"

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise DimensionError(f"heatmap matrix must be 2-D, got shape {m.shape}")
        if m.shape != (len(self.row_labels), len(self.col_labels)):
            raise DimensionError(
                f"matrix {m.shape} does not match {len(self.row_labels)} row and {len(self.col_labels)} column labels"
            )
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES}, got {self.scale!r}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "row_labels", tuple(str(r) for r in self.row_labels))
        object.__setattr__(self, "col_labels", tuple(str(c) for c in self.col_labels))

    def display_values(self) -> np.ndarray:
        return signed_log(self.matrix) if self.scale == "signed_log" else self.matrix


def color(value: float, bound: float) -> str:
    """Blue below zero, white at zero, red above; saturates at ``+-bound``."""
    t = 0.0 if bound <= 0 or not np.isfinite(value) else max(-1.0, min(1.0, value / bound))
    end = POS_RGB if t > 0 else NEG_RGB
    a = abs(t)
    rgb = [round(m + (e - m) * a) for m, e in zip(MID_RGB, end)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _metadata_element(meta: Mapping) -> str:
    return "<metadata>" + escape(json.dumps(_round(dict(meta)), sort_keys=True)) + "</metadata>"


def svg_heatmap(data: HeatmapData, meta: Mapping | None = None, bound: float | None = None, cell: int = 16) -> str:
    if data.matrix.size == 0:
        raise ContractError("cannot draw a heatmap of an empty matrix")
    values = data.display_values()
    finite = values[np.isfinite(values)]
    if bound is None:
        bound = float(np.max(np.abs(finite))) if finite.size else 0.0
    n_rows, n_cols = values.shape
    left = 8 + 7 * max(len(r) for r in data.row_labels)
    top = 8 + 7 * max(len(c) for c in data.col_labels)
    grid_w, grid_h = n_cols * cell, n_rows * cell
    bar_x = left + grid_w + 24
    width = bar_x + 90
    height = max(top + grid_h, top + 160) + 20
    meta = dict(meta or metadata())
    meta.update({"scale": data.scale, "bound": bound})
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="11">',
        _metadata_element(meta),
        '<g class="cells">',
    ]
    for i in range(n_rows):
        for j in range(n_cols):
            v = values[i, j]
            out.append(
                f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                f'fill="{color(v, bound)}"><title>{escape(data.row_labels[i])} / '
                f"{escape(data.col_labels[j])}: {fmt(float(data.matrix[i, j]))}</title></rect>"
            )
    out.append("</g>")
    out.append('<g class="row-labels">')
    for i, lab in enumerate(data.row_labels):
        out.append(f'<text x="{left - 4}" y="{top + i * cell + cell * 0.75:g}" text-anchor="end">{escape(lab)}</text>')
    out.append("</g>")
    out.append('<g class="col-labels">')
    for j, lab in enumerate(data.col_labels):
        x, y = left + j * cell + cell * 0.75, top - 4
        out.append(f'<text x="{x:g}" y="{y}" transform="rotate(-90 {x:g} {y})">{escape(lab)}</text>')
    out.append("</g>")
    # colour bar: vertical gradient from +bound (top) to -bound (bottom)
    out.append('<g class="legend">')
    out.append('<defs><linearGradient id="colorbar" x1="0" y1="0" x2="0" y2="1">')
    for k in range(5):
        v = bound * (1.0 - k / 2.0)
        out.append(f'<stop offset="{k * 25}%" stop-color="{color(v, bound)}"/>')
    out.append("</linearGradient></defs>")
    steps = 21
    out.append(f'<path d="M{bar_x} {top}h14v{steps * 7}h-14z" fill="url(#colorbar)" stroke="#888888"/>')
    label = "signed log" if data.scale == "signed_log" else "importance"
    out.append(f'<text x="{bar_x + 18}" y="{top + 7}">{fmt(bound)}</text>')
    out.append(f'<text x="{bar_x + 18}" y="{top + 10 * 7 + 5}">0</text>')
    out.append(f'<text x="{bar_x + 18}" y="{top + steps * 7}">{fmt(-bound)}</text>')
    out.append(f'<text x="{bar_x}" y="{top + steps * 7 + 16}">{escape(label)}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_svg_heatmap(data: HeatmapData, path, meta: Mapping | None = None, bound: float | None = None) -> None:
    _write(path, svg_heatmap(data, meta, bound))


# ------------------------------------------------------- erasure renderings


def _label_name(label: int, names: Sequence[str] | None) -> str:
    if names and 0 <= label < len(names):
        return names[label]
    return str(label)


def erasure_text(tokens: Sequence[str], removed: Iterable[int], before: int, after: int, names=None) -> str:
    """Tokens with each removed run wrapped in ``[[...]]``, followed by the label change."""
    removed = set(removed)
    parts, run = [], []
    for t, tok in enumerate(tokens):
        if t in removed:
            run.append(tok)
            continue
        if run:
            parts.append("[[" + " ".join(run) + "]]")
            run = []
        parts.append(tok)
    if run:
        parts.append("[[" + " ".join(run) + "]]")
    return f"{' '.join(parts)}\t{_label_name(before, names)} -> {_label_name(after, names)}"


def erasure_svg(tokens: Sequence[str], removed: Iterable[int], before: int, after: int, names=None, meta=None) -> str:
    removed = set(removed)
    x, y = 8, 24
    body = []
    for t, tok in enumerate(tokens):
        w = 7 * len(tok) + 6
        if t in removed:
            body.append(f'<rect x="{x - 2}" y="{y - 13}" width="{w}" height="18" fill="{color(1.0, 1.0)}" fill-opacity="0.35"/>')
        body.append(f'<text x="{x}" y="{y}"{" text-decoration=" + quoteattr("line-through") if t in removed else ""}>{escape(tok)}</text>')
        x += w + 2
    width = max(x + 8, 200)
    head = f"{_label_name(before, names)} -> {_label_name(after, names)}"
    return "\n".join(
        [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="56" font-family="monospace" font-size="12">',
            _metadata_element(meta or metadata()),
            *body,
            f'<text x="8" y="46">{escape(head)}</text>',
            "</svg>",
        ]
    ) + "\n"


def render_erasure(tokens, removed, labels: tuple[int, int], path, names=None, meta=None) -> tuple[Path, Path]:
    """Write ``path`` (plain text) and ``path`` with an ``.svg`` suffix."""
    path = Path(path)
    before, after = labels
    head = "# " + json.dumps(_round(dict(meta or metadata())), sort_keys=True) + "\n"
    _write(path, head + erasure_text(tokens, removed, before, after, names) + "\n")
    svg_path = path.with_suffix(".svg")
    _write(svg_path, erasure_svg(tokens, removed, before, after, names, meta))
    return path, svg_path
