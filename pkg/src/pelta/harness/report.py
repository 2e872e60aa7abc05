"""Deterministic serialisation of evaluation reports (CSV, JSON, text table).

Wall-clock runtime is kept on the in-memory report but never written, so two
runs with the same configuration and seed produce byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json

from .evaluate import ENSEMBLE_SETTINGS, FOOTER, INDIVIDUAL_SETTINGS, NO_ATTACK, EvalReport

FORMATS = ("csv", "json", "table")
CSV_HEADER = ["model", "attack", "shield", "robust_accuracy"]
CLEAN = "clean"
ENSEMBLE_ROWS = (("ensemble.vit", "ViT"), ("ensemble.cnn", "CNN"), ("ensemble", "Ensemble"))
SETTING_TITLES = {"none": "None", "vit_only": "ViT-only", "cnn_only": "CNN-only", "both": "Ensemble"}


def _sorted_cells(report):
    return sorted(report.cells.items())


def to_json(report: EvalReport) -> str:
    doc = {
        "clean_accuracy": dict(sorted(report.clean_accuracy.items())),
        "cells": [
            {"model": m, "attack": a, "shield": s, "robust_accuracy": v} for (m, a, s), v in _sorted_cells(report)
        ],
        "sample_count": report.sample_count,
        "seed": report.seed,
        "notes": list(report.notes) or [FOOTER],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def from_json(text) -> EvalReport:
    doc = json.loads(text)
    cells = {(c["model"], c["attack"], c["shield"]): float(c["robust_accuracy"]) for c in doc.get("cells", [])}
    return EvalReport(
        {k: float(v) for k, v in doc.get("clean_accuracy", {}).items()},
        cells,
        int(doc.get("sample_count", 0)),
        int(doc.get("seed", 0)),
        notes=[n for n in doc.get("notes", []) if n != FOOTER],
    )


def to_csv(report: EvalReport) -> str:
    """One row per cell; clean accuracies ride along as ``attack = clean`` rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for model, acc in sorted(report.clean_accuracy.items()):
        w.writerow([model, CLEAN, "", repr(float(acc))])
    for (m, a, s), v in _sorted_cells(report):
        w.writerow([m, a, s, repr(float(v))])
    return buf.getvalue()


def from_csv(text, sample_count=0, seed=0) -> EvalReport:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != CSV_HEADER:
        raise ValueError(f"CSV header must be {CSV_HEADER}")
    clean, cells = {}, {}
    for m, a, s, v in rows[1:]:
        if a == CLEAN:
            clean[m] = float(v)
        else:
            cells[(m, a, s)] = float(v)
    return EvalReport(clean, cells, sample_count, seed)


def _pct(v):
    return "-" if v is None else f"{100 * v:.1f}%"


def _grid(header, rows):
    widths = [max(len(str(r[k])) for r in [header] + rows) for k in range(len(header))]

    def fmt(r):
        return "  ".join(str(c).ljust(w) if k == 0 else str(c).rjust(w) for k, (c, w) in enumerate(zip(r, widths)))

    line = "-" * len(fmt(header))
    return [fmt(header), line] + [fmt(r) for r in rows]


def to_table(report: EvalReport) -> str:
    """Individual models: clear|shielded pairs per attack, then clean accuracy.
    Ensemble: one column per shield setting, one row per member plus the ensemble."""
    lines = [f"Robust accuracy ({report.sample_count} clean-correct samples, seed {report.seed})", ""]
    individual = sorted({m for (m, _, _) in report.cells if not m.startswith("ensemble")})
    if individual:
        attacks = sorted({a for (m, a, _) in report.cells if m in individual})
        header = ["Model"] + [f"{a.upper()} {s}" for a in attacks for s in INDIVIDUAL_SETTINGS] + ["Clean"]
        rows = []
        for m in individual:
            row = [m]
            for a in attacks:
                row += [_pct(report.cells.get((m, a, s))) for s in INDIVIDUAL_SETTINGS]
            row.append(_pct(report.clean_accuracy.get(m)))
            rows.append(row)
        lines += _grid(header, rows) + [""]
    ens_attacks = sorted({a for (m, a, _) in report.cells if m.startswith("ensemble") and a != NO_ATTACK})
    for a in ens_attacks:
        header = [f"{a.upper()} / applied shield"] + [SETTING_TITLES[s] for s in ENSEMBLE_SETTINGS] + ["Clean"]
        rows = []
        for key, title in ENSEMBLE_ROWS:
            row = [title] + [_pct(report.cells.get((key, a, s))) for s in ENSEMBLE_SETTINGS]
            rows.append(row + [_pct(report.clean_accuracy.get(key))])
        lines += _grid(header, rows) + [""]
    lines.append(FOOTER)
    return "\n".join(lines) + "\n"


def render(report: EvalReport, fmt) -> str:
    if fmt == "csv":
        return to_csv(report)
    if fmt == "json":
        return to_json(report)
    if fmt == "table":
        return to_table(report)
    raise ValueError(f"unknown report format {fmt!r}; choose from {FORMATS}")


def emit_report(report: EvalReport, fmt, path):
    text = render(report, fmt)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path
